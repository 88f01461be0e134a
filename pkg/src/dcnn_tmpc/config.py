"""Experiment configuration: one TOML or JSON file drives every tunable.

Each section maps onto a dataclass with the package defaults; unknown keys
are rejected so typos fail loudly. The resolved configuration is echoed
into experiment reports for reproducibility.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, fields

from .patient_model import BurstConfig, DriftConfig, StimParams
from .training import TrainConfig


@dataclass
class DataSection:
    fs_raw: float = 500.0
    fs: float = 50.0
    train_duration_s: float = 700.0
    train_seed: int = 101
    prbs_seed: int = 202
    burst: BurstConfig = field(default_factory=BurstConfig)


@dataclass
class ModelSection:
    ny: int = 8
    nu: int = 4
    n_steps: int = 5
    hidden: tuple = (8,)


@dataclass
class TrainSection:
    epochs: int = 60
    batch_size: int = 256
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 7
    test_size: int = 3000
    split_offset: int = 3000
    w_percentile: float = 0.80

    def to_train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, beta1=self.beta1,
                           beta2=self.beta2, eps=self.eps, seed=self.seed)


@dataclass
class MpcSection:
    Q: float = 1.0
    R: float = 0.03
    rho_soft: float = 50.0
    tube_reg: float = 0.0
    beta0_pct: float = 0.75
    y_max_pct: float = 0.95
    max_iters: int = 5
    dj_min_rel: float = 1e-4
    qp_eps: float = 1e-6
    qp_max_iter: int = 60000


@dataclass
class LimitsSection:
    u_max: float = 1.0
    du_max: float = 0.1


@dataclass
class PatientSection:
    g: float = 62.11
    tau1: float = 0.05
    tau2: float = 0.25
    step_frac: float = 0.025
    band_frac: float = 0.40
    atten_target: float = 0.05

    def stim_params(self) -> StimParams:
        return StimParams(g=self.g, tau1=self.tau1, tau2=self.tau2)

    def drift_config(self) -> DriftConfig:
        return DriftConfig(step_frac=self.step_frac, band_frac=self.band_frac)


@dataclass
class CompareSection:
    n_seeds: int = 50
    master_seed: int = 2024
    duration_s: float = 15.0
    ident_s: float = 5.0
    controllers: tuple = ("dcnn_tmpc", "linear_mpc", "pi", "on_off")


@dataclass
class PiSection:
    kp: float = 0.2
    ki: float = 2.0
    tune_kp: tuple = (0.1, 0.3, 1.0, 3.0)
    tune_ki: tuple = (0.5, 2.0, 5.0, 10.0)
    tune_lambda: float = 0.5
    tune_seeds: int = 3
    tune_duration_s: float = 10.0


@dataclass
class AriSection:
    n_beta: int = 4
    r_weight: float = 0.1


@dataclass
class PredictSection:
    """Prediction-accuracy study settings (stimulation-free data)."""

    duration_s: float = 700.0
    seed: int = 303
    hidden: tuple = (16,)
    epochs: int = 60


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    mpc: MpcSection = field(default_factory=MpcSection)
    limits: LimitsSection = field(default_factory=LimitsSection)
    patient: PatientSection = field(default_factory=PatientSection)
    compare: CompareSection = field(default_factory=CompareSection)
    pi: PiSection = field(default_factory=PiSection)
    ari: AriSection = field(default_factory=AriSection)
    predict: PredictSection = field(default_factory=PredictSection)

    def seeds(self):
        return list(range(self.compare.n_seeds))

    def ts(self) -> float:
        return 1.0 / self.data.fs


def _fill_dataclass(cls, values: dict, path: str):
    defaults = cls()
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in known:
            raise ValueError(f"unknown configuration key {path}{key}")
        current = getattr(defaults, key)
        if dataclasses.is_dataclass(current) and isinstance(value, dict):
            kwargs[key] = _fill_dataclass(type(current), value, f"{path}{key}.")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def config_from_dict(d: dict) -> ExperimentConfig:
    return _fill_dataclass(ExperimentConfig, d, "")


def load_config(path) -> ExperimentConfig:
    path = str(path)
    if path.endswith(".toml"):
        try:
            import tomllib
        except ModuleNotFoundError:  # Python 3.10
            import tomli as tomllib
        with open(path, "rb") as fh:
            return config_from_dict(tomllib.load(fh))
    if path.endswith(".json"):
        with open(path) as fh:
            return config_from_dict(json.load(fh))
    raise ValueError(f"unsupported config format: {path} (use .toml or .json)")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """JSON-ready echo of the full configuration (tuples become lists)."""
    return json.loads(json.dumps(dataclasses.asdict(cfg), default=list))
