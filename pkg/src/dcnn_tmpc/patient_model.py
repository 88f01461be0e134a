"""Synthetic Parkinsonian patient.

The measured beta envelope is the nominal (stimulation-free) envelope
attenuated exponentially by the stimulation response state:
y = y_beta * exp(-eta). The response eta is the output of a second-order
lower-triangular linear system with gain g and time constants tau1, tau2,
discretized exactly under a zero-order hold. The three parameters drift in
a clamped random walk: per-step moves of at most step_frac of nominal,
total excursion within band_frac of nominal.

Controller-facing inputs are normalized to [0, 1]; the patient rescales
them so that full stimulation at nominal parameters attenuates the
envelope to atten_target.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import sigproc


@dataclass
class StimParams:
    g: float = 62.11
    tau1: float = 0.05
    tau2: float = 0.25

    def __post_init__(self):
        if self.g <= 0.0 or self.tau1 <= 0.0 or self.tau2 <= 0.0:
            raise ValueError("stimulation parameters must be positive")


@dataclass
class StimDiscrete:
    A_d: np.ndarray
    B_d: np.ndarray
    T_s: float


def discretize_stim(p: StimParams, T_s: float) -> StimDiscrete:
    """Exact ZOH discretization of the stimulation response dynamics.

    Closed-form in exp(-T_s/tau1), exp(-T_s/tau2); the confluent limit is
    used when the two poles nearly coincide.
    """
    if T_s <= 0.0:
        raise ValueError("sample period must be positive")
    a = 1.0 / p.tau1
    b = 1.0 / p.tau2
    g = p.g
    ea = math.exp(-a * T_s)
    eb = math.exp(-b * T_s)
    A = np.empty((2, 2))
    B = np.empty(2)
    A[0, 0] = ea
    A[0, 1] = 0.0
    A[1, 1] = eb
    B[0] = g * (1.0 - ea)
    if abs(a - b) < 1e-9:
        A[1, 0] = g * b * T_s * ea
        B[1] = g * g * (1.0 - ea * (1.0 + a * T_s))
    else:
        A[1, 0] = g * b * (ea - eb) / (b - a)
        B[1] = g * g / (b - a) * (b * (1.0 - ea) - a * (1.0 - eb))
    return StimDiscrete(A_d=A, B_d=B, T_s=T_s)


def stim_step(x_c: np.ndarray, u: float, d: StimDiscrete):
    """One ZOH step; the response output is the second state component."""
    x_new = d.A_d @ x_c + d.B_d * u
    return x_new, float(x_new[1])


def beta_modulate(y_beta: float, eta: float) -> float:
    """Attenuated envelope y = y_beta * exp(-eta)."""
    return float(y_beta * math.exp(-eta))


@dataclass
class DriftConfig:
    step_frac: float = 0.025
    band_frac: float = 0.40


# steady-state attenuation exp(-g^2 * u_scale) at full normalized input
DEFAULT_ATTEN_TARGET = 0.05


def input_scale_for(params: StimParams, atten_target: float = DEFAULT_ATTEN_TARGET) -> float:
    """Physical input per unit normalized input, from the DC gain g^2."""
    if not (0.0 < atten_target < 1.0):
        raise ValueError("attenuation target must be in (0, 1)")
    return -math.log(atten_target) / (params.g ** 2)


@dataclass(eq=False)
class PatientState:
    nominal: StimParams
    current: StimParams
    x_c: np.ndarray
    disc: StimDiscrete
    rng: np.random.Generator
    u_scale: float
    drift: DriftConfig = field(default_factory=DriftConfig)
    k: int = 0  # beta stream cursor

    @classmethod
    def create(cls, nominal: StimParams, T_s: float, seed,
               drift: DriftConfig | None = None,
               atten_target: float = DEFAULT_ATTEN_TARGET) -> "PatientState":
        return cls(
            nominal=nominal,
            current=StimParams(nominal.g, nominal.tau1, nominal.tau2),
            x_c=np.zeros(2),
            disc=discretize_stim(nominal, T_s),
            rng=np.random.default_rng(seed),
            u_scale=input_scale_for(nominal, atten_target),
            drift=drift or DriftConfig(),
        )

    @property
    def eta(self) -> float:
        return float(self.x_c[1])


def random_walk_step(st: PatientState) -> PatientState:
    """Drift each parameter by a uniform step, clamped into the nominal band."""
    d = st.drift
    cur = st.current
    nom = st.nominal
    new = []
    for value, nominal in ((cur.g, nom.g), (cur.tau1, nom.tau1), (cur.tau2, nom.tau2)):
        step = st.rng.uniform(-d.step_frac, d.step_frac) * nominal
        lo = (1.0 - d.band_frac) * nominal
        hi = (1.0 + d.band_frac) * nominal
        new.append(min(max(value + step, lo), hi))
    st.current = StimParams(*new)
    st.disc = discretize_stim(st.current, st.disc.T_s)
    return st


def patient_step(st: PatientState, u: float, y_beta_next: float):
    """Advance one sample: drift, stimulate with normalized input u, modulate."""
    random_walk_step(st)
    st.x_c, eta = stim_step(st.x_c, u * st.u_scale, st.disc)
    st.k += 1
    return st, beta_modulate(y_beta_next, eta)


@dataclass
class BurstConfig:
    """Bursty beta-band LFP generator settings (all rates in Hz / seconds)."""

    f_center: float = 21.0
    bandwidth: float = 3.0
    quiet_std: float = 0.25
    burst_std: float = 1.6
    mean_burst_s: float = 0.4
    mean_quiet_s: float = 0.7
    noise_std: float = 0.05


def synth_beta_lfp(duration_s: float, fs_raw: float, burst: BurstConfig, seed) -> np.ndarray:
    """Raw synthetic LFP: a resonator at the beta center frequency driven by
    white noise whose level switches between quiet and burst states via a
    two-state Markov chain, plus broadband measurement noise."""
    if duration_s <= 0.0:
        raise ValueError("duration must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * fs_raw))
    # alternate quiet/burst segments with geometric lengths
    std = np.empty(n)
    pos = 0
    in_burst = False
    while pos < n:
        mean_len = burst.mean_burst_s if in_burst else burst.mean_quiet_s
        p_exit = 1.0 / max(mean_len * fs_raw, 1.0)
        length = int(rng.geometric(p_exit))
        std[pos:pos + length] = burst.burst_std if in_burst else burst.quiet_std
        pos += length
        in_burst = not in_burst
    drive = rng.normal(size=n) * std
    # AR(2) resonator: poles at radius r, angle 2*pi*f_center/fs
    r = math.exp(-math.pi * burst.bandwidth / fs_raw)
    w0 = 2.0 * math.pi * burst.f_center / fs_raw
    sos = np.array([[1.0, 0.0, 0.0, 1.0, -2.0 * r * math.cos(w0), r * r]])
    x = sigproc.filter_apply(sigproc.BiquadCascade(sos=sos), drive)
    return x + rng.normal(size=n) * burst.noise_std


def nominal_envelope(duration_s: float, fs_raw: float, fs: float, burst: BurstConfig,
                     seed, f_lo: float = 18.0, f_hi: float = 24.0,
                     settle_s: float = 2.0) -> np.ndarray:
    """Full preprocessing chain: synthetic LFP -> band-pass -> envelope ->
    decimation to the control rate. The settle window absorbs filter
    transients and is discarded."""
    raw = synth_beta_lfp(duration_s + settle_s, fs_raw, burst, seed)
    bp = sigproc.design_butterworth_bandpass(6, f_lo, f_hi, fs_raw)
    banded = sigproc.filter_apply(bp, raw)
    env = sigproc.extract_envelope(banded, fs_raw, f_center=0.5 * (f_lo + f_hi))
    env50 = sigproc.decimate_to(env, fs_raw, fs)
    skip = int(round(settle_s * fs))
    return env50[skip:]
