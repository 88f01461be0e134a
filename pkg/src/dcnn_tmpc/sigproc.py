"""Preprocessing: causal IIR filtering, envelope extraction, decimation, PRBS.

Filters are designed as analog Butterworth prototypes mapped through the
pre-warped bilinear transform and realized as cascades of second-order
sections (scipy does the design; pole/zero pairing is nearest-pair by
magnitude). Filtering is causal direct-form-II-transposed with per-section
state, so a cascade can be used for streaming.

The envelope extractor uses complex demodulation at the band center:
multiply by a complex exponential, low-pass, take twice the magnitude.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import signal as _sps


@dataclass(eq=False)
class BiquadCascade:
    """Cascade of second-order sections with per-section filter state."""

    sos: np.ndarray  # (K, 6) rows [b0, b1, b2, a0, a1, a2], a0 = 1
    zi: np.ndarray = None

    def __post_init__(self):
        self.sos = np.asarray(self.sos, dtype=float).reshape(-1, 6)
        if self.zi is None:
            self.reset()

    def reset(self):
        self.zi = np.zeros((self.sos.shape[0], 2))

    def poles(self) -> np.ndarray:
        roots = []
        for sec in self.sos:
            roots.extend(np.roots(sec[3:]))
        return np.asarray(roots)

    def response(self, freqs, fs) -> np.ndarray:
        """Complex frequency response evaluated directly from the coefficients."""
        w = 2.0 * np.pi * np.asarray(freqs, dtype=float) / fs
        zinv = np.exp(-1j * w)
        h = np.ones_like(zinv, dtype=complex)
        for b0, b1, b2, a0, a1, a2 in self.sos:
            h *= (b0 + b1 * zinv + b2 * zinv**2) / (a0 + a1 * zinv + a2 * zinv**2)
        return h


def design_butterworth_bandpass(order=6, f_lo=18.0, f_hi=24.0, fs=500.0) -> BiquadCascade:
    """Band-pass Butterworth of the given total order (must be even).

    A 6th-order band-pass comes from a 3rd-order low-pass prototype and
    yields three biquad sections. Gain is ~0 dB at the geometric center
    and -3 dB at the band edges.
    """
    if not (0.0 < f_lo < f_hi < fs / 2.0):
        raise ValueError(f"invalid band edges ({f_lo}, {f_hi}) for fs={fs}")
    if order % 2 != 0:
        raise ValueError("band-pass order must be even")
    sos = _sps.butter(order // 2, [f_lo, f_hi], btype="bandpass", fs=fs, output="sos")
    return BiquadCascade(sos=sos)


def design_butterworth_lowpass(order, cutoff, fs) -> BiquadCascade:
    if not (0.0 < cutoff < fs / 2.0):
        raise ValueError(f"invalid cutoff {cutoff} for fs={fs}")
    sos = _sps.butter(order, cutoff, btype="lowpass", fs=fs, output="sos")
    return BiquadCascade(sos=sos)


def filter_apply(c: BiquadCascade, x) -> np.ndarray:
    """Causal filtering; advances the cascade state, output length = input length."""
    x = np.asarray(x)
    if x.size == 0:
        return x.astype(float)
    y, zf = _sps.sosfilt(c.sos, x, zi=c.zi.astype(x.dtype) if np.iscomplexobj(x) else c.zi)
    c.zi = np.real(zf) if not np.iscomplexobj(x) else zf
    return y


def extract_envelope(x, fs, f_center=21.0, lp_cutoff=5.0) -> np.ndarray:
    """Instantaneous amplitude around f_center by complex demodulation."""
    x = np.asarray(x, dtype=float)
    if f_center >= fs / 2.0:
        raise ValueError("demodulation frequency must be below Nyquist")
    t = np.arange(x.size) / fs
    mixed = x * np.exp(-2j * np.pi * f_center * t)
    lp = design_butterworth_lowpass(2, lp_cutoff, fs)
    base = _sps.sosfilt(lp.sos, mixed)
    return 2.0 * np.abs(base)


def decimate_to(x, fs_in, fs_out=50.0) -> np.ndarray:
    """Anti-alias low-pass (cutoff 0.4 * fs_out) then keep every ratio-th sample."""
    x = np.asarray(x, dtype=float)
    ratio = fs_in / fs_out
    if abs(ratio - round(ratio)) > 1e-9:
        raise ValueError(f"fs_in={fs_in} is not an integer multiple of fs_out={fs_out}")
    ratio = int(round(ratio))
    if ratio == 1:
        return x.copy()
    aa = design_butterworth_lowpass(4, 0.4 * fs_out, fs_in)
    return _sps.sosfilt(aa.sos, x)[::ratio]


@dataclass
class PrbsConfig:
    length: int
    du_max: float
    u_max: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 < self.du_max <= self.u_max):
            raise ValueError("need 0 < du_max <= u_max")


# taps of a maximal-length 16-bit Galois LFSR (x^16 + x^14 + x^13 + x^11 + 1)
_LFSR_TAPS = 0xB400


def generate_prbs(cfg: PrbsConfig) -> np.ndarray:
    """Random-walk excitation: increments +-du_max from a seeded maximal-length
    shift register, integrated and clamped into [0, u_max]; u_0 = 0."""
    state = (cfg.seed % 0xFFFF) + 1  # never zero
    u = np.empty(cfg.length)
    u[0] = 0.0
    prev = 0.0
    for k in range(1, cfg.length):
        bit = state & 1
        state >>= 1
        if bit:
            state ^= _LFSR_TAPS
        step = cfg.du_max if bit else -cfg.du_max
        prev = min(max(prev + step, 0.0), cfg.u_max)
        u[k] = prev
    return u
