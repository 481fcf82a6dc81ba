"""Synthetic microphone-array frames and SRP-PHAT grid-search DOA estimation.

Far-field plane-wave model throughout. ``tdoa_theoretical(m, n, alpha)`` is how
much earlier microphone ``m`` hears a wavefront arriving from ``alpha`` than
microphone ``n`` does.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from itertools import combinations

import numpy as np

from .core import wrap_angle

SPEED_OF_SOUND = 343.0
_PHAT_EPS = 1e-12


class AcousticError(ValueError):
    pass


@dataclass(frozen=True)
class ArrayGeometry:
    mic_offsets: tuple[tuple[float, float], ...]

    def __post_init__(self) -> None:
        offs = tuple((float(x), float(y)) for x, y in self.mic_offsets)
        if len(offs) < 2 or len(set(offs)) < 2:
            raise AcousticError("need at least two distinct microphone offsets")
        object.__setattr__(self, "mic_offsets", offs)

    @property
    def M(self) -> int:
        return len(self.mic_offsets)

    @property
    def offsets(self) -> np.ndarray:
        return np.array(self.mic_offsets)

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return list(combinations(range(self.M), 2))

    @classmethod
    def circular(cls, m: int = 6, radius: float = 0.05) -> "ArrayGeometry":
        ang = 2.0 * np.pi * np.arange(m) / m
        return cls(tuple(zip(radius * np.cos(ang), radius * np.sin(ang))))


@dataclass(frozen=True)
class MultichannelFrame:
    sample_rate: float
    channels: np.ndarray

    def __post_init__(self) -> None:
        ch = np.atleast_2d(np.asarray(self.channels, dtype=float))
        if not self.sample_rate > 0:
            raise AcousticError("sample_rate must be positive")
        object.__setattr__(self, "channels", ch)


def _unit(alpha: float) -> np.ndarray:
    return np.array([math.cos(alpha), math.sin(alpha)])


def tdoa_theoretical(geometry: ArrayGeometry, pair: tuple[int, int], alpha: float,
                     c: float = SPEED_OF_SOUND) -> float:
    m, n = pair
    if m == n or not (0 <= m < geometry.M and 0 <= n < geometry.M):
        raise AcousticError(f"invalid microphone pair {pair}")
    o = geometry.offsets
    return float(np.dot(o[m] - o[n], _unit(alpha)) / c)


def chirp(fs: float, f0: float, f1: float, period: float, duration: float) -> np.ndarray:
    """Periodic linear up-chirp sampled at ``fs``; the sweep restarts every ``period`` seconds."""
    t = np.arange(int(round(duration * fs))) / fs
    tau = np.mod(t, period)
    k = (f1 - f0) / period
    return np.sin(2.0 * np.pi * (f0 * tau + 0.5 * k * tau * tau))


def synthesize(geometry: ArrayGeometry, source_alpha: float, f0: float = 3000.0, f1: float = 5000.0,
               period: float = 0.128, fs: float = 16000.0, duration: float = 0.256,
               snr_db: float = math.inf, rng_seed: int | np.random.Generator | None = 0) -> MultichannelFrame:
    """Plane-wave chirp at every microphone, delayed by a frequency-domain phase shift.

    The frame spans whole chirp periods, so the circular shift is an exact delay.
    """
    if fs <= 2.0 * f1:
        raise AcousticError(f"sample rate {fs} Hz aliases a chirp reaching {f1} Hz")
    s = chirp(fs, f0, f1, period, duration)
    S = np.fft.rfft(s)
    freqs = np.fft.rfftfreq(len(s), 1.0 / fs)
    # arrival time relative to the array origin: earlier for mics displaced toward the source
    arrival = -(geometry.offsets @ _unit(source_alpha)) / SPEED_OF_SOUND
    X = S[None, :] * np.exp(-2j * np.pi * freqs[None, :] * arrival[:, None])
    x = np.fft.irfft(X, n=len(s), axis=1)
    if math.isfinite(snr_db):
        rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
        p_sig = np.mean(x * x, axis=1, keepdims=True)
        x = x + rng.standard_normal(x.shape) * np.sqrt(p_sig / 10.0 ** (snr_db / 10.0))
    return MultichannelFrame(fs, x)


def phat_cross_spectra(frame: MultichannelFrame, geometry: ArrayGeometry) -> tuple[np.ndarray, np.ndarray]:
    """PHAT-weighted cross spectra for every pair, shape ``(pairs, bins)``, and the bin frequencies.

    Bins whose raw magnitude is below 1e-12 are zeroed.
    """
    ch = frame.channels
    if ch.shape[0] != geometry.M:
        raise AcousticError(f"frame has {ch.shape[0]} channels, geometry has {geometry.M}")
    if not np.any(ch):
        raise AcousticError("all-zero frame")
    X = np.fft.rfft(ch, axis=1)
    freqs = np.fft.rfftfreq(ch.shape[1], 1.0 / frame.sample_rate)
    G = np.array([X[m] * np.conj(X[n]) for m, n in geometry.pairs])
    mag = np.abs(G)
    out = np.zeros_like(G)
    ok = mag > _PHAT_EPS
    out[ok] = G[ok] / mag[ok]
    return out, freqs


@lru_cache(maxsize=16)
def _steering(geometry: ArrayGeometry, grid_step: float) -> tuple[np.ndarray, np.ndarray]:
    n_grid = int(math.ceil(2.0 * math.pi / grid_step - 1e-9))
    alphas = np.arange(n_grid) * grid_step
    o = geometry.offsets
    diffs = np.array([o[m] - o[k] for m, k in geometry.pairs])
    tau = diffs @ np.stack([np.cos(alphas), np.sin(alphas)]) / SPEED_OF_SOUND  # (pairs, grid)
    return alphas, tau


def srp_power(frame: MultichannelFrame, geometry: ArrayGeometry, alphas: np.ndarray) -> np.ndarray:
    """Steered response power at arbitrary angles (real part of the PHAT cross-power sum)."""
    G, freqs = phat_cross_spectra(frame, geometry)
    o = geometry.offsets
    diffs = np.array([o[m] - o[k] for m, k in geometry.pairs])
    alphas = np.atleast_1d(np.asarray(alphas, dtype=float))
    tau = diffs @ np.stack([np.cos(alphas), np.sin(alphas)]) / SPEED_OF_SOUND
    # G_mn = |S|^2 exp(j 2 pi f tau_mn) for the matched direction; steer it back with the conjugate phase
    phase = np.exp(-2j * np.pi * freqs[None, :, None] * tau[:, None, :])
    return np.real(np.einsum("pf,pfa->a", G, phase))


def srp_phat(frame: MultichannelFrame, geometry: ArrayGeometry, grid_step: float = math.radians(1.0),
             band: tuple[float, float] | None = None) -> float:
    """Grid-search DOA over [0, 2 pi); ties go to the smallest grid angle. Result in (-pi, pi].

    ``band`` optionally restricts the PHAT sum to ``f_lo <= f <= f_hi`` Hz.
    """
    if not (0.0 < grid_step <= math.pi / 18.0 + 1e-15):
        raise AcousticError("grid_step must lie in (0, pi/18]")
    G, freqs = phat_cross_spectra(frame, geometry)
    alphas, tau = _steering(geometry, float(grid_step))
    keep = np.any(G != 0, axis=0)
    if band is not None:
        keep &= (freqs >= band[0]) & (freqs <= band[1])
    Gb, fb = G[:, keep], freqs[keep]
    power = np.zeros(len(alphas))
    for p in range(Gb.shape[0]):
        power += np.real(np.exp(-2j * np.pi * np.outer(tau[p], fb)) @ Gb[p])
    return wrap_angle(float(alphas[int(np.argmax(power))]))
