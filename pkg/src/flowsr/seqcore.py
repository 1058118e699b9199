"""Shared tensor types, deterministic randomness and the diffusion noise schedule.

Array conventions used across the package:

* video frames are float arrays ``[N, C, H, W]`` with values in ``[0, 1]``
* latent grids are float arrays ``[N, Cz, h, w]`` with ``h = H/8, w = W/8``
* schedule steps are 1-based: ``t`` runs from 1 to ``T``
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """Invalid configuration value (bad schedule range, malformed config file...)."""


def _as_float_array(data, name: str) -> np.ndarray:
    arr = np.asarray(data, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries")
    return arr


@dataclass
class VideoSequence:
    """Ordered pixel frames ``[N, C, H, W]``, values clamped to ``[0, 1]``."""

    data: np.ndarray

    def __init__(self, data):
        arr = _as_float_array(data, "VideoSequence")
        if arr.ndim != 4:
            raise ValueError(f"VideoSequence: expected [N, C, H, W], got shape {arr.shape}")
        n, c, h, w = arr.shape
        if min(n, c, h, w) < 1:
            raise ValueError(f"VideoSequence: degenerate shape {arr.shape}")
        if c not in (1, 3):
            raise ValueError(f"VideoSequence: C must be 1 or 3, got {c}")
        self.data = np.clip(arr, 0.0, 1.0)

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass
class LatentSequence:
    """Per-frame latent grids ``[N, Cz, h, w]``; unbounded finite reals.

    ``h`` and ``w`` are 1/8 of the paired output resolution; the pairing is a
    pipeline-level contract, not checked here.
    """

    data: np.ndarray

    def __init__(self, data):
        arr = _as_float_array(data, "LatentSequence")
        if arr.ndim != 4:
            raise ValueError(f"LatentSequence: expected [N, Cz, h, w], got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise ValueError(f"LatentSequence: degenerate shape {arr.shape}")
        self.data = arr

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True)
class NoiseSchedule:
    """Variance schedule arrays for ``T`` diffusion steps.

    ``betas[t-1]`` etc. hold the value for 1-based step ``t``.  ``sigmas`` is
    the reverse-process noise scale: ``sigma_1 = 0`` and for ``t > 1`` either
    the posterior variance ``beta_tilde_t = (1 - abar_{t-1}) / (1 - abar_t) * beta_t``
    (default) or plain ``beta_t``, per ``variance_mode``.

    ``timesteps`` maps local steps onto the parent schedule's 1-based steps;
    for a freshly built schedule it is ``1..T``, for a strided schedule it
    names the surviving parent steps (used for time conditioning).
    """

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    sigmas: np.ndarray
    timesteps: np.ndarray
    variance_mode: str = "posterior"

    def __post_init__(self):
        if self.T < 1:
            raise ConfigError(f"schedule needs T >= 1, got {self.T}")
        for name in ("betas", "alphas", "alpha_bars", "sigmas"):
            if getattr(self, name).shape != (self.T,):
                raise ValueError(f"{name} must have shape ({self.T},)")
        if np.any(self.betas <= 0.0) or np.any(self.betas >= 1.0):
            raise ConfigError("betas must lie strictly inside (0, 1)")
        if self.T > 1 and not np.all(np.diff(self.alpha_bars) < 0.0):
            raise ValueError("alpha_bars must be strictly decreasing")
        if self.sigmas[0] != 0.0:
            raise ValueError("sigma_1 must be 0")

    def beta(self, t: int) -> float:
        return float(self.betas[self._idx(t)])

    def alpha(self, t: int) -> float:
        return float(self.alphas[self._idx(t)])

    def alpha_bar(self, t: int) -> float:
        return float(self.alpha_bars[self._idx(t)])

    def sigma(self, t: int) -> float:
        return float(self.sigmas[self._idx(t)])

    def _idx(self, t: int) -> int:
        if not 1 <= t <= self.T:
            raise ValueError(f"step t={t} outside [1, {self.T}]")
        return t - 1


def _sigmas_from(betas: np.ndarray, alpha_bars: np.ndarray, variance_mode: str) -> np.ndarray:
    if variance_mode not in ("posterior", "beta"):
        raise ConfigError(f"unknown variance_mode {variance_mode!r}")
    T = len(betas)
    var = np.empty(T, dtype=np.float64)
    var[0] = 0.0
    if T > 1:
        if variance_mode == "posterior":
            var[1:] = (1.0 - alpha_bars[:-1]) / (1.0 - alpha_bars[1:]) * betas[1:]
        else:
            var[1:] = betas[1:]
    return np.sqrt(var)


def make_linear_schedule(
    T: int,
    beta_start: float = 1e-4,
    beta_end: float = 0.02,
    variance_mode: str = "posterior",
) -> NoiseSchedule:
    """Linearly spaced betas with derived alpha / alpha-bar / sigma arrays."""
    if T < 1:
        raise ConfigError(f"schedule needs T >= 1, got {T}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ConfigError(
            f"need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    sigmas = _sigmas_from(betas, alpha_bars, variance_mode)
    return NoiseSchedule(
        T=T,
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        sigmas=sigmas,
        timesteps=np.arange(1, T + 1, dtype=np.int64),
        variance_mode=variance_mode,
    )


def subsample_schedule(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Uniformly strided sub-schedule for few-step sampling.

    Keeps the parent alpha-bar values at the surviving steps and re-derives
    per-step betas and sigmas from consecutive alpha-bar ratios, so the
    sub-schedule satisfies the same invariants as a full one.
    """
    if not 1 <= steps <= sched.T:
        raise ConfigError(f"steps={steps} outside [1, T={sched.T}]")
    sel = np.unique(np.round(np.linspace(1, sched.T, steps)).astype(np.int64))
    abar = sched.alpha_bars[sel - 1]
    prev = np.concatenate(([1.0], abar[:-1]))
    alphas = abar / prev
    betas = 1.0 - alphas
    sigmas = _sigmas_from(betas, abar, sched.variance_mode)
    return NoiseSchedule(
        T=len(sel),
        betas=betas,
        alphas=alphas,
        alpha_bars=abar,
        sigmas=sigmas,
        timesteps=sched.timesteps[sel - 1],
        variance_mode=sched.variance_mode,
    )


class Prng:
    """Deterministic random stream: PCG64 (256-bit state) under a 64-bit seed.

    Identical seeds give identical streams on every platform (NumPy pins the
    PCG64 bit stream and draws normals with the ziggurat transform).  Child
    streams for parallel workers come from :meth:`child` via SeedSequence
    spawn keys, so they are independent and order-free.
    """

    def __init__(self, seed: int, _ss: np.random.SeedSequence | None = None):
        if _ss is None:
            if not 0 <= int(seed) < 2**64:
                raise ConfigError(f"seed must be a u64, got {seed}")
            _ss = np.random.SeedSequence(int(seed))
        self.seed = int(seed)
        self._ss = _ss
        self._gen = np.random.Generator(np.random.PCG64(_ss))

    def child(self, label: str | int) -> "Prng":
        """Independent stream derived from this seed and a stable label."""
        if isinstance(label, str):
            key = int.from_bytes(hashlib.sha256(label.encode()).digest()[:8], "little")
        else:
            key = int(label)
        ss = np.random.SeedSequence(entropy=self._ss.entropy, spawn_key=self._ss.spawn_key + (key,))
        return Prng(self.seed, _ss=ss)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape, dtype=np.float64)

    def uniform(self, low: float = 0.0, high: float = 1.0, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None):
        return self._gen.integers(low, high, size=shape)

    def torch_seed(self) -> int:
        """Stable 63-bit seed for seeding a torch RNG from this stream's identity."""
        digest = hashlib.sha256(repr((self._ss.entropy, self._ss.spawn_key)).encode()).digest()
        return int.from_bytes(digest[:8], "little") >> 1


def gaussian_noise(shape, rng: Prng) -> np.ndarray:
    """I.i.d. standard normal array (ziggurat transform, fixed by the PRNG)."""
    shape = tuple(int(s) for s in (shape if np.iterable(shape) else (shape,)))
    if len(shape) == 0 or any(s <= 0 for s in shape):
        raise ValueError(f"gaussian_noise: invalid shape {shape}")
    return rng.normal(shape)


def l1_total(a: np.ndarray, b: np.ndarray) -> float:
    """Sum of absolute differences over all entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"l1_total: shape mismatch {a.shape} vs {b.shape}")
    return float(np.abs(a - b).sum())
