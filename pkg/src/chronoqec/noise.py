"""Stochastic coupling processes: random-walk drift plus long-memory fluctuations.

A physical coupling is modelled as ``lambda(t) = drift(t) + zeta(t)`` where the
drift is a Gaussian random walk and ``zeta`` is a stationary zero-mean Gaussian
process with autocovariance ``scale * tau**(-beta)`` for lags ``tau >= 1``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy.linalg import toeplitz

# Horizons above this use too much memory for the exact factorization.
MAX_EXACT_HORIZON = 4096


def lag0_variance(beta: float, scale: float = 1.0) -> float:
    """Lag-0 variance of the long-memory process.

    The power law is singular at zero lag. Setting ``Cov(0) = scale`` makes the
    3x3 leading Toeplitz block indefinite (its determinant is
    ``-(1 - 2**-beta)**2``), so the lag-0 value is instead the convex
    continuation ``scale * (2 - 2**-beta)``. The resulting sequence is convex,
    decreasing and vanishing, hence a valid (positive definite) autocovariance.
    """
    return scale * (2.0 - 2.0 ** (-beta))


def power_law_autocovariance(horizon: int, beta: float, scale: float = 1.0) -> np.ndarray:
    lags = np.arange(horizon, dtype=float)
    acov = np.empty(horizon)
    acov[0] = lag0_variance(beta, scale)
    acov[1:] = scale * lags[1:] ** (-beta)
    return acov


@lru_cache(maxsize=8)
def _cholesky_factor(horizon: int, beta: float) -> np.ndarray:
    cov = toeplitz(power_law_autocovariance(horizon, beta, 1.0))
    try:
        factor = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            f"power-law covariance is not positive definite (horizon={horizon}, beta={beta})"
        ) from exc
    factor.setflags(write=False)
    return factor


def generate_long_memory_path(
    horizon: int, beta: float, scale: float, seed, n_paths: int | None = None
) -> np.ndarray:
    """Sample a stationary Gaussian path with power-law autocovariance.

    Uses the exact lower-triangular factor of the Toeplitz covariance, cached
    per ``(horizon, beta)``. ``seed`` may be an int, a ``SeedSequence`` or a
    ``Generator``. With ``n_paths`` set, returns an array of shape
    ``(n_paths, horizon)``.
    """
    if not 0.0 < beta < 1.0:
        raise ValueError(f"beta must lie in (0, 1), got {beta}")
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    if scale < 0.0:
        raise ValueError(f"scale must be >= 0, got {scale}")
    if horizon > MAX_EXACT_HORIZON:
        raise ValueError(f"horizon {horizon} exceeds exact-synthesis limit {MAX_EXACT_HORIZON}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    factor = _cholesky_factor(int(horizon), float(beta))
    shape = (horizon,) if n_paths is None else (n_paths, horizon)
    z = rng.standard_normal(shape)
    return np.sqrt(scale) * (z @ factor.T)


def empirical_autocovariance(paths: np.ndarray, max_lag: int) -> np.ndarray:
    """Autocovariance at lags ``0..max_lag`` using the known zero mean.

    ``paths`` is ``(n_paths, T)`` or ``(T,)``; estimates are pooled over paths.
    Subtracting the sample mean would bias long-memory estimates toward zero.
    """
    x = np.atleast_2d(np.asarray(paths, dtype=float))
    n = x.shape[1]
    out = np.empty(max_lag + 1)
    for lag in range(max_lag + 1):
        out[lag] = np.mean(x[:, : n - lag] * x[:, lag:])
    return out


def loglog_slope(acov: np.ndarray, lags: np.ndarray) -> float:
    slope, _ = np.polyfit(np.log(lags), np.log(acov[lags]), 1)
    return float(slope)


@dataclass
class DriftProcess:
    """Gaussian random walk ``x(t+1) = x(t) + nu``, ``nu ~ N(0, step_std**2)``."""

    current_value: float
    step_std: float
    rng: np.random.Generator = field(repr=False)
    last_increment: float = 0.0

    def __post_init__(self):
        if not np.isfinite(self.step_std) or self.step_std < 0.0:
            raise ValueError(f"step_std must be finite and >= 0, got {self.step_std}")

    @classmethod
    def from_seed(cls, value: float, step_std: float, seed) -> DriftProcess:
        return cls(float(value), float(step_std), np.random.default_rng(seed))

    def step(self) -> float:
        nu = self.step_std * self.rng.standard_normal()
        self.last_increment = nu
        self.current_value += nu
        return self.current_value


def drift_step(process: DriftProcess) -> float:
    return process.step()


@dataclass
class LongMemoryProcess:
    """Pre-generated long-memory path consumed one sample per call."""

    horizon: int
    beta: float
    scale: float
    path: np.ndarray = field(repr=False)
    cursor: int = 0

    @classmethod
    def from_seed(cls, horizon: int, beta: float, scale: float, seed) -> LongMemoryProcess:
        if scale == 0.0:
            path = np.zeros(horizon)
        else:
            path = generate_long_memory_path(horizon, beta, scale, seed)
        return cls(horizon, beta, scale, path)

    def next(self) -> float:
        if self.cursor >= self.horizon:
            raise IndexError("long-memory path exhausted; generate a longer horizon")
        value = float(self.path[self.cursor])
        self.cursor += 1
        return value


@dataclass
class CouplingProcess:
    """Sum of an independent drift and long-memory component.

    The first sample is ``drift(0) + zeta(0)``; each further call advances
    both components by one cycle.
    """

    drift: DriftProcess
    longmem: LongMemoryProcess
    _started: bool = False
    value: float = 0.0

    def sample(self) -> float:
        if self._started:
            self.drift.step()
        self._started = True
        self.value = self.drift.current_value + self.longmem.next()
        return self.value


def coupling_sample(coupling: CouplingProcess) -> float:
    return coupling.sample()


def make_coupling(
    initial: float, step_std: float, horizon: int, beta: float, scale: float, seed
) -> CouplingProcess:
    """Build a coupling whose two components draw from independent child seeds."""
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    drift_ss, mem_ss = ss.spawn(2)
    drift = DriftProcess.from_seed(initial, step_std, drift_ss)
    longmem = LongMemoryProcess.from_seed(horizon, beta, scale, mem_ss)
    return CouplingProcess(drift, longmem)
