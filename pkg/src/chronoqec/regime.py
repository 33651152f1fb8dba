"""Latent noise regime dynamics ``theta' = A theta + b * a + eta``."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_discrete_lyapunov

# Component order of theta.
BIT_POWER, PHASE_POWER, PERSISTENCE = 0, 1, 2
NEAR_UNIT_ROOT = 0.98


def spectral_radius(A: np.ndarray, iters: int = 50, tol: float = 1e-8) -> float:
    """Spectral radius by power iteration with repeated squaring.

    Uses Gelfand's formula ``rho = lim ||A^k||^(1/k)`` with ``k = 2^j``;
    unlike vector power iteration it converges for defective matrices and
    complex dominant eigenvalues. Iterates are renormalized to avoid overflow.
    """
    M = np.asarray(A, dtype=float)
    if M.size == 0:
        return 0.0
    log_scale = 0.0
    k = 1.0
    prev = np.inf
    est = 0.0
    for _ in range(iters):
        norm = np.linalg.norm(M, 2)
        if norm == 0.0:
            return 0.0
        est = float(np.exp((np.log(norm) + log_scale) / k))
        if abs(est - prev) < tol * max(1.0, est):
            break
        prev = est
        log_scale = 2.0 * (log_scale + np.log(norm))
        M = M / norm
        M = M @ M
        k *= 2.0
    return est


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    spectral_radius: float
    psd: bool
    near_unit_root: bool
    violations: tuple[str, ...] = ()


@dataclass
class RegimeDynamics:
    """Parameters of the controlled linear latent dynamics.

    ``b`` is the single action column: the discrete action enters as a scalar
    magnitude. ``inject_mask`` selects the components that receive the
    external coupling increments (drift + long-memory) on top of ``eta``.
    """

    A: np.ndarray
    b: np.ndarray
    sigma_eta: np.ndarray
    inject_mask: np.ndarray = field(default_factory=lambda: np.array([1.0, 1.0, 0.0]))
    _chol: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.b = np.asarray(self.b, dtype=float).reshape(-1)
        self.sigma_eta = np.atleast_2d(np.asarray(self.sigma_eta, dtype=float))
        self.inject_mask = np.asarray(self.inject_mask, dtype=float).reshape(-1)
        m = self.A.shape[0]
        if self.A.shape != (m, m) or self.b.shape != (m,) or self.sigma_eta.shape != (m, m):
            raise ValueError("A, b and sigma_eta dimensions disagree")
        if self.inject_mask.shape != (m,):
            self.inject_mask = np.zeros(m)

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def noise_factor(self) -> np.ndarray:
        if self._chol is None:
            jitter = 1e-12 * np.eye(self.m)
            self._chol = np.linalg.cholesky(self.sigma_eta + jitter)
        return self._chol

    def stationary_covariance(self, extra_noise: np.ndarray | None = None) -> np.ndarray:
        """Solve ``P = A P A^T + Q`` for the uncontrolled dynamics."""
        Q = self.sigma_eta.copy()
        if extra_noise is not None:
            Q = Q + extra_noise
        return solve_discrete_lyapunov(self.A, Q)


def validate_dynamics(dyn: RegimeDynamics) -> ValidationReport:
    violations = []
    radius = spectral_radius(dyn.A)
    if not radius < 1.0:
        violations.append(f"spectral radius {radius:.6g} >= 1")
    sym = np.allclose(dyn.sigma_eta, dyn.sigma_eta.T, atol=1e-12)
    try:
        np.linalg.cholesky(dyn.sigma_eta + 1e-12 * np.eye(dyn.m))
        psd = sym
    except np.linalg.LinAlgError:
        psd = False
    if not psd:
        violations.append("sigma_eta is not symmetric positive semidefinite")
    if not np.all(np.isfinite(dyn.A)) or not np.all(np.isfinite(dyn.b)):
        violations.append("non-finite entries in A or b")
    return ValidationReport(
        ok=not violations,
        spectral_radius=radius,
        psd=psd,
        near_unit_root=radius > NEAR_UNIT_ROOT,
        violations=tuple(violations),
    )


def regime_step(
    dyn: RegimeDynamics,
    theta: np.ndarray,
    action_magnitude: float,
    rng: np.random.Generator | None,
    injected: np.ndarray | None = None,
) -> np.ndarray:
    """Advance the latent regime by one cycle.

    ``injected`` holds the per-component external increment (already masked or
    not; ``dyn.inject_mask`` is applied here). ``rng=None`` disables the
    Gaussian innovation.
    """
    out = dyn.A @ theta + dyn.b * float(action_magnitude)
    if rng is not None:
        out = out + dyn.noise_factor @ rng.standard_normal(dyn.m)
    if injected is not None:
        out = out + dyn.inject_mask * injected
    if not np.all(np.isfinite(out)):
        raise FloatingPointError(f"latent regime became non-finite: {out}")
    return out
