"""Latent regime -> Pauli channel -> encoded logical state and hazard."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PAULI_LABELS = ("I", "X", "Y", "Z")
MAX_LOGICAL_ERROR = 0.25


@dataclass(frozen=True)
class ChannelMap:
    """Softmax weights, logit bias and distance-dependent suppression.

    ``w`` has one row per Pauli label (I, X, Y, Z) and one column per latent
    component. ``logit_bias`` sets the operating point at ``theta = 0``.
    """

    w: np.ndarray
    distance: int = 3
    suppression_threshold: float = 0.1
    base_prefactor: float = 0.005
    logit_bias: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        if w.ndim != 2 or w.shape[0] != 4:
            raise ValueError(f"w must have shape (4, m), got {w.shape}")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "logit_bias", np.asarray(self.logit_bias, dtype=float).reshape(4))
        if self.distance < 3 or self.distance % 2 == 0:
            raise ValueError(f"code distance must be odd and >= 3, got {self.distance}")
        if not 0.0 < self.suppression_threshold < 1.0:
            raise ValueError("suppression_threshold must lie in (0, 1)")
        if self.base_prefactor < 0.0:
            raise ValueError("base_prefactor must be >= 0")

    @property
    def exponent(self) -> int:
        return (self.distance + 1) // 2


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - np.max(z)
    e = np.exp(z)
    return e / e.sum()


def pauli_from_regime(cmap: ChannelMap, theta: np.ndarray) -> np.ndarray:
    """Physical Pauli distribution ``(p_I, p_X, p_Y, p_Z)``."""
    return softmax(cmap.w @ np.asarray(theta, dtype=float) + cmap.logit_bias)


def logical_suppression(cmap: ChannelMap, physical: np.ndarray) -> np.ndarray:
    """Map physical to logical Pauli probabilities.

    ``q_P = base * (p_P / p_th)^((d+1)/2)`` for the three error labels, each
    clamped to ``[0, 0.25]`` so every Bloch contraction factor stays in
    ``[0, 1]``; ``q_I`` takes the remainder.
    """
    p = np.asarray(physical, dtype=float)
    q = np.empty(4)
    q[1:] = cmap.base_prefactor * (p[1:] / cmap.suppression_threshold) ** cmap.exponent
    np.clip(q[1:], 0.0, MAX_LOGICAL_ERROR, out=q[1:])
    q[0] = 1.0 - q[1:].sum()
    return q


def contraction_factors(q: np.ndarray) -> np.ndarray:
    """Bloch-axis contraction ``(1-2(qY+qZ), 1-2(qX+qZ), 1-2(qX+qY))``."""
    _, qx, qy, qz = q
    return np.array([1.0 - 2.0 * (qy + qz), 1.0 - 2.0 * (qx + qz), 1.0 - 2.0 * (qx + qy)])


@dataclass
class LogicalState:
    bloch: np.ndarray
    initial_bloch: np.ndarray
    fidelity: float = 1.0
    hazard: float = 0.0

    @classmethod
    def encoded(cls, bloch=(1.0, 0.0, 0.0)) -> LogicalState:
        b = np.asarray(bloch, dtype=float)
        if np.linalg.norm(b) > 1.0 + 1e-9:
            raise ValueError("Bloch vector must have norm <= 1")
        state = cls(b.copy(), b.copy())
        state.fidelity = fidelity_of(b, b)
        state.hazard = 1.0 - state.fidelity
        return state


def fidelity_of(bloch: np.ndarray, initial_bloch: np.ndarray) -> float:
    # Overlap with a pure initial state; equals 1 for a pure state against itself.
    return 0.5 * (1.0 + float(np.dot(bloch, initial_bloch)))


def apply_channel(state: LogicalState, logical: np.ndarray) -> tuple[LogicalState, float]:
    """Apply one logical Pauli channel; returns the new state and the risk.

    The risk is the fidelity decrement of this cycle.
    """
    bloch = contraction_factors(logical) * state.bloch
    fidelity = fidelity_of(bloch, state.initial_bloch)
    # Contraction factors in [0, 1] make the decrement non-negative up to
    # rounding; rounding noise must not make hazard decrease.
    fidelity = min(fidelity, state.fidelity)
    new = LogicalState(bloch, state.initial_bloch, fidelity, 1.0 - fidelity)
    return new, state.fidelity - fidelity


def hazard_threshold(distance: int, c: float) -> float:
    """Failure threshold ``c * sqrt(d)``."""
    if c <= 0.0:
        raise ValueError("threshold constant c must be > 0")
    return c * math.sqrt(distance)


# Dense 2x2 reference evolution; used only for cross-checking the Bloch path.

PAULI_MATRICES = (
    np.eye(2, dtype=complex),
    np.array([[0, 1], [1, 0]], dtype=complex),
    np.array([[0, -1j], [1j, 0]], dtype=complex),
    np.array([[1, 0], [0, -1]], dtype=complex),
)


def density_from_bloch(bloch: np.ndarray) -> np.ndarray:
    rho = PAULI_MATRICES[0].copy()
    for n, P in zip(bloch, PAULI_MATRICES[1:]):
        rho = rho + n * P
    return 0.5 * rho


def dense_pauli_channel(rho: np.ndarray, q: np.ndarray) -> np.ndarray:
    return sum(qp * (P @ rho @ P.conj().T) for qp, P in zip(q, PAULI_MATRICES))
