"""Dense recurrent kernels with hand-written reverse-mode gradients.

Everything is float64 and batched over a leading axis ``B``. Sequences are
laid out ``(B, L, dim)``.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

CHECKPOINT_VERSION = 1


class Params:
    """Named parameter arrays stored as views into one flat vector."""

    def __init__(self, shapes: dict[str, tuple[int, ...]], flat: np.ndarray | None = None):
        self.shapes = {k: tuple(v) for k, v in shapes.items()}
        sizes = [int(np.prod(s)) for s in self.shapes.values()]
        self.size = int(sum(sizes))
        if flat is None:
            flat = np.zeros(self.size)
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.size,):
            raise ValueError(f"flat vector has shape {flat.shape}, expected ({self.size},)")
        self.flat = flat
        self._views = {}
        offset = 0
        for (name, shape), n in zip(self.shapes.items(), sizes):
            self._views[name] = self.flat[offset : offset + n].reshape(shape)
            offset += n

    def __getitem__(self, name: str) -> np.ndarray:
        return self._views[name]

    def __setitem__(self, name: str, value) -> None:
        view = self._views[name]
        if value is not view:
            view[...] = value

    def __contains__(self, name: str) -> bool:
        return name in self._views

    def names(self):
        return list(self.shapes)

    def copy(self) -> Params:
        return Params(self.shapes, self.flat.copy())

    def zeros_like(self) -> Params:
        return Params(self.shapes)

    def with_flat(self, flat: np.ndarray) -> Params:
        return Params(self.shapes, np.array(flat, dtype=float))

    def unflatten(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self._views.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> Params:
        p = cls({k: np.shape(v) for k, v in arrays.items()})
        for k, v in arrays.items():
            p[k][...] = v
        return p


def chdqn_shapes(d_h: int = 16, d_x: int = 4, n_a: int = 3) -> dict[str, tuple[int, ...]]:
    return {
        "W": (d_h, d_h),
        "U": (d_h, d_h),
        "V": (d_h, d_x),
        "R": (d_h,),
        "Qw": (n_a, d_h),
        "Qb": (n_a,),
    }


def init_chdqn_params(rng: np.random.Generator, d_h: int = 16, d_x: int = 4, n_a: int = 3) -> Params:
    p = Params(chdqn_shapes(d_h, d_x, n_a))
    p["W"][...] = rng.normal(0.0, 0.5 / np.sqrt(d_h), (d_h, d_h))
    p["U"][...] = rng.normal(0.0, 0.5 / np.sqrt(d_h), (d_h, d_h))
    p["V"][...] = rng.normal(0.0, 1.0 / np.sqrt(d_x), (d_h, d_x))
    p["R"][...] = rng.normal(0.0, 0.5, d_h)
    p["Qw"][...] = rng.normal(0.0, 0.1 / np.sqrt(d_h), (n_a, d_h))
    return p


# ---------------------------------------------------------------- cells


def forward_cell(params: Params, h_prev, x, r):
    """Causal filter step ``tanh(W h_prev + V x + R r)``; batched or single."""
    return np.tanh(h_prev @ params["W"].T + x @ params["V"].T + np.multiply.outer(r, params["R"]))


def smooth_cell(params: Params, h_prev, h_next, x, r):
    """Refinement step ``tanh(W h_prev + U h_next + V x + R r)``."""
    return np.tanh(
        h_prev @ params["W"].T
        + h_next @ params["U"].T
        + x @ params["V"].T
        + np.multiply.outer(r, params["R"])
    )


def q_values(params: Params, h):
    return h @ params["Qw"].T + params["Qb"]


def greedy_action(q: np.ndarray) -> int:
    # np.argmax returns the first maximum: ties go to the lowest action index.
    return int(np.argmax(q))


@dataclass
class UnrollTape:
    """Cached values of a causal unroll over a window of length ``L``."""

    h0: np.ndarray  # (B, d_h) state entering the window
    X: np.ndarray  # (B, L, d_x)
    Rp: np.ndarray  # (B, L) reward fed at each step
    H: np.ndarray  # (B, L, d_h) cell outputs

    @property
    def length(self) -> int:
        return self.X.shape[1]


def unroll(params: Params, h0, X, Rp) -> UnrollTape:
    X = np.asarray(X, dtype=float)
    Rp = np.asarray(Rp, dtype=float)
    B, L, _ = X.shape
    H = np.empty((B, L, params["W"].shape[0]))
    h = h0
    for t in range(L):
        h = forward_cell(params, h, X[:, t], Rp[:, t])
        H[:, t] = h
    return UnrollTape(np.asarray(h0, dtype=float), X, Rp, H)


def backward_window(params: Params, tape: UnrollTape, dH: np.ndarray) -> Params:
    """Reverse-mode gradient of a loss w.r.t. ``W, V, R`` through the unroll.

    ``dH[b, t]`` is the partial derivative of the loss w.r.t. ``H[b, t]``
    holding later steps fixed. The entering state ``h0`` is treated as data.
    Returns a gradient ``Params`` with the same layout as ``params``.
    """
    grads = params.zeros_like()
    gW, gV, gR = grads["W"], grads["V"], grads["R"]
    W = params["W"]
    carry = np.zeros_like(tape.h0)
    for t in range(tape.length - 1, -1, -1):
        h = tape.H[:, t]
        h_prev = tape.H[:, t - 1] if t > 0 else tape.h0
        dz = (dH[:, t] + carry) * (1.0 - h * h)
        gW += dz.T @ h_prev
        gV += dz.T @ tape.X[:, t]
        gR += dz.T @ tape.Rp[:, t]
        carry = dz @ W
    return grads


def smooth_backward(params: Params, h_prev, h_next, x, r, out, d_out) -> Params:
    """Gradient of a loss through one batch of refinement steps.

    Neighbouring latents are treated as data, so only ``W, U, V, R`` receive
    gradient.
    """
    grads = params.zeros_like()
    dz = d_out * (1.0 - out * out)
    grads["W"] += dz.T @ h_prev
    grads["U"] += dz.T @ h_next
    grads["V"] += dz.T @ x
    grads["R"] += dz.T @ r
    return grads


def q_head_backward(params: Params, h, dq, grads: Params) -> np.ndarray:
    """Accumulate Q-head gradients into ``grads``; returns ``dL/dh``."""
    grads["Qw"] += dq.T @ h
    grads["Qb"] += dq.sum(axis=0)
    return dq @ params["Qw"]


# ---------------------------------------------------------------- checks


def finite_difference(fn, flat: np.ndarray, step: float = 1e-5, indices=None) -> np.ndarray:
    """Central differences of scalar ``fn(flat)`` at ``flat``."""
    flat = np.array(flat, dtype=float)
    idx = range(flat.size) if indices is None else indices
    out = np.zeros(flat.size)
    for i in idx:
        orig = flat[i]
        flat[i] = orig + step
        up = fn(flat)
        flat[i] = orig - step
        down = fn(flat)
        flat[i] = orig
        out[i] = (up - down) / (2.0 * step)
    return out


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)


# ---------------------------------------------------------------- checkpoints


def save_checkpoint(path, params: Params, meta: dict | None = None) -> None:
    """Write params as ``.npz`` holding the flat vector and a JSON header.

    The write goes to a temporary file in the same directory and is renamed
    into place, so readers never see a partial checkpoint.
    """
    header = {
        "version": CHECKPOINT_VERSION,
        "shapes": {k: list(v) for k, v in params.shapes.items()},
        "meta": meta or {},
    }
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, flat=params.flat, header=np.array(json.dumps(header, sort_keys=True)))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path) -> tuple[Params, dict]:
    with np.load(path, allow_pickle=False) as data:
        header = json.loads(str(data["header"]))
        flat = data["flat"].copy()
    if header.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('version')!r}")
    shapes = {k: tuple(v) for k, v in header["shapes"].items()}
    return Params(shapes, flat), header["meta"]
