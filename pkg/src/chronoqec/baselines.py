"""Comparison policies: the no-intervention policy and a gated recurrent DQN."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grad import Params, chdqn_shapes

GATES = ("i", "f", "o", "g")


class StaticPolicy:
    """Never intervenes: ``a = 0`` for every observation."""

    name = "static"

    def begin_episode(self) -> None:
        pass

    def select(self, obs, r_prev):
        return static_policy(obs), None


def static_policy(obs) -> int:
    return 0


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def gated_shapes(d_h: int, d_x: int = 4, n_a: int = 3) -> dict[str, tuple[int, ...]]:
    d_in = d_h + d_x + 1
    shapes = {f"W{g}": (d_h, d_in) for g in GATES}
    shapes.update({f"b{g}": (d_h,) for g in GATES})
    shapes.update({"Qw": (n_a, d_h), "Qb": (n_a,)})
    return shapes


def param_count(shapes) -> int:
    return int(sum(np.prod(s) for s in shapes.values()))


def matched_hidden_size(target: int, d_x: int = 4, n_a: int = 3) -> int:
    """Gated hidden size whose parameter count is closest to ``target``."""
    return min(range(1, 129), key=lambda d: abs(param_count(gated_shapes(d, d_x, n_a)) - target))


def chdqn_param_count(d_h: int, d_x: int = 4, n_a: int = 3) -> int:
    return param_count(chdqn_shapes(d_h, d_x, n_a))


@dataclass
class GatedTape:
    Z: np.ndarray  # (B, L, d_in) concatenated [h_prev, x, r]
    C_prev: np.ndarray  # (B, L, d_h)
    C: np.ndarray
    gates: dict  # name -> (B, L, d_h) activations
    H: np.ndarray  # (B, L, d_h)


def gated_forward(params: Params, h, c, x, r):
    """One gated step; returns ``(h', c', cache)``."""
    z = np.concatenate([h, x, np.asarray(r, dtype=float)[..., None]], axis=-1)
    i = sigmoid(z @ params["Wi"].T + params["bi"])
    f = sigmoid(z @ params["Wf"].T + params["bf"])
    o = sigmoid(z @ params["Wo"].T + params["bo"])
    g = np.tanh(z @ params["Wg"].T + params["bg"])
    c_new = f * c + i * g
    h_new = o * np.tanh(c_new)
    return h_new, c_new, (z, i, f, o, g)


class GatedCell:
    """Gated recurrence with state ``[h, c]`` packed along the last axis."""

    name = "gated"
    smoothing = False

    def __init__(self, d_h: int, d_x: int = 4, n_a: int = 3):
        self.d_h, self.d_x, self.n_a = d_h, d_x, n_a

    @property
    def state_size(self) -> int:
        return 2 * self.d_h

    def shapes(self):
        return gated_shapes(self.d_h, self.d_x, self.n_a)

    def init(self, rng: np.random.Generator) -> Params:
        p = Params(self.shapes())
        d_in = self.d_h + self.d_x + 1
        for g in GATES:
            p[f"W{g}"][...] = rng.normal(0.0, 0.5 / np.sqrt(d_in), (self.d_h, d_in))
        p["bf"][...] = 1.0
        p["Qw"][...] = rng.normal(0.0, 0.1 / np.sqrt(self.d_h), (self.n_a, self.d_h))
        return p

    def zero_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.state_size))

    def latent(self, state):
        return state[..., : self.d_h]

    def step(self, params, state, x, r):
        h, c = state[..., : self.d_h], state[..., self.d_h :]
        h, c, _ = gated_forward(params, h, c, x, r)
        return np.concatenate([h, c], axis=-1)

    def unroll(self, params, state0, X, Rp):
        B, L, _ = X.shape
        d = self.d_h
        d_in = d + self.d_x + 1
        Z = np.empty((B, L, d_in))
        C_prev = np.empty((B, L, d))
        C = np.empty((B, L, d))
        H = np.empty((B, L, d))
        gates = {g: np.empty((B, L, d)) for g in GATES}
        h, c = state0[:, :d], state0[:, d:]
        for t in range(L):
            C_prev[:, t] = c
            h, c, (z, i, f, o, g) = gated_forward(params, h, c, X[:, t], Rp[:, t])
            Z[:, t], C[:, t], H[:, t] = z, c, h
            for name, val in zip(GATES, (i, f, o, g)):
                gates[name][:, t] = val
        states = np.concatenate([H, C], axis=-1)
        return GatedTape(Z, C_prev, C, gates, H), H, states

    def backward(self, params, tape: GatedTape, dH):
        grads = params.zeros_like()
        d = self.d_h
        B, L, _ = dH.shape
        dh_carry = np.zeros((B, d))
        dc_carry = np.zeros((B, d))
        for t in range(L - 1, -1, -1):
            i, f, o, g = (tape.gates[k][:, t] for k in GATES)
            tc = np.tanh(tape.C[:, t])
            dh = dH[:, t] + dh_carry
            do = dh * tc
            dc = dc_carry + dh * o * (1.0 - tc * tc)
            df = dc * tape.C_prev[:, t]
            di = dc * g
            dg = dc * i
            dc_carry = dc * f
            pre = {
                "i": di * i * (1.0 - i),
                "f": df * f * (1.0 - f),
                "o": do * o * (1.0 - o),
                "g": dg * (1.0 - g * g),
            }
            z = tape.Z[:, t]
            dz = np.zeros_like(z)
            for k in GATES:
                grads[f"W{k}"] += pre[k].T @ z
                grads[f"b{k}"] += pre[k].sum(axis=0)
                dz += pre[k] @ params[f"W{k}"]
            dh_carry = dz[:, :d]
        return grads


def train_baseline(env_config, hyper, episodes: int, seed: int, **kwargs):
    """Train the gated baseline with Ch-DQN's loop minus its extra mechanisms."""
    from .agent import baseline_hyper, train

    return train(env_config, baseline_hyper(hyper), episodes, seed, **kwargs)
