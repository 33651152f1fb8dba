"""Chronological DQN: causal filter, backward refinement, fractional meta-update.

The same training loop also drives the gated baseline; the baseline differs
only in the recurrent cell and in having refinement, consistency loss and
meta-update switched off (see :func:`baseline_hyper`).
"""

from __future__ import annotations

import csv
import logging
import pickle
from collections import deque
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .env import EnvConfig, EpisodeTrace, QECEnv, run_episode
from .grad import (
    Params,
    backward_window,
    chdqn_shapes,
    forward_cell,
    greedy_action,
    init_chdqn_params,
    q_head_backward,
    q_values,
    smooth_cell,
    unroll,
)

log = logging.getLogger(__name__)

N_ACTIONS = 3
OBS_DIM = 4
LOG_COLUMNS = ("episode", "return", "td_loss", "cons_loss", "mean_latent_norm", "epsilon", "length", "ctrl")


@dataclass
class AgentHyper:
    eta: float = 0.03
    eta_meta: float = 0.003
    gamma_frac: float = 0.5
    K_memory: int = 32
    gamma_disc: float = 0.995
    eps_start: float = 1.0
    eps_end: float = 0.05
    eps_decay_frac: float = 0.6
    L_window: int = 16
    consistency_weight: float = 0.1
    target_sync: float = 0.01
    d_h: int = 16
    cell: str = "tanh"
    batch_windows: int = 8
    updates_per_episode: int = 12
    replay_episodes: int = 64
    grad_clip: float = 10.0
    obs_scale: list = field(default_factory=lambda: [100.0, 1.0, 1.0, 5.0])
    reward_scale: float = 100.0

    def validate(self, prefix="agent"):
        errs = []
        if not self.eta > 0:
            errs.append((f"{prefix}.eta", "must be > 0"))
        if self.eta_meta < 0:
            errs.append((f"{prefix}.eta_meta", "must be >= 0"))
        elif self.eta_meta > 0.1 * self.eta:
            errs.append((f"{prefix}.eta_meta", "two-timescale guard: eta_meta must be <= 0.1 * eta"))
        if not 0.0 < self.gamma_frac < 1.0:
            errs.append((f"{prefix}.gamma_frac", "must lie in (0, 1)"))
        if self.K_memory < 1:
            errs.append((f"{prefix}.K_memory", "must be >= 1"))
        if not 0.0 < self.gamma_disc <= 1.0:
            errs.append((f"{prefix}.gamma_disc", "must lie in (0, 1]"))
        for name in ("eps_start", "eps_end", "eps_decay_frac", "target_sync"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                errs.append((f"{prefix}.{name}", "must lie in [0, 1]"))
        for name in ("L_window", "d_h", "batch_windows", "replay_episodes"):
            if getattr(self, name) < 1:
                errs.append((f"{prefix}.{name}", "must be >= 1"))
        if self.updates_per_episode < 0:
            errs.append((f"{prefix}.updates_per_episode", "must be >= 0"))
        if self.consistency_weight < 0:
            errs.append((f"{prefix}.consistency_weight", "must be >= 0"))
        if self.cell not in ("tanh", "gated"):
            errs.append((f"{prefix}.cell", "must be 'tanh' or 'gated'"))
        if self.cell == "gated" and (self.consistency_weight > 0 or self.eta_meta > 0):
            errs.append((prefix, "the gated cell supports neither refinement nor meta-update"))
        if len(self.obs_scale) != OBS_DIM:
            errs.append((f"{prefix}.obs_scale", f"must have {OBS_DIM} entries"))
        return errs

    def check(self):
        from .env import ConfigError

        errs = self.validate()
        if errs:
            raise ConfigError(errs)
        return self


# Settings allowed to differ between Ch-DQN and its gated baseline.
BASELINE_DIFF = ("cell", "consistency_weight", "eta_meta", "d_h")


def baseline_hyper(hyper: AgentHyper) -> AgentHyper:
    """Controlled-comparison settings: gated cell, no extras, matched capacity."""
    from .baselines import chdqn_param_count, matched_hidden_size

    if hyper.cell == "gated":
        return hyper
    d_h = matched_hidden_size(chdqn_param_count(hyper.d_h))
    return replace(hyper, cell="gated", consistency_weight=0.0, eta_meta=0.0, d_h=d_h)


# ---------------------------------------------------------------- fractional memory


class FractionalKernel:
    """Normalized power-law weights ``alpha_k = (k+1)^-gamma / sum_j j^-gamma``."""

    def __init__(self, gamma: float, K: int):
        if not 0.0 < gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if K < 1:
            raise ValueError("K must be >= 1")
        self.gamma, self.K = gamma, K
        raw = np.arange(1, K + 1, dtype=float) ** (-gamma)
        self.weights = raw / raw.sum()

    def truncated(self, n: int) -> np.ndarray:
        """First ``n`` weights renormalized to sum to one."""
        raw = np.arange(1, n + 1, dtype=float) ** (-self.gamma)
        return raw / raw.sum()


class ParameterSnapshotRing:
    """The last ``K + 1`` flat parameter vectors, oldest first."""

    def __init__(self, K: int):
        self.K = K
        self.snapshots: deque = deque(maxlen=K + 1)
        self.steps: deque = deque(maxlen=K + 1)
        self._counter = 0

    def push(self, flat: np.ndarray) -> None:
        self.snapshots.append(np.array(flat, dtype=float))
        self.steps.append(self._counter)
        self._counter += 1

    def __len__(self) -> int:
        return len(self.snapshots)


def fractional_delta(ring: ParameterSnapshotRing, kernel: FractionalKernel) -> np.ndarray:
    """``sum_k alpha_k (w_{t-k} - w_{t-k-1})`` over the available history.

    With fewer than ``K + 1`` snapshots the sum runs over the available
    consecutive pairs with renormalized weights.
    """
    snaps = ring.snapshots
    if len(snaps) == 0:
        raise ValueError("empty snapshot ring")
    pairs = min(len(snaps) - 1, kernel.K)
    if pairs == 0:
        return np.zeros_like(snaps[-1])
    alpha = kernel.weights if pairs == kernel.K else kernel.truncated(pairs)
    out = np.zeros_like(snaps[-1])
    for k in range(pairs):
        out += alpha[k] * (snaps[-1 - k] - snaps[-2 - k])
    return out


def meta_update(params: Params, gradient: np.ndarray, ring: ParameterSnapshotRing, kernel, hyper) -> Params | None:
    """``w - eta * grad - eta_m * fractional_delta``; pushes the new snapshot.

    Returns ``None`` (and leaves the ring untouched) when the gradient or the
    result is not finite.
    """
    if not np.all(np.isfinite(gradient)):
        return None
    flat = params.flat - hyper.eta * gradient
    if hyper.eta_meta > 0.0:
        flat = flat - hyper.eta_meta * fractional_delta(ring, kernel)
    if not np.all(np.isfinite(flat)):
        return None
    ring.push(flat)
    return params.with_flat(flat)


def drift_testbed(eta: float, eta_meta: float, curvature: float = 1.0, period: float = 100.0,
                  amplitude: float = 1.0, noise: float = 0.0, iters: int = 500, gamma: float = 0.5,
                  K: int = 32, seed: int = 0) -> np.ndarray:
    """Scalar linearized recursion driven by a low-frequency drift force.

    Runs ``meta_update`` on one parameter with gradient
    ``H_t (w - w*) + f_t`` where ``w* = 0`` and ``f_t`` is a sinusoid of the
    given period plus optional white noise. Returns ``w_t`` for every
    iteration.
    """
    hyper = AgentHyper(eta=eta, eta_meta=eta_meta, gamma_frac=gamma, K_memory=K)
    kernel = FractionalKernel(gamma, K)
    ring = ParameterSnapshotRing(K)
    params = Params({"w": (1,)})
    ring.push(params.flat)
    rng = np.random.default_rng(seed)
    out = np.empty(iters)
    for t in range(iters):
        force = amplitude * np.sin(2.0 * np.pi * t / period) + noise * rng.standard_normal()
        grad = curvature * params.flat + force
        params = meta_update(params, grad, ring, kernel, hyper)
        out[t] = params.flat[0]
    return out


# ---------------------------------------------------------------- cells


class TanhCell:
    """Causal filter ``h_t = tanh(W h_{t-1} + V x_t + R r)`` with refinement."""

    name = "tanh"
    smoothing = True

    def __init__(self, d_h: int, d_x: int = OBS_DIM, n_a: int = N_ACTIONS):
        self.d_h, self.d_x, self.n_a = d_h, d_x, n_a

    @property
    def state_size(self) -> int:
        return self.d_h

    def shapes(self):
        return chdqn_shapes(self.d_h, self.d_x, self.n_a)

    def init(self, rng):
        return init_chdqn_params(rng, self.d_h, self.d_x, self.n_a)

    def zero_state(self, batch: int) -> np.ndarray:
        return np.zeros((batch, self.d_h))

    def latent(self, state):
        return state

    def step(self, params, state, x, r):
        return forward_cell(params, state, x, r)

    def unroll(self, params, state0, X, Rp):
        tape = unroll(params, state0, X, Rp)
        return tape, tape.H, tape.H

    def backward(self, params, tape, dH):
        return backward_window(params, tape, dH)


def make_cell(hyper: AgentHyper):
    if hyper.cell == "tanh":
        return TanhCell(hyper.d_h)
    from .baselines import GatedCell

    return GatedCell(hyper.d_h)


# ---------------------------------------------------------------- agent


def refine_trajectory(params: Params, latents: np.ndarray, X: np.ndarray, Rp: np.ndarray) -> np.ndarray:
    """Single backward-informed pass over one trajectory.

    ``latents[t]`` are the causal latents ``h_t`` for ``t = 0..T``; returns
    ``h~_t = tanh(W h_{t-1} + U h_{t+1} + V x_t + R r_{t-1})`` with zero
    padding at both ends. Trajectories shorter than two steps are returned
    unchanged (no refinement possible).
    """
    n = len(latents)
    if n < 2:
        return np.array(latents, dtype=float, copy=True)
    zero = np.zeros((1, latents.shape[1]))
    h_prev = np.concatenate([zero, latents[:-1]])
    h_next = np.concatenate([latents[1:], zero])
    return smooth_cell(params, h_prev, h_next, X, Rp)


def consistency_loss(latents: np.ndarray, refined: np.ndarray) -> float:
    return float(np.sum((latents - refined) ** 2))


class ChDQNAgent:
    """Recurrent Q-learner; acting uses only the causal cell."""

    def __init__(self, hyper: AgentHyper, params: Params | None = None, seed: int = 0):
        hyper.check()
        self.hyper = hyper
        self.cell = make_cell(hyper)
        self.obs_scale = np.asarray(hyper.obs_scale, dtype=float)
        if params is None:
            params = self.cell.init(np.random.default_rng(seed))
        if dict(params.shapes) != dict(self.cell.shapes()):
            raise ValueError("parameter shapes do not match the agent configuration")
        self.params = params
        self.target = params.copy()
        self.kernel = FractionalKernel(hyper.gamma_frac, hyper.K_memory)
        self.ring = ParameterSnapshotRing(hyper.K_memory)
        self.ring.push(params.flat)
        self.rejected_updates = 0

    # -- inference

    def features(self, obs_vec) -> np.ndarray:
        return np.asarray(obs_vec, dtype=float) * self.obs_scale

    def act(self, state, obs_vec, r_prev, epsilon, rng=None):
        """Epsilon-greedy action from the causal latent; returns ``(a, state)``."""
        x = self.features(obs_vec)[None]
        state = self.cell.step(self.params, state, x, np.array([r_prev * self.hyper.reward_scale]))
        h = self.cell.latent(state)[0]
        if epsilon > 0.0 and rng is not None and rng.random() < epsilon:
            return int(rng.integers(N_ACTIONS)), state
        return greedy_action(q_values(self.params, h)), state

    def policy(self, epsilon: float = 0.0, rng=None) -> AgentPolicy:
        return AgentPolicy(self, epsilon, rng)

    # -- training

    def sequence_inputs(self, trace: EpisodeTrace):
        """Scaled inputs ``x_t`` and fed rewards ``r_{t-1}`` for ``t = 0..T``."""
        X = self.features(trace.observations)
        Rp = np.concatenate([[0.0], trace.rewards]) * self.hyper.reward_scale
        return X, Rp

    def causal_states(self, params: Params, X, Rp) -> np.ndarray:
        _, _, states = self.cell.unroll(params, self.cell.zero_state(1), X[None], Rp[None])
        return states[0]

    def build_batch(self, traces: list[EpisodeTrace], starts: list[int]):
        hp = self.hyper
        B, L = len(traces), hp.L_window
        S = self.cell.state_size
        batch = {
            "h0": np.zeros((B, S)),
            "X": np.zeros((B, L, OBS_DIM)),
            "Rp": np.zeros((B, L)),
            "A": np.zeros((B, L), dtype=int),
            "Y": np.zeros((B, L)),
            "mask": np.zeros((B, L)),
            "teacher": np.zeros((B, L, hp.d_h)) if self.uses_refinement else None,
        }
        cache = {}
        for b, (trace, s) in enumerate(zip(traces, starts)):
            key = id(trace)
            if key not in cache:
                X, Rp = self.sequence_inputs(trace)
                states = self.causal_states(self.params, X, Rp)
                tgt_h = self.cell.latent(self.causal_states(self.target, X, Rp))
                next_max = q_values(self.target, tgt_h[1:]).max(axis=1)
                rewards = trace.rewards * hp.reward_scale
                done = np.zeros(trace.length)
                if trace.terminated:
                    done[-1] = 1.0
                Y = rewards + hp.gamma_disc * (1.0 - done) * next_max
                refined = None
                if self.uses_refinement:
                    refined = refine_trajectory(self.params, self.cell.latent(states), X, Rp)
                cache[key] = (X, Rp, states, Y, refined)
            X, Rp, states, Y, refined = cache[key]
            e = min(s + L, trace.length)
            n = e - s
            if s > 0:
                batch["h0"][b] = states[s - 1]
            batch["X"][b, :n] = X[s:e]
            batch["Rp"][b, :n] = Rp[s:e]
            batch["A"][b, :n] = trace.actions[s:e]
            batch["Y"][b, :n] = Y[s:e]
            batch["mask"][b, :n] = 1.0
            if refined is not None:
                batch["teacher"][b, :n] = refined[s:e]
        return batch

    @property
    def uses_refinement(self) -> bool:
        return self.cell.smoothing and self.hyper.consistency_weight > 0.0

    def sample_batch(self, replay, rng):
        hp = self.hyper
        traces, starts = [], []
        for _ in range(hp.batch_windows):
            trace = replay[int(rng.integers(len(replay)))]
            traces.append(trace)
            starts.append(int(rng.integers(trace.length)))
        return self.build_batch(traces, starts)

    def update(self, batch) -> tuple[float, float, bool]:
        td, cons, grads = training_losses(self, self.params, batch)
        g = grads.flat
        norm = np.linalg.norm(g)
        if self.hyper.grad_clip > 0 and norm > self.hyper.grad_clip:
            g = g * (self.hyper.grad_clip / norm)
        new = meta_update(self.params, g, self.ring, self.kernel, self.hyper)
        if new is None:
            self.rejected_updates += 1
            log.warning("rejected non-finite update; keeping last good parameters")
            return td, cons, False
        self.params = new
        tau = self.hyper.target_sync
        self.target = self.target.with_flat((1.0 - tau) * self.target.flat + tau * self.params.flat)
        return td, cons, True


def training_losses(agent: ChDQNAgent, params: Params, batch, cell=None):
    """TD loss, consistency loss and the gradient of ``td + w * cons``.

    The TD target ``Y`` and refined latents ``teacher`` in ``batch`` are data:
    the teacher is a fixed target, so consistency gradient reaches the causal
    parameters only. Both losses are means over valid window steps.
    """
    cell = cell or agent.cell
    hp = agent.hyper
    tape, H, _ = cell.unroll(params, batch["h0"], batch["X"], batch["Rp"])
    mask = batch["mask"]
    n = max(mask.sum(), 1.0)
    Q = H @ params["Qw"].T + params["Qb"]
    A = batch["A"]
    q_taken = np.take_along_axis(Q, A[..., None], axis=-1)[..., 0]
    err = (q_taken - batch["Y"]) * mask
    td = float(np.sum(err**2) / n)

    grads = params.zeros_like()
    dQ = np.zeros_like(Q)
    np.put_along_axis(dQ, A[..., None], (2.0 * err / n)[..., None], axis=-1)
    B, L, d_h = H.shape
    dH = q_head_backward(params, H.reshape(B * L, d_h), dQ.reshape(B * L, -1), grads).reshape(B, L, d_h)

    cons = 0.0
    w = hp.consistency_weight
    if batch.get("teacher") is not None and w > 0.0:
        diff = (H - batch["teacher"]) * mask[..., None]
        cons = float(np.sum(diff**2) / n)
        dH = dH + w * 2.0 * diff / n
    cell_grads = cell.backward(params, tape, dH)
    grads.flat += cell_grads.flat
    return td, cons, grads


class AgentPolicy:
    """Adapter exposing an agent as an environment policy."""

    def __init__(self, agent: ChDQNAgent, epsilon: float = 0.0, rng=None):
        self.agent, self.epsilon, self.rng = agent, epsilon, rng
        self.state = None

    @property
    def name(self) -> str:
        return self.agent.hyper.cell

    def begin_episode(self):
        self.state = self.agent.cell.zero_state(1)

    def select(self, obs, r_prev):
        action, self.state = self.agent.act(self.state, obs.as_vector(), r_prev, self.epsilon, self.rng)
        return action, self.agent.cell.latent(self.state)[0].copy()


# ---------------------------------------------------------------- training loop


def epsilon_at(hyper: AgentHyper, episode: int, episodes: int) -> float:
    horizon = hyper.eps_decay_frac * episodes
    if horizon <= 0:
        return hyper.eps_end
    frac = min(episode / horizon, 1.0)
    return hyper.eps_start + frac * (hyper.eps_end - hyper.eps_start)


def training_env_seed(seed: int, episode: int) -> int:
    # Disjoint from evaluation seeds, which are small consecutive integers.
    return int(np.random.SeedSequence([seed, 7, episode]).generate_state(1, dtype=np.uint64)[0] >> 1)


class Trainer:
    """Resumable episodic training state."""

    def __init__(self, env_config: EnvConfig, hyper: AgentHyper, episodes: int, seed: int):
        self.env_config = env_config
        self.hyper = hyper
        self.episodes = episodes
        self.seed = seed
        ss = np.random.SeedSequence(seed)
        init_ss, explore_ss, sample_ss = ss.spawn(3)
        self.agent = ChDQNAgent(hyper, seed=init_ss)
        self.explore_rng = np.random.default_rng(explore_ss)
        self.sample_rng = np.random.default_rng(sample_ss)
        self.replay: deque = deque(maxlen=hyper.replay_episodes)
        self.episode = 0
        self.log: list[dict] = []

    def run(self, until: int | None = None) -> ChDQNAgent:
        env = QECEnv(self.env_config)
        stop = self.episodes if until is None else min(until, self.episodes)
        hp = self.hyper
        while self.episode < stop:
            ep = self.episode
            eps = epsilon_at(hp, ep, self.episodes)
            trace = run_episode(env, self.agent.policy(eps, self.explore_rng), training_env_seed(self.seed, ep))
            trace.latents = None  # recomputed with current parameters when sampled
            self.replay.append(trace)
            td_sum = cons_sum = 0.0
            for _ in range(hp.updates_per_episode):
                td, cons, _ = self.agent.update(self.agent.sample_batch(self.replay, self.sample_rng))
                td_sum += td
                cons_sum += cons
            k = max(hp.updates_per_episode, 1)
            self.log.append(
                {
                    "episode": ep,
                    "return": float(trace.rewards.sum()),
                    "td_loss": td_sum / k,
                    "cons_loss": cons_sum / k,
                    "mean_latent_norm": float(np.mean(trace.latent_norms)),
                    "epsilon": eps,
                    "length": trace.length,
                    "ctrl": trace.total_control_cost,
                }
            )
            self.episode += 1
        return self.agent

    def save_state(self, path) -> None:
        with open(path, "wb") as fh:
            pickle.dump(self, fh)

    @staticmethod
    def load_state(path) -> Trainer:
        with open(path, "rb") as fh:
            return pickle.load(fh)


def train(env_config: EnvConfig, hyper: AgentHyper, episodes: int, seed: int, log_path=None):
    """Train an agent; returns ``(agent, log_rows)``."""
    trainer = Trainer(env_config, hyper, episodes, seed)
    agent = trainer.run()
    if log_path is not None:
        write_training_log(log_path, trainer.log)
    return agent, trainer.log


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f"{v:.10g}" if isinstance(v, float) else v) for k, v in row.items()})


def hyper_to_dict(hyper: AgentHyper) -> dict:
    return asdict(hyper)
