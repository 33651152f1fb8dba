"""Partially observed quantum-memory environment with first-passage failure."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Protocol

import numpy as np

from .channel import (
    ChannelMap,
    LogicalState,
    apply_channel,
    hazard_threshold,
    logical_suppression,
    pauli_from_regime,
)
from .noise import MAX_EXACT_HORIZON, CouplingProcess, lag0_variance, make_coupling
from .regime import PHASE_POWER, BIT_POWER, RegimeDynamics, regime_step, validate_dynamics

ACTIONS = (0, 1, 2)
TRACE_SCHEMA = "chronoqec.trace/1"

ENCODED_STATES = {
    "plus": (1.0, 0.0, 0.0),
    "plus_i": (0.0, 1.0, 0.0),
    "zero": (0.0, 0.0, 1.0),
}


class ConfigError(ValueError):
    """Invalid configuration; ``errors`` lists ``(path, message)`` pairs."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.errors))


@dataclass
class NoiseConfig:
    drift_step_std: float = 0.0025  # sigma_nu of the coupling random walk
    longmem_beta: float = 0.5
    longmem_scale: float = 0.00005  # C in C * tau^-beta
    drift_init: float = 0.0

    def validate(self, prefix="noise"):
        errs = []
        if not (np.isfinite(self.drift_step_std) and self.drift_step_std >= 0):
            errs.append((f"{prefix}.drift_step_std", "must be finite and >= 0"))
        if not 0.0 < self.longmem_beta < 1.0:
            errs.append((f"{prefix}.longmem_beta", "must lie in (0, 1)"))
        if self.longmem_scale < 0:
            errs.append((f"{prefix}.longmem_scale", "must be >= 0"))
        return errs


@dataclass
class RegimeConfig:
    A: list = field(default_factory=lambda: [[0.995, 0.0, 0.0], [0.0, 0.995, 0.0], [0.0, 0.0, 0.999]])
    b: list = field(default_factory=lambda: [-0.02, -0.02, 0.01])
    sigma_eta: list = field(default_factory=lambda: [[2.5e-6, 0.0, 0.0], [0.0, 2.5e-6, 0.0], [0.0, 0.0, 2.5e-6]])
    inject_mask: list = field(default_factory=lambda: [1.0, 1.0, 0.0])

    def build(self) -> RegimeDynamics:
        return RegimeDynamics(np.array(self.A), np.array(self.b), np.array(self.sigma_eta), np.array(self.inject_mask))

    def validate(self, prefix="regime"):
        try:
            dyn = self.build()
        except (ValueError, TypeError) as exc:
            return [(prefix, str(exc))]
        report = validate_dynamics(dyn)
        return [(prefix, v) for v in report.violations]


@dataclass
class ChannelConfig:
    # Rows I, X, Y, Z; columns (bit-flip power, phase-flip power, persistence).
    w: list = field(
        default_factory=lambda: [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 1.4],
            [0.5, 0.5, 1.4],
            [0.0, 1.0, 1.4],
        ]
    )
    logit_bias: list = field(default_factory=lambda: [0.0, -2.2, -3.0, -2.2])
    suppression_threshold: float = 0.1
    base_prefactor: float = 0.006

    def build(self, distance: int) -> ChannelMap:
        return ChannelMap(
            np.array(self.w),
            distance,
            self.suppression_threshold,
            self.base_prefactor,
            np.array(self.logit_bias),
        )

    def validate(self, prefix="channel"):
        try:
            self.build(3)
        except (ValueError, TypeError) as exc:
            return [(prefix, str(exc))]
        return []


@dataclass
class EnvConfig:
    distance: int = 3
    c_threshold: float = 0.08
    lambda_action: float = 0.0001
    sigma_margin: float | None = None  # None -> 1.5x stationary mean of sigma
    max_cycles: int = 400
    obs_noise_std: float = 0.02
    seed: int = 0
    theta0: str = "stationary"  # or "zero"
    encoded_state: str = "plus"
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)

    def validate(self, prefix="env"):
        errs = []
        if self.distance < 3 or self.distance % 2 == 0:
            errs.append((f"{prefix}.distance", "must be odd and >= 3"))
        if not self.c_threshold > 0:
            errs.append((f"{prefix}.c_threshold", "must be > 0"))
        elif self.c_threshold * np.sqrt(max(self.distance, 1)) >= 0.5:
            # Infidelity of the encoded state never exceeds 1/2.
            errs.append((f"{prefix}.c_threshold", "c * sqrt(d) must be < 0.5 or the threshold is unreachable"))
        if self.lambda_action < 0:
            errs.append((f"{prefix}.lambda_action", "must be >= 0"))
        if self.max_cycles < 1:
            errs.append((f"{prefix}.max_cycles", "must be >= 1"))
        elif self.noise.longmem_scale > 0 and self.max_cycles >= MAX_EXACT_HORIZON:
            errs.append((f"{prefix}.max_cycles", f"long-memory synthesis needs max_cycles < {MAX_EXACT_HORIZON}"))
        if self.obs_noise_std < 0:
            errs.append((f"{prefix}.obs_noise_std", "must be >= 0"))
        if self.sigma_margin is not None and self.sigma_margin < 0:
            errs.append((f"{prefix}.sigma_margin", "must be >= 0 or null"))
        if self.theta0 not in ("stationary", "zero"):
            errs.append((f"{prefix}.theta0", "must be 'stationary' or 'zero'"))
        if self.encoded_state not in ENCODED_STATES:
            errs.append((f"{prefix}.encoded_state", f"must be one of {sorted(ENCODED_STATES)}"))
        errs += self.noise.validate(f"{prefix}.noise")
        errs += self.regime.validate(f"{prefix}.regime")
        errs += self.channel.validate(f"{prefix}.channel")
        return errs


@dataclass(frozen=True)
class Observation:
    rho: float
    sigma: float
    pi: int
    hazard: float

    def as_vector(self) -> np.ndarray:
        return np.array([self.rho, self.sigma, float(self.pi), self.hazard])


@dataclass
class StepResult:
    observation: Observation
    reward: float
    terminated: bool
    truncated: bool
    info: dict


def observe(theta: np.ndarray, rho: float, hazard: float, sigma_margin: float, obs_noise: float) -> Observation:
    """Build the controller-visible features from internal state.

    ``obs_noise`` is the already-drawn noise sample added to the proxy.
    """
    sigma = float(np.hypot(theta[BIT_POWER], theta[PHASE_POWER])) + obs_noise
    return Observation(float(rho), sigma, int(sigma > sigma_margin), float(hazard))


def null_noise_config(**overrides) -> EnvConfig:
    """Configuration with every noise source off and no logical errors."""
    cfg = EnvConfig(
        obs_noise_std=0.0,
        theta0="zero",
        sigma_margin=1.0,
        noise=NoiseConfig(drift_step_std=0.0, longmem_scale=0.0),
        regime=RegimeConfig(sigma_eta=[[0.0] * 3 for _ in range(3)]),
        channel=ChannelConfig(base_prefactor=0.0),
    )
    for k, v in overrides.items():
        setattr(cfg, k, v)
    return cfg


class QECEnv:
    """Episode loop: latent regime -> Pauli channel -> logical state.

    Per cycle: regime step with the action, physical Pauli distribution,
    logical suppression, channel application, observation, reward
    ``-rho - lambda_a * a`` and the first-passage check ``H >= c sqrt(d)``.
    """

    def __init__(self, config: EnvConfig):
        errs = config.validate()
        if errs:
            raise ConfigError(errs)
        self.config = config
        self.dynamics = config.regime.build()
        self.channel = config.channel.build(config.distance)
        self.h_crit = hazard_threshold(config.distance, config.c_threshold)
        self.stationary_cov = self.dynamics.stationary_covariance(self._injected_noise_cov())
        if config.sigma_margin is None:
            self.sigma_margin = 1.5 * self._stationary_sigma_mean()
        else:
            self.sigma_margin = float(config.sigma_margin)
        self.done = True
        self.t = 0

    def _injected_noise_cov(self) -> np.ndarray:
        n = self.config.noise
        var = n.drift_step_std**2
        if n.longmem_scale > 0:
            var += 2.0 * (lag0_variance(n.longmem_beta, n.longmem_scale) - n.longmem_scale)
        return np.diag(self.dynamics.inject_mask * var)

    def _stationary_sigma_mean(self) -> float:
        cov = self.stationary_cov[:2, :2]
        if not np.any(cov):
            return 0.0
        # Fixed-seed quadrature of E||theta_power|| under the stationary law.
        z = np.random.default_rng(12345).standard_normal((20000, 2))
        L = np.linalg.cholesky(cov + 1e-15 * np.eye(2))
        return float(np.mean(np.linalg.norm(z @ L.T, axis=1)))

    def reset(self, seed: int | None = None) -> Observation:
        cfg = self.config
        seed = cfg.seed if seed is None else seed
        ss = np.random.SeedSequence(seed)
        theta_ss, eta_ss, obs_ss, bit_ss, phase_ss = ss.spawn(5)
        self.rng_eta = np.random.default_rng(eta_ss)
        self.rng_obs = np.random.default_rng(obs_ss)
        horizon = cfg.max_cycles + 1
        n = cfg.noise
        self.couplings: list[CouplingProcess] = [
            make_coupling(n.drift_init, n.drift_step_std, horizon, n.longmem_beta, n.longmem_scale, s)
            for s in (bit_ss, phase_ss)
        ]
        self._last_coupling = np.array([c.sample() for c in self.couplings])

        m = self.dynamics.m
        if cfg.theta0 == "stationary" and np.any(self.stationary_cov):
            L = np.linalg.cholesky(self.stationary_cov + 1e-15 * np.eye(m))
            self.theta = L @ np.random.default_rng(theta_ss).standard_normal(m)
        else:
            self.theta = np.zeros(m)
        self.logical = LogicalState.encoded(ENCODED_STATES[cfg.encoded_state])
        self.t = 0
        self.done = False
        self.last_obs = observe(self.theta, 0.0, self.logical.hazard, self.sigma_margin, self._obs_noise())
        return self.last_obs

    def _obs_noise(self) -> float:
        std = self.config.obs_noise_std
        return float(std * self.rng_obs.standard_normal()) if std > 0 else 0.0

    def _injected(self) -> np.ndarray:
        current = np.array([c.sample() for c in self.couplings])
        inc = current - self._last_coupling
        self._last_coupling = current
        out = np.zeros(self.dynamics.m)
        out[BIT_POWER], out[PHASE_POWER] = inc
        return out

    def step(self, action: int) -> StepResult:
        if self.done:
            raise RuntimeError("step() called on a finished episode; call reset() first")
        if action not in ACTIONS:
            raise ValueError(f"action must be one of {ACTIONS}, got {action!r}")
        cfg = self.config
        eta_rng = self.rng_eta if np.any(self.dynamics.sigma_eta) else None
        self.theta = regime_step(self.dynamics, self.theta, action, eta_rng, self._injected())
        physical = pauli_from_regime(self.channel, self.theta)
        logical = logical_suppression(self.channel, physical)
        self.logical, rho = apply_channel(self.logical, logical)
        self.t += 1
        obs = observe(self.theta, rho, self.logical.hazard, self.sigma_margin, self._obs_noise())
        reward = -rho - cfg.lambda_action * action
        terminated = self.logical.hazard >= self.h_crit
        truncated = self.t >= cfg.max_cycles
        self.done = terminated or truncated
        self.last_obs = obs
        info = {
            "theta": self.theta.copy(),
            "physical": physical,
            "logical": logical,
            "fidelity": self.logical.fidelity,
            "t": self.t,
        }
        return StepResult(obs, float(reward), bool(terminated), bool(truncated), info)


class Policy(Protocol):
    def begin_episode(self) -> None: ...

    def select(self, obs: Observation, r_prev: float) -> tuple[int, np.ndarray | None]: ...


@dataclass
class EpisodeTrace:
    """Per-cycle record of one episode.

    ``observations`` has ``T + 1`` rows: the reset observation followed by the
    observation emitted by each of the ``T`` steps. ``latents[t]`` is the
    controller latent used to choose ``actions[t]``.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    hazards: np.ndarray
    fidelities: np.ndarray
    terminated: bool
    max_cycles: int
    h_crit: float
    latents: np.ndarray | None = None
    seed: int | None = None
    latent_norms: np.ndarray | None = None

    def __post_init__(self):
        if self.latent_norms is None and self.latents is not None:
            self.latent_norms = np.linalg.norm(self.latents, axis=1)

    @property
    def length(self) -> int:
        return len(self.actions)

    @property
    def failure_time(self) -> int | None:
        return self.length if self.terminated else None

    @property
    def censored(self) -> bool:
        return not self.terminated

    @property
    def total_control_cost(self) -> float:
        return float(np.sum(np.abs(self.actions)))

    def to_jsonl(self) -> str:
        header = {
            "type": "episode",
            "schema": TRACE_SCHEMA,
            "seed": self.seed,
            "length": self.length,
            "failure_time": self.failure_time,
            "censored": self.censored,
            "max_cycles": self.max_cycles,
            "h_crit": self.h_crit,
            "total_control_cost": self.total_control_cost,
            "initial_observation": self.observations[0].tolist(),
        }
        lines = [json.dumps(header)]
        norms = self.latent_norms
        for t in range(self.length):
            rec = {
                "type": "cycle",
                "t": t,
                "observation": self.observations[t].tolist(),
                "action": int(self.actions[t]),
                "reward": float(self.rewards[t]),
                "hazard": float(self.hazards[t]),
                "fidelity": float(self.fidelities[t]),
                "next_observation": self.observations[t + 1].tolist(),
            }
            if norms is not None:
                rec["latent_norm"] = float(norms[t])
            lines.append(json.dumps(rec))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> EpisodeTrace:
        records = [json.loads(line) for line in text.splitlines() if line.strip()]
        header, cycles = records[0], records[1:]
        if header.get("schema") != TRACE_SCHEMA:
            raise ValueError(f"unsupported trace schema {header.get('schema')!r}")
        obs = [header["initial_observation"]] + [c["next_observation"] for c in cycles]
        norms = [c["latent_norm"] for c in cycles] if cycles and "latent_norm" in cycles[0] else None
        trace = cls(
            observations=np.array(obs, dtype=float).reshape(-1, 4),
            actions=np.array([c["action"] for c in cycles], dtype=int),
            rewards=np.array([c["reward"] for c in cycles], dtype=float),
            hazards=np.array([c["hazard"] for c in cycles], dtype=float),
            fidelities=np.array([c["fidelity"] for c in cycles], dtype=float),
            terminated=not header["censored"],
            max_cycles=header["max_cycles"],
            h_crit=header["h_crit"],
            seed=header["seed"],
            latent_norms=None if norms is None else np.array(norms, dtype=float),
        )
        return trace


def run_episode(env: QECEnv, policy: Policy, seed: int, keep_info: bool = False):
    """Roll out one episode; returns the trace (and step infos if requested)."""
    obs = env.reset(seed)
    policy.begin_episode()
    observations = [obs.as_vector()]
    actions, rewards, hazards, fidelities, latents, infos = [], [], [], [], [], []
    r_prev = 0.0
    terminated = False
    while True:
        action, latent = policy.select(obs, r_prev)
        res = env.step(action)
        actions.append(action)
        rewards.append(res.reward)
        hazards.append(res.observation.hazard)
        fidelities.append(res.info["fidelity"])
        if latent is not None:
            latents.append(latent)
        if keep_info:
            infos.append(res.info)
        observations.append(res.observation.as_vector())
        obs, r_prev = res.observation, res.reward
        if res.terminated or res.truncated:
            terminated = res.terminated
            break
    trace = EpisodeTrace(
        observations=np.array(observations),
        actions=np.array(actions, dtype=int),
        rewards=np.array(rewards),
        hazards=np.array(hazards),
        fidelities=np.array(fidelities),
        terminated=terminated,
        max_cycles=env.config.max_cycles,
        h_crit=env.h_crit,
        latents=np.array(latents) if latents else None,
        seed=seed,
    )
    return (trace, infos) if keep_info else trace


def first_crossing(hazards: np.ndarray, h_crit: float) -> int | None:
    """1-based index of the first cycle with ``hazard >= h_crit``."""
    hits = np.nonzero(np.asarray(hazards) >= h_crit)[0]
    return int(hits[0]) + 1 if hits.size else None


def config_to_dict(cfg) -> dict:
    return asdict(cfg)
