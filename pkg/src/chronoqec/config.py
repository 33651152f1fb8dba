"""Run configuration: YAML file with env / agent / baseline / harness sections.

Unknown keys are rejected with their full dotted path. ``reference_config``
renders every default with a one-line explanation.
"""

from __future__ import annotations

import dataclasses
import os
import types
import typing
from dataclasses import dataclass, field

import yaml

from .agent import AgentHyper, baseline_hyper
from .env import ChannelConfig, ConfigError, EnvConfig, NoiseConfig, RegimeConfig

POLICIES = ("static", "chdqn", "gated")

# Named agent variants accepted by ``train --agent``.
AGENT_VARIANTS = {
    "chdqn": {},
    "chdqn-no-meta": {"eta_meta": 0.0},
    "chdqn-no-consistency": {"consistency_weight": 0.0},
    "chdqn-no-meta-no-consistency": {"eta_meta": 0.0, "consistency_weight": 0.0},
    "gated": None,  # built by baseline_hyper
}

OUTPUT_ENV = "CHRONOQEC_OUTPUT"


@dataclass
class BaselineConfig:
    d_h: int | None = None  # None -> matched to the Ch-DQN parameter count

    def validate(self, prefix="baseline"):
        if self.d_h is not None and self.d_h < 1:
            return [(f"{prefix}.d_h", "must be >= 1 or null")]
        return []


@dataclass
class HarnessConfig:
    distances: list = field(default_factory=lambda: [3, 5, 7])
    policies: list = field(default_factory=lambda: list(POLICIES))
    train_episodes: int = 300
    n_runs: int = 300
    base_seed: int = 0
    threads: int = 1
    bootstrap: bool = False
    keep_traces: bool = True

    def validate(self, prefix="harness"):
        errs = []
        for d in self.distances:
            if not isinstance(d, int) or d < 3 or d % 2 == 0:
                errs.append((f"{prefix}.distances", f"{d!r} is not an odd integer >= 3"))
        for p in self.policies:
            if p != "static" and p not in AGENT_VARIANTS:
                errs.append((f"{prefix}.policies", f"unknown policy {p!r}; choose from static, {', '.join(AGENT_VARIANTS)}"))
        if self.train_episodes < 0:
            errs.append((f"{prefix}.train_episodes", "must be >= 0"))
        if self.n_runs < 1:
            errs.append((f"{prefix}.n_runs", "must be >= 1"))
        if self.threads < 1:
            errs.append((f"{prefix}.threads", "must be >= 1"))
        return errs


@dataclass
class RunConfig:
    name: str = "paper-desk"
    output_dir: str | None = None  # None -> $CHRONOQEC_OUTPUT/<name>, default ./runs/<name>
    seed: int = 0
    variant: str = "chdqn"
    env: EnvConfig = field(default_factory=EnvConfig)
    agent: AgentHyper = field(default_factory=AgentHyper)
    baseline: BaselineConfig = field(default_factory=BaselineConfig)
    harness: HarnessConfig = field(default_factory=HarnessConfig)

    def validate(self):
        errs = []
        if self.variant not in AGENT_VARIANTS:
            errs.append(("variant", f"unknown agent variant {self.variant!r}; choose from {list(AGENT_VARIANTS)}"))
        if not self.name or "/" in self.name:
            errs.append(("name", "must be a non-empty name without '/'"))
        errs += self.env.validate("env")
        errs += self.agent.validate("agent")
        errs += self.baseline.validate("baseline")
        errs += self.harness.validate("harness")
        for d in self.harness.distances:
            if isinstance(d, int) and self.env.c_threshold * d**0.5 >= 0.5:
                errs.append(("env.c_threshold", f"c * sqrt({d}) must be < 0.5 or the threshold is unreachable"))
        return errs

    def check(self) -> RunConfig:
        errs = self.validate()
        if errs:
            raise ConfigError(errs)
        return self

    def env_for(self, distance: int) -> EnvConfig:
        return dataclasses.replace(self.env, distance=distance)

    def output_root(self) -> str:
        if self.output_dir:
            return self.output_dir
        return os.path.join(os.environ.get(OUTPUT_ENV, "runs"), self.name)

    def hyper_for(self, variant: str | None = None) -> AgentHyper:
        variant = self.variant if variant is None else variant
        if variant not in AGENT_VARIANTS:
            raise ConfigError([("agent", f"unknown agent variant {variant!r}; choose from {list(AGENT_VARIANTS)}")])
        if variant == "gated":
            h = baseline_hyper(self.agent)
            if self.baseline.d_h is not None:
                h = dataclasses.replace(h, d_h=self.baseline.d_h)
            return h
        return dataclasses.replace(self.agent, **AGENT_VARIANTS[variant])


def paper_desk(full: bool = False) -> RunConfig:
    cfg = RunConfig()
    if full:
        cfg.harness.n_runs = 500
    return cfg


# ---------------------------------------------------------------- dict <-> dataclass


def _hints(cls):
    return typing.get_type_hints(cls)


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(value, tp, path, errs):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = typing.get_args(tp)
        if value is None and type(None) in args:
            return None
        tp = next(a for a in args if a is not type(None))
    if tp is bool:
        if not isinstance(value, bool):
            errs.append((path, f"expected a boolean, got {value!r}"))
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            errs.append((path, f"expected an integer, got {value!r}"))
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errs.append((path, f"expected a number, got {value!r}"))
            return value
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            errs.append((path, f"expected a string, got {value!r}"))
        return value
    if tp is list or typing.get_origin(tp) is list:
        if not isinstance(value, list):
            errs.append((path, f"expected a list, got {value!r}"))
        return value
    return value


def _build(cls, data, path, errs):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        errs.append((path or "<root>", f"expected a mapping, got {type(data).__name__}"))
        return cls()
    hints = _hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in data:
        if key not in names:
            errs.append((f"{path}.{key}" if path else str(key), "unknown key"))
    kwargs = {}
    for name in names:
        if name not in data:
            continue
        sub = f"{path}.{name}" if path else name
        tp = hints[name]
        if _is_dataclass_type(tp):
            kwargs[name] = _build(tp, data[name], sub, errs)
        else:
            kwargs[name] = _coerce(data[name], tp, sub, errs)
    return cls(**kwargs)


def config_from_dict(data: dict) -> RunConfig:
    errs: list = []
    cfg = _build(RunConfig, data, "", errs)
    if errs:
        raise ConfigError(errs)
    return cfg.check()


def config_to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def parse_override(text: str) -> tuple[list[str], object]:
    if "=" not in text:
        raise ConfigError([(text, "override must look like section.key=value")])
    key, raw = text.split("=", 1)
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError([(key, f"cannot parse value {raw!r}: {exc}")]) from None
    return key.strip().split("."), value


def apply_overrides(data: dict, overrides) -> dict:
    for text in overrides or ():
        path, value = parse_override(text)
        node = data
        for part in path[:-1]:
            nxt = node.get(part)
            if not isinstance(nxt, dict):
                raise ConfigError([(".".join(path), "no such section")])
            node = nxt
        if path[-1] not in node:
            raise ConfigError([(".".join(path), "unknown key")])
        node[path[-1]] = value
    return data


def load_config(path=None, overrides=None, full: bool = False) -> RunConfig:
    """Defaults, then the file (if any), then ``--override`` entries."""
    data = config_to_dict(paper_desk(full))
    if path is not None:
        try:
            with open(path) as fh:
                loaded = yaml.safe_load(fh)
        except FileNotFoundError:
            raise ConfigError([(str(path), "config file not found")]) from None
        except yaml.YAMLError as exc:
            raise ConfigError([(str(path), f"invalid YAML: {exc}")]) from None
        errs: list = []
        _build(RunConfig, loaded, "", errs)  # reports unknown keys with full paths
        if errs:
            raise ConfigError(errs)
        _merge(data, loaded or {})
        if full:
            data["harness"]["n_runs"] = 500
    apply_overrides(data, overrides)
    return config_from_dict(data)


def _merge(base: dict, update: dict) -> None:
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=None)


def write_config(path, cfg: RunConfig) -> None:
    with open(path, "w") as fh:
        fh.write(dump_config(cfg))


# ---------------------------------------------------------------- documented reference

DOCS = {
    "name": "experiment name, used in output paths",
    "output_dir": "output directory; null -> $CHRONOQEC_OUTPUT/<name> (default ./runs/<name>)",
    "seed": "training seed; evaluation seeds come from harness.base_seed",
    "variant": "agent trained by 'train': " + ", ".join(AGENT_VARIANTS),
    "env": "environment (one per code distance; env.distance is set per run)",
    "env.distance": "odd code distance >= 3",
    "env.c_threshold": "failure threshold constant c in H_crit = c * sqrt(d); c * sqrt(d) must stay below 0.5",
    "env.lambda_action": "control-cost weight in r = -rho - lambda_a * a",
    "env.sigma_margin": "pi = 1 iff sigma > margin; null -> 1.5 x stationary mean of sigma",
    "env.max_cycles": "cycle cap; runs reaching it are censored",
    "env.obs_noise_std": "Gaussian noise added to the sigma feature only",
    "env.seed": "default reset seed",
    "env.theta0": "'stationary' (draw from the uncontrolled stationary law) or 'zero'",
    "env.encoded_state": "encoded logical state: plus, plus_i or zero",
    "env.noise": "coupling processes injected into the two noise-power components",
    "env.noise.drift_step_std": "random-walk increment std sigma_nu",
    "env.noise.longmem_beta": "long-memory decay exponent beta in (0, 1)",
    "env.noise.longmem_scale": "long-memory scale C (autocovariance C * tau^-beta)",
    "env.noise.drift_init": "initial drift value",
    "env.regime": "latent dynamics theta' = A theta + b a + eta",
    "env.regime.A": "state matrix; spectral radius must be < 1",
    "env.regime.b": "action column (bit-flip power, phase-flip power, persistence)",
    "env.regime.sigma_eta": "Gaussian innovation covariance",
    "env.regime.inject_mask": "components receiving the coupling increments",
    "env.channel": "softmax Pauli map and distance-dependent suppression",
    "env.channel.w": "softmax weights, rows I, X, Y, Z",
    "env.channel.logit_bias": "logit offsets at theta = 0 (identity-favoring)",
    "env.channel.suppression_threshold": "p_th in q = base * (p / p_th)^((d+1)/2)",
    "env.channel.base_prefactor": "base in the suppression law",
    "agent": "Ch-DQN hyperparameters",
    "agent.eta": "gradient step size",
    "agent.eta_meta": "fractional meta-update step; must be <= 0.1 * eta",
    "agent.gamma_frac": "fractional kernel exponent in (0, 1)",
    "agent.K_memory": "number of parameter increments in the fractional kernel",
    "agent.gamma_disc": "TD discount",
    "agent.eps_start": "initial exploration rate",
    "agent.eps_end": "final exploration rate",
    "agent.eps_decay_frac": "fraction of episodes over which epsilon decays linearly",
    "agent.L_window": "truncated-backprop window length",
    "agent.consistency_weight": "weight of the causal/refined latent consistency loss",
    "agent.target_sync": "soft target-network update coefficient per training step",
    "agent.d_h": "latent size",
    "agent.cell": "'tanh' (Ch-DQN) or 'gated' (baseline)",
    "agent.batch_windows": "windows per training step",
    "agent.updates_per_episode": "training steps after each episode",
    "agent.replay_episodes": "replay capacity in complete episodes",
    "agent.grad_clip": "global gradient-norm clip (0 disables)",
    "agent.obs_scale": "per-feature input scaling for (rho, sigma, pi, H)",
    "agent.reward_scale": "reward scaling for TD targets and the reward input",
    "baseline": "gated recurrent baseline (same training loop, extras off)",
    "baseline.d_h": "latent size; null -> parameter count matched to Ch-DQN",
    "harness": "evaluation protocol",
    "harness.distances": "code distances to run",
    "harness.policies": "policies to evaluate (learned ones are trained first): static or any agent variant",
    "harness.train_episodes": "training episodes per learned policy",
    "harness.n_runs": "evaluation runs per (policy, distance); --full sets 500",
    "harness.base_seed": "run i uses environment seed base_seed + i",
    "harness.threads": "evaluation worker threads",
    "harness.bootstrap": "percentile bootstrap CI instead of the normal approximation",
    "harness.keep_traces": "write the JSONL trace archive",
}


def _scalar(v) -> str:
    return yaml.safe_dump(v, default_flow_style=True).strip().removesuffix("...").strip()


def reference_config(cfg: RunConfig | None = None) -> str:
    """YAML text of ``cfg`` (defaults when omitted) with a comment per key."""
    data = config_to_dict(cfg or paper_desk())
    lines = ["# chronoqec run configuration (paper-desk preset)"]

    def emit(node, path, indent):
        for key, value in node.items():
            full = f"{path}.{key}" if path else key
            doc = DOCS.get(full, "")
            pad = "  " * indent
            if isinstance(value, dict):
                if doc:
                    lines.append(f"{pad}# {doc}")
                lines.append(f"{pad}{key}:")
                emit(value, full, indent + 1)
            else:
                lines.append(f"{pad}{key}: {_scalar(value)}" + (f"  # {doc}" if doc else ""))

    emit(data, "", 0)
    return "\n".join(lines) + "\n"


__all__ = [
    "AGENT_VARIANTS",
    "BaselineConfig",
    "ChannelConfig",
    "ConfigError",
    "HarnessConfig",
    "NoiseConfig",
    "RegimeConfig",
    "RunConfig",
    "apply_overrides",
    "config_from_dict",
    "dump_config",
    "load_config",
    "paper_desk",
    "reference_config",
    "write_config",
]
