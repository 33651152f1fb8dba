"""Monte Carlo evaluation: survival metrics, curves, efficiency and ablations.

Run ``i`` of an evaluation uses environment seed ``base_seed + i``. Censored
runs (no threshold crossing within ``max_cycles``) enter TTT at
``max_cycles`` and are counted in ``censored_count``.
"""

from __future__ import annotations

import copy
import csv
import io
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

from .agent import AgentHyper, train
from .baselines import StaticPolicy
from .env import EnvConfig, EpisodeTrace, QECEnv, run_episode

METRICS_SCHEMA = "chronoqec.metrics/1"
SURVIVAL_SCHEMA = "chronoqec.survival/1"
HAZARD_SCHEMA = "chronoqec.hazard/1"
EFFICIENCY_SCHEMA = "chronoqec.efficiency/1"
ABLATION_SCHEMA = "chronoqec.ablation/1"

METRICS_COLUMNS = (
    "policy", "distance", "n_runs", "ttt_mean", "ttt_std", "ttt_ci_low", "ttt_ci_high",
    "hz_mean", "hz_std", "ctrl_mean", "lat_norm_mean", "censored_count", "ci_method",
)

# Reference survival table, used only for the efficiency cross-check:
# distance -> policy -> (TTT, CTRL), plus the quoted efficiency values.
REFERENCE_TTT_CTRL = {
    3: {"static": (34.8, 0.0), "gated": (42.1, 96.2), "chdqn": (49.4, 88.3)},
    5: {"static": (43.9, 0.0), "gated": (75.5, 122.8), "chdqn": (83.1, 155.6)},
    7: {"static": (55.7, 0.0), "gated": (60.2, 134.1), "chdqn": (76.6, 118.7)},
}
REFERENCE_EFFICIENCY = {
    3: {"gated": 0.30, "chdqn": 0.27},
    5: {"gated": 0.00, "chdqn": 0.28},
    7: {"gated": 0.27, "chdqn": 0.28},
}


@dataclass(frozen=True)
class MetricsRecord:
    policy: str
    distance: int
    n_runs: int
    ttt_mean: float
    ttt_std: float
    ttt_ci95: tuple[float, float]
    hz_mean: float
    hz_std: float
    ctrl_mean: float
    lat_norm_mean: float | None
    censored_count: int
    ci_method: str = "normal"


@dataclass(frozen=True)
class SurvivalCurve:
    times: np.ndarray
    survival: np.ndarray
    n_runs: int


@dataclass(frozen=True)
class HazardTrajectory:
    times: np.ndarray
    mean_hazard: np.ndarray
    n_alive: np.ndarray


class EvalResult(NamedTuple):
    record: MetricsRecord
    survival: SurvivalCurve
    hazard: HazardTrajectory
    traces: list


class MissingReferenceError(ValueError):
    pass


# ---------------------------------------------------------------- per-run quantities


def run_ttt(trace: EpisodeTrace) -> int:
    return trace.failure_time if trace.terminated else trace.max_cycles


def run_hz(trace: EpisodeTrace) -> float:
    """Average hazard slope ``H_T / T`` of one run."""
    return float(trace.hazards[-1]) / run_ttt(trace)


def run_lat_norm(trace: EpisodeTrace) -> float | None:
    if trace.latent_norms is None:
        return None
    return float(np.mean(trace.latent_norms))


# ---------------------------------------------------------------- estimators


def normal_ci(values: np.ndarray) -> tuple[float, float]:
    values = np.asarray(values, dtype=float)
    half = 1.96 * values.std(ddof=1) / np.sqrt(values.size) if values.size > 1 else 0.0
    m = float(values.mean())
    return m - half, m + half


def bootstrap_ci(values: np.ndarray, n_boot: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(values.size, size=(n_boot, values.size))
    means = values[idx].mean(axis=1)
    lo, hi = np.percentile(means, [2.5, 97.5])
    m = float(values.mean())
    return min(float(lo), m), max(float(hi), m)


def survival_curve(traces: list[EpisodeTrace], max_cycles: int) -> SurvivalCurve:
    """``S(t) = fraction of runs with T_fail > t`` on ``t = 0..max_cycles``.

    Censored runs never fail inside the grid and so count as surviving.
    """
    times = np.arange(max_cycles + 1)
    fail = np.array([tr.failure_time if tr.terminated else np.inf for tr in traces], dtype=float)
    survival = (fail[None, :] > times[:, None]).mean(axis=1) if len(traces) else np.ones(times.size)
    return SurvivalCurve(times, survival, len(traces))


def hazard_trajectory(traces: list[EpisodeTrace]) -> HazardTrajectory:
    """Mean hazard at each cycle over the runs still alive at that cycle.

    A run is alive at cycle ``t`` when it emitted a ``t``-th observation, so
    the failing cycle itself is included. ``t = 0`` is the reset state.
    """
    horizon = max((tr.length for tr in traces), default=0)
    total = np.zeros(horizon + 1)
    alive = np.zeros(horizon + 1, dtype=int)
    alive[0] = len(traces)
    for tr in traces:
        total[1 : tr.length + 1] += tr.hazards
        alive[1 : tr.length + 1] += 1
    mean = np.divide(total, alive, out=np.zeros_like(total), where=alive > 0)
    return HazardTrajectory(np.arange(horizon + 1), mean, alive)


def metrics_from_traces(
    policy: str, distance: int, traces: list[EpisodeTrace], bootstrap: bool = False
) -> MetricsRecord:
    ttt = np.array([run_ttt(t) for t in traces], dtype=float)
    hz = np.array([run_hz(t) for t in traces])
    ctrl = np.array([t.total_control_cost for t in traces])
    lat = [run_lat_norm(t) for t in traces]
    lat_mean = float(np.mean(lat)) if lat and all(v is not None for v in lat) else None
    ci = bootstrap_ci(ttt) if bootstrap else normal_ci(ttt)
    return MetricsRecord(
        policy=policy,
        distance=distance,
        n_runs=len(traces),
        ttt_mean=float(ttt.mean()),
        ttt_std=float(ttt.std(ddof=1)) if ttt.size > 1 else 0.0,
        ttt_ci95=ci,
        hz_mean=float(hz.mean()),
        hz_std=float(hz.std(ddof=1)) if hz.size > 1 else 0.0,
        ctrl_mean=float(ctrl.mean()),
        lat_norm_mean=lat_mean,
        censored_count=int(sum(t.censored for t in traces)),
        ci_method="bootstrap" if bootstrap else "normal",
    )


# ---------------------------------------------------------------- evaluation


def _run_chunk(policy, env_config: EnvConfig, seeds: list[int]) -> list[EpisodeTrace]:
    env = QECEnv(env_config)
    return [run_episode(env, policy, s) for s in seeds]


def evaluate(
    policy,
    env_config: EnvConfig,
    n_runs: int,
    base_seed: int = 0,
    policy_id: str | None = None,
    threads: int = 1,
    bootstrap: bool = False,
) -> EvalResult:
    """Run ``n_runs`` greedy episodes and summarize them.

    With ``threads > 1`` each worker gets its own deep copy of the policy and
    its own environment; results are merged in run order, so the output does
    not depend on the thread count.
    """
    seeds = [base_seed + i for i in range(n_runs)]
    if threads > 1 and n_runs > 1:
        chunks = [seeds[i::threads] for i in range(threads)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(lambda c: _run_chunk(copy.deepcopy(policy), env_config, c), chunks))
        by_seed = {tr.seed: tr for part in parts for tr in part}
        traces = [by_seed[s] for s in seeds]
    else:
        traces = _run_chunk(policy, env_config, seeds)
    name = policy_id or getattr(policy, "name", type(policy).__name__)
    record = metrics_from_traces(name, env_config.distance, traces, bootstrap)
    return EvalResult(record, survival_curve(traces, env_config.max_cycles), hazard_trajectory(traces), traces)


def efficiency(ttt_policy: float, ttt_static: float, ctrl_policy: float) -> float | None:
    """``(TTT_policy - TTT_static) / CTRL_policy``; ``None`` when CTRL is zero."""
    if ctrl_policy == 0:
        return None
    return (ttt_policy - ttt_static) / ctrl_policy


def efficiency_table(records: list[MetricsRecord], static_id: str = "static") -> list[dict]:
    static = {r.distance: r for r in records if r.policy == static_id}
    rows = []
    for r in records:
        if r.policy == static_id:
            continue
        if r.distance not in static:
            raise MissingReferenceError(f"no '{static_id}' record for distance {r.distance}")
        s = static[r.distance]
        rows.append(
            {
                "policy": r.policy,
                "distance": r.distance,
                "ttt_policy": r.ttt_mean,
                "ttt_static": s.ttt_mean,
                "ctrl_policy": r.ctrl_mean,
                "eff": efficiency(r.ttt_mean, s.ttt_mean, r.ctrl_mean),
            }
        )
    return rows


def reference_efficiency_check() -> list[dict]:
    """Recompute efficiency from the reference survival table and compare with
    the quoted values. Several quoted entries do not follow from their inputs;
    both numbers are reported and nothing is reconciled."""
    rows = []
    for d, table in REFERENCE_TTT_CTRL.items():
        ttt_s, _ = table["static"]
        for policy in ("gated", "chdqn"):
            ttt, ctrl = table[policy]
            rows.append(
                {
                    "distance": d,
                    "policy": policy,
                    "ttt_policy": ttt,
                    "ttt_static": ttt_s,
                    "ctrl_policy": ctrl,
                    "recomputed": efficiency(ttt, ttt_s, ctrl),
                    "quoted": REFERENCE_EFFICIENCY[d][policy],
                }
            )
    return rows


# ---------------------------------------------------------------- ablation

ABLATION_VARIANTS = {
    "full": {},
    "no_meta": {"eta_meta": 0.0},
    "no_consistency": {"consistency_weight": 0.0},
    "no_meta_no_consistency": {"eta_meta": 0.0, "consistency_weight": 0.0},
}


@dataclass
class AblationEntry:
    variant: str
    record: MetricsRecord
    train_seconds: float
    final_td_loss: float
    final_cons_loss: float
    paired_delta: float  # mean per-seed TTT difference vs the full model
    paired_ci95: tuple[float, float]
    gap_reduction: float | None  # share of the full model's gap over static that is lost


def ablation_suite(
    env_config: EnvConfig,
    hyper: AgentHyper,
    episodes: int,
    train_seed: int,
    n_runs: int,
    base_seed: int = 0,
    variants: dict | None = None,
    static: EvalResult | None = None,
    threads: int = 1,
    log_window: int = 10,
) -> list[AblationEntry]:
    """Train each variant from the same seed and evaluate on identical seeds.

    Deltas are paired per evaluation seed. ``gap_reduction`` needs a static
    reference evaluated on the same seeds; it is computed when one is given
    or evaluated here otherwise.
    """
    variants = ABLATION_VARIANTS if variants is None else variants
    if static is None:
        static = evaluate(StaticPolicy(), env_config, n_runs, base_seed, "static", threads)
    static_ttt = np.array([run_ttt(t) for t in static.traces], dtype=float)
    results = {}
    for name, changes in variants.items():
        h = replace(hyper, **changes)
        t0 = time.perf_counter()
        agent, log = train(env_config, h, episodes, train_seed)
        elapsed = time.perf_counter() - t0
        res = evaluate(agent.policy(0.0), env_config, n_runs, base_seed, name, threads)
        tail = log[-log_window:] if log else []
        results[name] = (res, elapsed, tail)

    ref_name = next(iter(variants))
    ref_ttt = np.array([run_ttt(t) for t in results[ref_name][0].traces], dtype=float)
    ref_gap = ref_ttt.mean() - static_ttt.mean()
    out = []
    for name, (res, elapsed, tail) in results.items():
        ttt = np.array([run_ttt(t) for t in res.traces], dtype=float)
        diff = ttt - ref_ttt
        gap = ttt.mean() - static_ttt.mean()
        out.append(
            AblationEntry(
                variant=name,
                record=res.record,
                train_seconds=elapsed,
                final_td_loss=float(np.mean([r["td_loss"] for r in tail])) if tail else float("nan"),
                final_cons_loss=float(np.mean([r["cons_loss"] for r in tail])) if tail else float("nan"),
                paired_delta=float(diff.mean()),
                paired_ci95=normal_ci(diff),
                gap_reduction=float((ref_gap - gap) / ref_gap) if ref_gap > 0 else None,
            )
        )
    return out


# ---------------------------------------------------------------- CSV output


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.10g}"
    return str(v)


def _write_csv(path, schema: str, columns, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# {schema}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row[c]) for c in columns])
    with open(path, "w", newline="") as fh:
        fh.write(buf.getvalue())


def read_csv(path) -> list[dict]:
    """Read a harness CSV, skipping the leading schema comment."""
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    return list(csv.DictReader(lines))


def record_row(r: MetricsRecord) -> dict:
    return {
        "policy": r.policy,
        "distance": r.distance,
        "n_runs": r.n_runs,
        "ttt_mean": r.ttt_mean,
        "ttt_std": r.ttt_std,
        "ttt_ci_low": r.ttt_ci95[0],
        "ttt_ci_high": r.ttt_ci95[1],
        "hz_mean": r.hz_mean,
        "hz_std": r.hz_std,
        "ctrl_mean": r.ctrl_mean,
        "lat_norm_mean": r.lat_norm_mean,
        "censored_count": r.censored_count,
        "ci_method": r.ci_method,
    }


def write_metrics(path, records: list[MetricsRecord]) -> None:
    _write_csv(path, METRICS_SCHEMA, METRICS_COLUMNS, [record_row(r) for r in records])


def write_survival(path, curves: list[tuple[str, int, SurvivalCurve]]) -> None:
    rows = [
        {"policy": p, "d": d, "t": int(t), "S": float(s)}
        for p, d, c in curves
        for t, s in zip(c.times, c.survival)
    ]
    _write_csv(path, SURVIVAL_SCHEMA, ("policy", "d", "t", "S"), rows)


def write_hazard(path, trajectories: list[tuple[str, int, HazardTrajectory]]) -> None:
    rows = [
        {"policy": p, "d": d, "t": int(t), "mean_hazard": float(h), "n_alive": int(n)}
        for p, d, tr in trajectories
        for t, h, n in zip(tr.times, tr.mean_hazard, tr.n_alive)
    ]
    _write_csv(path, HAZARD_SCHEMA, ("policy", "d", "t", "mean_hazard", "n_alive"), rows)


def write_efficiency(path, rows: list[dict]) -> None:
    cols = ("policy", "distance", "ttt_policy", "ttt_static", "ctrl_policy", "eff")
    _write_csv(path, EFFICIENCY_SCHEMA, cols, rows)


def write_reference_check(path) -> None:
    cols = ("distance", "policy", "ttt_policy", "ttt_static", "ctrl_policy", "recomputed", "quoted")
    _write_csv(path, EFFICIENCY_SCHEMA, cols, reference_efficiency_check())


def write_ablation(path, entries: list[AblationEntry]) -> None:
    cols = (
        "variant", "distance", "n_runs", "ttt_mean", "ttt_ci_low", "ttt_ci_high", "hz_mean", "ctrl_mean",
        "paired_delta", "paired_ci_low", "paired_ci_high", "gap_reduction",
        "train_seconds", "final_td_loss", "final_cons_loss",
    )
    rows = []
    for e in entries:
        r = e.record
        rows.append(
            {
                "variant": e.variant,
                "distance": r.distance,
                "n_runs": r.n_runs,
                "ttt_mean": r.ttt_mean,
                "ttt_ci_low": r.ttt_ci95[0],
                "ttt_ci_high": r.ttt_ci95[1],
                "hz_mean": r.hz_mean,
                "ctrl_mean": r.ctrl_mean,
                "paired_delta": e.paired_delta,
                "paired_ci_low": e.paired_ci95[0],
                "paired_ci_high": e.paired_ci95[1],
                "gap_reduction": e.gap_reduction,
                "train_seconds": round(e.train_seconds, 3),
                "final_td_loss": e.final_td_loss,
                "final_cons_loss": e.final_cons_loss,
            }
        )
    _write_csv(path, ABLATION_SCHEMA, cols, rows)


def write_traces(path, traces: list[EpisodeTrace]) -> None:
    """JSONL archive: each trace is an episode header line plus its cycle lines."""
    with open(path, "w") as fh:
        for tr in traces:
            fh.write(tr.to_jsonl())


def read_traces(path) -> list[EpisodeTrace]:
    traces, block = [], []
    with open(path) as fh:
        for line in fh:
            if line.startswith('{"type": "episode"') and block:
                traces.append(EpisodeTrace.from_jsonl("".join(block)))
                block = []
            block.append(line)
    if block:
        traces.append(EpisodeTrace.from_jsonl("".join(block)))
    return traces
