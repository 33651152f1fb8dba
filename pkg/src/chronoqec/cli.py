"""``chronoqec`` command line: train, evaluate, run, ablate, sweep, report.

Exit codes: 0 success, 2 configuration error, 3 runtime error, 4 sweep
finished with failed cells.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import itertools
import os
import sys
import traceback

import yaml

from .agent import AgentHyper, ChDQNAgent, hyper_to_dict, train, write_training_log
from .baselines import StaticPolicy
from .config import (
    AGENT_VARIANTS,
    ConfigError,
    RunConfig,
    load_config,
    reference_config,
    write_config,
)
from .grad import load_checkpoint, save_checkpoint
from .harness import (
    ablation_suite,
    efficiency_table,
    evaluate,
    write_ablation,
    write_efficiency,
    write_hazard,
    write_metrics,
    write_reference_check,
    write_survival,
    write_traces,
)

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_PARTIAL = 0, 2, 3, 4


class CheckpointMismatch(ConfigError):
    pass


# ---------------------------------------------------------------- workflows


def train_one(cfg: RunConfig, out_dir, variant: str | None = None, distance: int | None = None) -> str:
    """Train one agent; writes checkpoint, training log and resolved config."""
    variant = variant or cfg.variant
    distance = distance or cfg.env.distance
    cfg = dataclasses.replace(cfg, variant=variant, env=cfg.env_for(distance))
    hyper = cfg.hyper_for(variant)
    os.makedirs(out_dir, exist_ok=True)
    agent, log = train(cfg.env, hyper, cfg.harness.train_episodes, cfg.seed)
    meta = {
        "variant": variant,
        "distance": distance,
        "episodes": cfg.harness.train_episodes,
        "seed": cfg.seed,
        "hyper": hyper_to_dict(hyper),
    }
    path = os.path.join(out_dir, "checkpoint.npz")
    save_checkpoint(path, agent.params, meta)
    write_training_log(os.path.join(out_dir, "training_log.csv"), log)
    write_config(os.path.join(out_dir, "config.yaml"), cfg)
    return path


def load_agent(cfg: RunConfig, path) -> tuple[str, int, ChDQNAgent]:
    """Load a checkpoint and check it against the configuration before use."""
    try:
        params, meta = load_checkpoint(path)
    except FileNotFoundError:
        raise ConfigError([(str(path), "checkpoint not found")]) from None
    except (OSError, ValueError, KeyError) as exc:
        raise ConfigError([(str(path), f"unreadable checkpoint: {exc}")]) from None
    variant = meta.get("variant")
    if variant not in AGENT_VARIANTS:
        raise CheckpointMismatch([(str(path), f"unknown agent variant {variant!r} in checkpoint")])
    hyper = cfg.hyper_for(variant)
    expected = dict(ChDQNAgent(hyper).cell.shapes())
    got = dict(params.shapes)
    if expected != got:
        diff = sorted(k for k in set(expected) | set(got) if expected.get(k) != got.get(k))
        detail = ", ".join(f"{k}: checkpoint {got.get(k)} vs config {expected.get(k)}" for k in diff[:4])
        raise CheckpointMismatch([(str(path), f"dimension mismatch with agent/baseline config ({detail})")])
    if "hyper" in meta:
        try:
            hyper = AgentHyper(**meta["hyper"])  # acting uses the scaling it was trained with
        except TypeError as exc:
            raise CheckpointMismatch([(str(path), f"bad hyperparameters in checkpoint: {exc}")]) from None
    return variant, int(meta.get("distance", cfg.env.distance)), ChDQNAgent(hyper, params)


def evaluate_policies(cfg: RunConfig, entries, out_dir) -> list:
    """Evaluate ``(policy_id, distance, policy)`` entries and write every output."""
    os.makedirs(out_dir, exist_ok=True)
    h = cfg.harness
    results = []
    for policy_id, d, policy in entries:
        res = evaluate(policy, cfg.env_for(d), h.n_runs, h.base_seed, policy_id, h.threads, h.bootstrap)
        results.append(res)
    records = [r.record for r in results]
    write_metrics(os.path.join(out_dir, "metrics.csv"), records)
    write_survival(os.path.join(out_dir, "survival.csv"), [(r.record.policy, r.record.distance, r.survival) for r in results])
    write_hazard(os.path.join(out_dir, "hazard.csv"), [(r.record.policy, r.record.distance, r.hazard) for r in results])
    static_d = {r.distance for r in records if r.policy == "static"}
    eff_rows = efficiency_table([r for r in records if r.distance in static_d])
    write_efficiency(os.path.join(out_dir, "efficiency.csv"), eff_rows)
    write_reference_check(os.path.join(out_dir, "reference_check.csv"))
    if h.keep_traces:
        write_traces(os.path.join(out_dir, "traces.jsonl"), [t for r in results for t in r.traces])
    write_config(os.path.join(out_dir, "config.yaml"), cfg)
    return records


def run_experiment(cfg: RunConfig, out_dir) -> list:
    """Train every learned policy at every distance, then evaluate all of them."""
    entries = []
    for d in cfg.harness.distances:
        for p in cfg.harness.policies:
            if p == "static":
                entries.append(("static", d, StaticPolicy()))
                continue
            ckpt = train_one(cfg, os.path.join(out_dir, f"{p}_d{d}"), p, d)
            _, _, agent = load_agent(cfg, ckpt)
            entries.append((p, d, agent.policy(0.0)))
    return evaluate_policies(cfg, entries, out_dir)


# ---------------------------------------------------------------- sweep


def parse_grid(items, grid_file=None) -> dict:
    grid = {}
    if grid_file:
        try:
            with open(grid_file) as fh:
                loaded = yaml.safe_load(fh) or {}
        except FileNotFoundError:
            raise ConfigError([(str(grid_file), "grid file not found")]) from None
        if not isinstance(loaded, dict):
            raise ConfigError([(str(grid_file), "grid file must map keys to value lists")])
        grid.update(loaded)
    for item in items or ():
        if "=" not in item:
            raise ConfigError([(item, "grid entry must look like section.key=[v1, v2]")])
        key, raw = item.split("=", 1)
        grid[key.strip()] = yaml.safe_load(raw)
    for key, values in grid.items():
        if not isinstance(values, list) or not values:
            raise ConfigError([(f"grid.{key}", "needs a non-empty list of values")])
    return grid


def grid_cells(grid: dict) -> list[dict]:
    keys = list(grid)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _override_text(key, value) -> str:
    return f"{key}={yaml.safe_dump(value, default_flow_style=True).strip().removesuffix('...').strip()}"


def run_sweep(cfg_path, base_overrides, grid: dict, out_dir, full=False, threads=None, log=print) -> tuple[list[dict], int]:
    """Run ``run_experiment`` per grid cell; completed cells are skipped on rerun.

    Every cell keeps the base seeds, so cells differ only in the swept values.
    """
    os.makedirs(out_dir, exist_ok=True)
    rows = []
    failed = 0
    for i, cell in enumerate(grid_cells(grid)):
        name = f"cell_{i:03d}"
        cell_dir = os.path.join(out_dir, name)
        done = os.path.join(cell_dir, "DONE")
        row = {"cell": name, **{k: _override_text(k, v).split("=", 1)[1] for k, v in cell.items()}}
        try:
            overrides = list(base_overrides or ()) + [_override_text(k, v) for k, v in cell.items()]
            cfg = _with_threads(load_config(cfg_path, overrides, full), threads)
            if os.path.exists(done):
                log(f"{name}: already complete, skipping")
            else:
                os.makedirs(cell_dir, exist_ok=True)
                if os.path.exists(os.path.join(cell_dir, "FAILED")):
                    os.unlink(os.path.join(cell_dir, "FAILED"))
                log(f"{name}: running {cell}")
                run_experiment(cfg, cell_dir)
                with open(done, "w") as fh:
                    fh.write("ok\n")
            row.update(_cell_score(cell_dir, cfg), status="ok", error="")
        except Exception as exc:  # noqa: BLE001 - recorded per cell
            failed += 1
            os.makedirs(cell_dir, exist_ok=True)
            with open(os.path.join(cell_dir, "FAILED"), "w") as fh:
                fh.write(traceback.format_exc())
            msg = "; ".join(f"{p}: {m}" for p, m in exc.errors) if isinstance(exc, ConfigError) else str(exc)
            row.update(score_policy="", ttt_score="", status="failed", error=msg)
            log(f"{name}: failed: {msg}")
        rows.append(row)
    write_summary(os.path.join(out_dir, "summary.csv"), rows, list(grid))
    return rows, failed


def _cell_score(cell_dir, cfg: RunConfig) -> dict:
    """Mean TTT over distances of the first learned policy (static if none)."""
    from .harness import read_csv

    learned = [p for p in cfg.harness.policies if p != "static"]
    policy = learned[0] if learned else "static"
    rows = [r for r in read_csv(os.path.join(cell_dir, "metrics.csv")) if r["policy"] == policy]
    score = sum(float(r["ttt_mean"]) for r in rows) / len(rows)
    return {"score_policy": policy, "ttt_score": f"{score:.10g}"}


def write_summary(path, rows, keys) -> None:
    ok = sorted((r for r in rows if r["status"] == "ok"), key=lambda r: -float(r["ttt_score"]))
    bad = [r for r in rows if r["status"] != "ok"]
    cols = ["rank", "cell", *keys, "score_policy", "ttt_score", "status", "error"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for i, r in enumerate(ok + bad):
            w.writerow({"rank": i + 1 if r["status"] == "ok" else "", **{c: r.get(c, "") for c in cols[1:]}})


# ---------------------------------------------------------------- argument handling


def _with_threads(cfg: RunConfig, threads) -> RunConfig:
    if threads is None:
        return cfg
    cfg = dataclasses.replace(cfg, harness=dataclasses.replace(cfg.harness, threads=threads))
    return cfg.check()


def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, args.override, getattr(args, "full", False))
    return _with_threads(cfg, getattr(args, "threads", None))


def _out(args, cfg: RunConfig, *parts) -> str:
    return args.out or os.path.join(cfg.output_root(), *parts)


def cmd_print_defaults(args) -> int:
    cfg = load_config(args.config, args.override, args.full) if (args.config or args.override or args.full) else None
    sys.stdout.write(reference_config(cfg))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _resolve(args)
    variant = args.agent or cfg.variant
    if variant not in AGENT_VARIANTS:
        raise ConfigError([("--agent", f"unknown agent variant {variant!r}; choose from {list(AGENT_VARIANTS)}")])
    if args.episodes is not None:
        cfg = dataclasses.replace(cfg, harness=dataclasses.replace(cfg.harness, train_episodes=args.episodes)).check()
    d = args.distance or cfg.env.distance
    out = _out(args, cfg, "train", f"{variant}_d{d}")
    path = train_one(cfg, out, variant, d)
    print(f"wrote {path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    if args.n_runs is not None or args.base_seed is not None:
        h = dataclasses.replace(
            cfg.harness,
            n_runs=cfg.harness.n_runs if args.n_runs is None else args.n_runs,
            base_seed=cfg.harness.base_seed if args.base_seed is None else args.base_seed,
        )
        cfg = dataclasses.replace(cfg, harness=h).check()
    loaded = [load_agent(cfg, p) for p in args.checkpoint or ()]  # all checked before any run
    distances = args.distance or sorted({d for _, d, _ in loaded}) or cfg.harness.distances
    entries = []
    for d in distances:
        if "static" in cfg.harness.policies:
            entries.append(("static", d, StaticPolicy()))
        entries.extend((v, dd, agent.policy(0.0)) for v, dd, agent in loaded if dd == d)
    out = _out(args, cfg, "evaluate")
    records = evaluate_policies(cfg, entries, out)
    for r in records:
        print(f"{r.policy:>28s} d={r.distance} TTT {r.ttt_mean:8.2f} HZ {r.hz_mean:.5f} CTRL {r.ctrl_mean:7.1f}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = _resolve(args)
    out = _out(args, cfg, "run")
    for r in run_experiment(cfg, out):
        print(f"{r.policy:>28s} d={r.distance} TTT {r.ttt_mean:8.2f} HZ {r.hz_mean:.5f} CTRL {r.ctrl_mean:7.1f}")
    if args.plots:
        from .plotting import render_directory

        render_directory(out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _resolve(args)
    d = args.distance or max(cfg.harness.distances)
    h = cfg.harness
    out = _out(args, cfg, "ablate")
    os.makedirs(out, exist_ok=True)
    entries = ablation_suite(cfg.env_for(d), cfg.agent, h.train_episodes, cfg.seed, h.n_runs, h.base_seed, threads=h.threads)
    write_ablation(os.path.join(out, "ablation.csv"), entries)
    write_config(os.path.join(out, "config.yaml"), cfg)
    for e in entries:
        gr = "n/a" if e.gap_reduction is None else f"{e.gap_reduction:.3f}"
        print(f"{e.variant:>24s} TTT {e.record.ttt_mean:8.2f} paired delta {e.paired_delta:+.2f} gap reduction {gr}")
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    base = load_config(args.config, args.override, args.full)  # fail fast on the base config
    grid = parse_grid(args.grid, args.grid_file)
    if not grid:
        raise ConfigError([("--grid", "no grid given")])
    out = _out(args, base, "sweep")
    rows, failed = run_sweep(args.config, args.override, grid, out, args.full, args.threads)
    print(f"wrote {os.path.join(out, 'summary.csv')} ({len(rows) - failed} ok, {failed} failed)")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_report(args) -> int:
    from .plotting import render_directory

    if not os.path.isdir(args.directory):
        raise ConfigError([(args.directory, "not a directory")])
    paths = render_directory(args.directory)
    for p in paths:
        print(f"wrote {p}")
    if not paths:
        print("no known CSV files found", file=sys.stderr)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chronoqec", description=__doc__.splitlines()[0])
    parser.add_argument("--print-defaults", action="store_true", help="print the documented default config and exit")
    sub = parser.add_subparsers(dest="command")

    def common(p, threads=True):
        p.add_argument("--config", "-c", help="YAML run configuration")
        p.add_argument("--override", "-o", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config value, e.g. agent.eta_meta=0 (repeatable)")
        p.add_argument("--full", action="store_true", help="use 500 evaluation runs")
        p.add_argument("--out", help="output directory (default: $CHRONOQEC_OUTPUT/<name>/<command>)")
        if threads:
            p.add_argument("--threads", type=int, help="cap on evaluation worker threads")

    p = sub.add_parser("print-defaults", help="print the documented default config")
    common(p, threads=False)
    p.set_defaults(func=cmd_print_defaults)

    p = sub.add_parser("train", help="train one agent at one distance")
    common(p)
    p.add_argument("--agent", choices=list(AGENT_VARIANTS), help="agent variant (default: config 'variant')")
    p.add_argument("--distance", "-d", type=int, help="code distance (default: env.distance)")
    p.add_argument("--episodes", type=int, help="training episodes (default: harness.train_episodes)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate checkpoints and the static policy")
    common(p)
    p.add_argument("--checkpoint", action="append", metavar="PATH", help="checkpoint to evaluate (repeatable)")
    p.add_argument("--distance", "-d", type=int, action="append", help="distances (default: from checkpoints)")
    p.add_argument("--n-runs", type=int)
    p.add_argument("--base-seed", type=int)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="train and evaluate every policy at every distance")
    common(p)
    p.add_argument("--plots", action="store_true", help="render figures next to the CSV files")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("ablate", help="meta-update / consistency ablation at one distance")
    common(p)
    p.add_argument("--distance", "-d", type=int, help="code distance (default: largest in harness.distances)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="run a grid of configurations")
    common(p)
    p.add_argument("--grid", "-g", action="append", default=[], metavar="KEY=[V1,V2]",
                   help="grid axis, e.g. agent.gamma_frac=[0.3,0.5,0.8] (repeatable)")
    p.add_argument("--grid-file", help="YAML mapping of config keys to value lists")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="render figures for every CSV under a directory")
    p.add_argument("directory")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults and args.command is None:
        sys.stdout.write(reference_config())
        return EXIT_OK
    if args.command is None:
        parser.print_help()
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        for path, msg in exc.errors:
            print(f"config error: {path}: {msg}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
