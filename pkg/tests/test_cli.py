import csv
import filecmp
import os

import numpy as np
import pytest
import yaml

from chronoqec.cli import EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL, main
from chronoqec.grad import load_checkpoint
from chronoqec.harness import read_csv

TINY = """\
name: tiny
env:
  max_cycles: 60
agent:
  d_h: 6
  updates_per_episode: 2
harness:
  distances: [3]
  train_episodes: 3
  n_runs: 4
"""


@pytest.fixture
def tiny(tmp_path, monkeypatch):
    monkeypatch.setenv("CHRONOQEC_OUTPUT", str(tmp_path / "out"))
    p = tmp_path / "tiny.yaml"
    p.write_text(TINY)
    return p


def _ckpt_equal(a, b):
    pa, ma = load_checkpoint(a)
    pb, mb = load_checkpoint(b)
    return np.array_equal(pa.flat, pb.flat) and ma == mb


def test_print_defaults(capsys):
    assert main(["--print-defaults"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "eta_meta:" in out and "# fractional meta-update step" in out
    assert main(["print-defaults", "--full"]) == EXIT_OK
    assert "n_runs: 500" in capsys.readouterr().out


def test_missing_config_names_path(tmp_path, capsys):
    missing = tmp_path / "nope.yaml"
    assert main(["train", "-c", str(missing)]) == EXIT_CONFIG
    assert str(missing) in capsys.readouterr().err


def test_bad_override_is_a_config_error(tiny, capsys):
    assert main(["train", "-c", str(tiny), "-o", "agent.etaa=1"]) == EXIT_CONFIG
    assert "agent.etaa" in capsys.readouterr().err


def test_train_writes_outputs_and_snapshot_replays(tiny, tmp_path):
    out = tmp_path / "run1"
    assert main(["train", "-c", str(tiny), "--out", str(out)]) == EXIT_OK
    for name in ("checkpoint.npz", "training_log.csv", "config.yaml"):
        assert (out / name).exists()
    assert len(read_csv(out / "training_log.csv")) == 3
    replay = tmp_path / "run2"
    assert main(["train", "-c", str(out / "config.yaml"), "--out", str(replay)]) == EXIT_OK
    assert _ckpt_equal(out / "checkpoint.npz", replay / "checkpoint.npz")
    assert (out / "config.yaml").read_bytes() == (replay / "config.yaml").read_bytes()


def test_override_trains_ablation_variant(tiny, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["train", "-c", str(tiny), "-o", "agent.eta_meta=0", "--out", str(a)]) == EXIT_OK
    assert main(["train", "-c", str(tiny), "--agent", "chdqn-no-meta", "--out", str(b)]) == EXIT_OK
    pa, ma = load_checkpoint(a / "checkpoint.npz")
    pb, _ = load_checkpoint(b / "checkpoint.npz")
    assert ma["hyper"]["eta_meta"] == 0.0
    assert np.array_equal(pa.flat, pb.flat)


def test_evaluate_static_needs_no_checkpoint(tiny, tmp_path):
    out = tmp_path / "ev"
    assert main(["evaluate", "-c", str(tiny), "--out", str(out), "-o", "harness.distances=[3,5]"]) == EXIT_OK
    rows = read_csv(out / "metrics.csv")
    assert [(r["policy"], r["distance"]) for r in rows] == [("static", "3"), ("static", "5")]
    assert all(float(r["ctrl_mean"]) == 0.0 for r in rows)
    cfg = yaml.safe_load((out / "config.yaml").read_text())
    assert cfg["harness"]["distances"] == [3, 5]


def test_evaluate_is_byte_identical_and_reports_all_outputs(tiny, tmp_path):
    ck = tmp_path / "ck"
    assert main(["train", "-c", str(tiny), "--out", str(ck)]) == EXIT_OK
    args = ["evaluate", "-c", str(tiny), "--checkpoint", str(ck / "checkpoint.npz")]
    assert main(args + ["--out", str(tmp_path / "e1")]) == EXIT_OK
    assert main(args + ["--out", str(tmp_path / "e2"), "--threads", "2"]) == EXIT_OK
    names = sorted(os.listdir(tmp_path / "e1"))
    assert names == sorted(
        ["config.yaml", "efficiency.csv", "hazard.csv", "metrics.csv", "reference_check.csv", "survival.csv", "traces.jsonl"]
    )
    for n in names:
        if n != "config.yaml":  # the snapshot records the thread count
            assert filecmp.cmp(tmp_path / "e1" / n, tmp_path / "e2" / n, shallow=False), n
    assert [r["policy"] for r in read_csv(tmp_path / "e1" / "metrics.csv")] == ["static", "chdqn"]


def test_evaluate_rejects_dimension_mismatch_before_running(tiny, tmp_path, capsys):
    ck = tmp_path / "ck"
    assert main(["train", "-c", str(tiny), "--out", str(ck)]) == EXIT_OK
    out = tmp_path / "ev"
    code = main(["evaluate", "-c", str(tiny), "-o", "agent.d_h=7", "--checkpoint", str(ck / "checkpoint.npz"), "--out", str(out)])
    assert code == EXIT_CONFIG
    assert "dimension mismatch" in capsys.readouterr().err
    assert not out.exists()


def test_one_cell_sweep_matches_train_plus_evaluate(tiny, tmp_path):
    sw = tmp_path / "sw"
    assert main(["sweep", "-c", str(tiny), "-g", "agent.gamma_frac=[0.5]", "--out", str(sw)]) == EXIT_OK
    cell = sw / "cell_000"
    assert main(["train", "-c", str(tiny), "--agent", "chdqn", "--out", str(tmp_path / "c")]) == EXIT_OK
    assert main(["train", "-c", str(tiny), "--agent", "gated", "--out", str(tmp_path / "g")]) == EXIT_OK
    assert _ckpt_equal(cell / "chdqn_d3" / "checkpoint.npz", tmp_path / "c" / "checkpoint.npz")
    assert _ckpt_equal(cell / "gated_d3" / "checkpoint.npz", tmp_path / "g" / "checkpoint.npz")
    ev = tmp_path / "ev"
    cks = ["--checkpoint", str(tmp_path / "c" / "checkpoint.npz"), "--checkpoint", str(tmp_path / "g" / "checkpoint.npz")]
    assert main(["evaluate", "-c", str(tiny), *cks, "--out", str(ev)]) == EXIT_OK
    for n in ("metrics.csv", "survival.csv", "hazard.csv", "traces.jsonl"):
        assert filecmp.cmp(cell / n, ev / n, shallow=False), n


def test_sweep_enumerates_ranks_and_resumes(tiny, tmp_path, capsys):
    sw = tmp_path / "sw"
    base = ["sweep", "-c", str(tiny), "-o", "harness.policies=[static,chdqn]", "--out", str(sw)]
    assert main(base + ["-g", "agent.gamma_frac=[0.3,0.5,0.8]"]) == EXIT_OK
    rows = list(csv.DictReader(open(sw / "summary.csv")))
    assert len(rows) == 3 and [r["rank"] for r in rows] == ["1", "2", "3"]
    scores = [float(r["ttt_score"]) for r in rows]
    assert scores == sorted(scores, reverse=True)
    for i in range(3):
        assert (sw / f"cell_{i:03d}" / "config.yaml").exists()
    capsys.readouterr()
    assert main(base + ["-g", "agent.gamma_frac=[0.3,0.5,0.8]"]) == EXIT_OK
    assert capsys.readouterr().out.count("already complete") == 3


def test_sweep_records_failed_cells_and_continues(tiny, tmp_path):
    sw = tmp_path / "sw"
    args = ["sweep", "-c", str(tiny), "-o", "harness.policies=[static]", "--out", str(sw), "-g", "agent.eta_meta=[0.001,0.5]"]
    assert main(args) == EXIT_PARTIAL
    rows = {r["cell"]: r for r in csv.DictReader(open(sw / "summary.csv"))}
    assert rows["cell_000"]["status"] == "ok" and rows["cell_001"]["status"] == "failed"
    assert "agent.eta_meta" in rows["cell_001"]["error"]
    assert (sw / "cell_001" / "FAILED").exists() and (sw / "cell_000" / "DONE").exists()


def test_run_and_report_render_figures(tiny, tmp_path):
    out = tmp_path / "run"
    assert main(["run", "-c", str(tiny), "--out", str(out), "--plots"]) == EXIT_OK
    for n in ("survival.png", "hazard.png", "metrics.png"):
        assert (out / n).stat().st_size > 0
    assert (out / "chdqn_d3" / "training.png").exists()
    (out / "survival.png").unlink()
    assert main(["report", str(out)]) == EXIT_OK
    assert (out / "survival.png").exists()
    assert main(["report", str(tmp_path / "missing")]) == EXIT_CONFIG


def test_ablate_writes_table(tiny, tmp_path):
    out = tmp_path / "ab"
    assert main(["ablate", "-c", str(tiny), "--out", str(out)]) == EXIT_OK
    rows = read_csv(out / "ablation.csv")
    assert [r["variant"] for r in rows] == ["full", "no_meta", "no_consistency", "no_meta_no_consistency"]
    assert float(rows[0]["paired_delta"]) == 0.0
    assert (out / "config.yaml").exists()
