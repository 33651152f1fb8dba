import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from chronoqec.baselines import StaticPolicy
from chronoqec.env import EnvConfig, EpisodeTrace
from chronoqec.harness import (
    REFERENCE_EFFICIENCY,
    MissingReferenceError,
    bootstrap_ci,
    efficiency,
    efficiency_table,
    evaluate,
    hazard_trajectory,
    metrics_from_traces,
    normal_ci,
    reference_efficiency_check,
    read_csv,
    read_traces,
    run_hz,
    run_ttt,
    survival_curve,
    write_hazard,
    write_metrics,
    write_survival,
    write_traces,
)


def fake_trace(T, terminated, max_cycles=50, h_final=0.3, seed=None, actions=None):
    acts = np.zeros(T, dtype=int) if actions is None else np.asarray(actions)
    hz = np.linspace(h_final / T, h_final, T) if T else np.zeros(0)
    return EpisodeTrace(
        observations=np.zeros((T + 1, 4)),
        actions=acts,
        rewards=-np.ones(T) * 0.01,
        hazards=hz,
        fidelities=1.0 - hz,
        terminated=terminated,
        max_cycles=max_cycles,
        h_crit=h_final,
        seed=seed,
    )


def test_normal_ci_matches_formula():
    v = np.array([1.0, 2.0, 3.0, 4.0])
    lo, hi = normal_ci(v)
    half = 1.96 * np.std(v, ddof=1) / 2.0
    assert lo == pytest.approx(2.5 - half) and hi == pytest.approx(2.5 + half)


def test_bootstrap_ci_brackets_mean_and_is_seeded():
    v = np.random.default_rng(0).exponential(10.0, size=200)
    lo, hi = bootstrap_ci(v)
    assert lo <= v.mean() <= hi
    assert bootstrap_ci(v) == (lo, hi)
    nlo, nhi = normal_ci(v)
    assert abs((hi - lo) - (nhi - nlo)) / (nhi - nlo) < 0.2


def test_ttt_and_hz_of_terminated_and_censored_runs():
    a = fake_trace(20, True, h_final=0.3)
    b = fake_trace(50, False, max_cycles=50, h_final=0.1)
    assert run_ttt(a) == 20 and run_ttt(b) == 50
    assert run_hz(a) == pytest.approx(0.3 / 20)
    assert run_hz(b) == pytest.approx(0.1 / 50)


def test_survival_curve_hand_example():
    traces = [fake_trace(2, True), fake_trace(4, True), fake_trace(5, False, max_cycles=5)]
    c = survival_curve(traces, 5)
    assert c.times.tolist() == [0, 1, 2, 3, 4, 5]
    assert np.allclose(c.survival, [1, 1, 2 / 3, 2 / 3, 1 / 3, 1 / 3])


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 40), st.booleans()), min_size=1, max_size=30))
def test_survival_starts_at_one_and_never_increases(runs):
    traces = [fake_trace(T, term, max_cycles=40) if term else fake_trace(40, False, max_cycles=40) for T, term in runs]
    c = survival_curve(traces, 40)
    assert c.survival[0] == 1.0
    assert np.all(np.diff(c.survival) <= 0)
    assert c.survival[-1] == pytest.approx(np.mean([not t.terminated for t in traces]))


def test_hazard_trajectory_averages_alive_runs():
    a, b = fake_trace(2, True, h_final=0.2), fake_trace(4, True, h_final=0.4)
    tr = hazard_trajectory([a, b])
    assert tr.n_alive.tolist() == [2, 2, 2, 1, 1]
    assert tr.mean_hazard[0] == 0.0
    assert tr.mean_hazard[1] == pytest.approx((0.1 + 0.1) / 2)
    assert tr.mean_hazard[4] == pytest.approx(0.4)


def test_metrics_record_counts_censoring_and_control():
    traces = [fake_trace(10, True, actions=[1] * 10), fake_trace(50, False, actions=[0] * 49 + [2])]
    r = metrics_from_traces("p", 3, traces)
    assert r.n_runs == 2 and r.censored_count == 1
    assert r.ttt_mean == 30.0 and r.ctrl_mean == 6.0
    assert r.lat_norm_mean is None and r.ci_method == "normal"


def test_efficiency_definition_and_zero_control():
    assert efficiency(60.0, 50.0, 20.0) == 0.5
    assert efficiency(60.0, 50.0, 0.0) is None


def test_efficiency_table_needs_static_reference():
    recs = [metrics_from_traces("chdqn", 5, [fake_trace(10, True, actions=[1] * 10)])]
    with pytest.raises(MissingReferenceError):
        efficiency_table(recs)
    recs.append(metrics_from_traces("static", 5, [fake_trace(8, True)]))
    (row,) = efficiency_table(recs)
    assert row["eff"] == pytest.approx((10 - 8) / 10)


def test_reference_efficiency_recomputation():
    rows = {(r["distance"], r["policy"]): r for r in reference_efficiency_check()}
    assert len(rows) == 6
    assert rows[(7, "chdqn")]["recomputed"] == pytest.approx((76.6 - 55.7) / 118.7)
    assert rows[(3, "gated")]["recomputed"] == pytest.approx((42.1 - 34.8) / 96.2)
    for key, row in rows.items():
        assert row["quoted"] == REFERENCE_EFFICIENCY[key[0]][key[1]]


def test_evaluate_is_seeded_and_thread_invariant():
    cfg = EnvConfig(distance=3, max_cycles=120)
    a = evaluate(StaticPolicy(), cfg, 12, base_seed=5)
    b = evaluate(StaticPolicy(), cfg, 12, base_seed=5, threads=3)
    assert [t.seed for t in a.traces] == list(range(5, 17))
    assert a.record == b.record
    assert np.array_equal(a.survival.survival, b.survival.survival)
    c = evaluate(StaticPolicy(), cfg, 12, base_seed=6)
    assert c.record != a.record


def test_static_evaluation_has_zero_control():
    res = evaluate(StaticPolicy(), EnvConfig(distance=5), 10)
    assert res.record.ctrl_mean == 0.0
    assert res.record.policy == "static"


def test_csv_writers_round_trip(tmp_path):
    cfg = EnvConfig(distance=3, max_cycles=80)
    res = evaluate(StaticPolicy(), cfg, 6)
    write_metrics(tmp_path / "m.csv", [res.record])
    write_survival(tmp_path / "s.csv", [("static", 3, res.survival)])
    write_hazard(tmp_path / "h.csv", [("static", 3, res.hazard)])
    assert (tmp_path / "m.csv").read_text().startswith("# chronoqec.metrics/1\n")
    (m,) = read_csv(tmp_path / "m.csv")
    assert float(m["ttt_mean"]) == pytest.approx(res.record.ttt_mean, rel=1e-9)
    assert m["lat_norm_mean"] == ""
    s = read_csv(tmp_path / "s.csv")
    assert len(s) == 81 and float(s[0]["S"]) == 1.0
    h = read_csv(tmp_path / "h.csv")
    assert int(h[0]["n_alive"]) == 6


def test_trace_archive_round_trip(tmp_path):
    res = evaluate(StaticPolicy(), EnvConfig(distance=3, max_cycles=60), 4)
    write_traces(tmp_path / "t.jsonl", res.traces)
    back = read_traces(tmp_path / "t.jsonl")
    assert len(back) == 4
    for x, y in zip(res.traces, back):
        assert x.seed == y.seed and x.terminated == y.terminated
        assert np.allclose(x.hazards, y.hazards) and np.array_equal(x.actions, y.actions)
