import dataclasses

import numpy as np
import pytest

from chronoqec.agent import BASELINE_DIFF, AgentHyper, ChDQNAgent, baseline_hyper, train
from chronoqec.baselines import (
    GatedCell,
    StaticPolicy,
    chdqn_param_count,
    gated_forward,
    gated_shapes,
    param_count,
    static_policy,
    train_baseline,
)
from chronoqec.env import EnvConfig, Observation, QECEnv, null_noise_config, run_episode
from chronoqec.grad import Params, finite_difference, relative_error


def test_static_policy_is_constant_zero():
    rng = np.random.default_rng(0)
    for _ in range(100):
        obs = Observation(*rng.uniform(0, 1, 2), int(rng.integers(2)), rng.uniform())
        assert static_policy(obs) == 0


def test_static_policy_has_zero_control_cost():
    env = QECEnv(EnvConfig(distance=5))
    for seed in range(20):
        assert run_episode(env, StaticPolicy(), seed).total_control_cost == 0.0


def test_gate_saturation_keeps_cell_state():
    d = 3
    p = Params(gated_shapes(d, 4, 3))
    p["bf"][...] = 50.0
    p["bi"][...] = -50.0
    c = np.array([0.3, -0.7, 0.1])
    _, c_new, _ = gated_forward(p, np.zeros(d), c, np.ones(4), 1.0)
    assert np.allclose(c_new, c, atol=1e-20)


def test_zero_params_halve_cell_state():
    d = 3
    p = Params(gated_shapes(d, 4, 3))
    c = np.array([0.8, -0.4, 0.2])
    h, c_new, (_, i, f, o, g) = gated_forward(p, np.zeros(d), c, np.ones(4), 1.0)
    assert np.all(i == 0.5) and np.all(f == 0.5) and np.all(o == 0.5) and np.all(g == 0.0)
    assert np.array_equal(c_new, 0.5 * c)
    assert np.allclose(h, 0.5 * np.tanh(0.5 * c))


def test_gate_activation_ranges():
    rng = np.random.default_rng(1)
    cell = GatedCell(6)
    p = cell.init(rng)
    p.flat[:] = rng.normal(scale=3.0, size=p.size)
    _, _, (_, i, f, o, g) = gated_forward(p, rng.normal(size=6), rng.normal(size=6), rng.normal(size=4), 0.5)
    for gate in (i, f, o):
        assert np.all((gate > 0) & (gate < 1))
    assert np.all(np.abs(g) < 1)


@pytest.mark.parametrize("seed", range(20))
def test_gated_gradient_matches_finite_differences(seed):
    rng = np.random.default_rng(300 + seed)
    cell = GatedCell(4)
    p = Params(cell.shapes(), rng.normal(scale=0.5, size=param_count(cell.shapes())))
    B, L = 2, 8
    s0 = rng.normal(scale=0.5, size=(B, 8))
    X, Rp, G = rng.normal(size=(B, L, 4)), rng.normal(size=(B, L)), rng.normal(size=(B, L, 4))

    def loss(flat):
        _, H, _ = cell.unroll(p.with_flat(flat), s0, X, Rp)
        return float(np.sum(G * H**2))

    tape, H, _ = cell.unroll(p, s0, X, Rp)
    grads = cell.backward(p, tape, 2.0 * G * H)
    fd = finite_difference(loss, p.flat, 1e-5)
    head = np.zeros(p.size, dtype=bool)
    probe = p.zeros_like()
    probe["Qw"][...] = 1.0
    probe["Qb"][...] = 1.0
    head |= probe.flat > 0
    assert np.max(relative_error(grads.flat[~head], fd[~head])) < 1e-4


def test_baseline_differs_only_in_flagged_settings():
    for hyper in (AgentHyper(), AgentHyper(d_h=24, eta=0.05, eta_meta=0.002, gamma_frac=0.3)):
        base = baseline_hyper(hyper)
        diff = {
            f.name
            for f in dataclasses.fields(AgentHyper)
            if getattr(base, f.name) != getattr(hyper, f.name)
        }
        assert diff == set(BASELINE_DIFF)
        assert base.cell == "gated" and base.eta_meta == 0.0 and base.consistency_weight == 0.0


def test_baseline_capacity_matched_within_quarter():
    for d_h in (8, 16, 32):
        target = chdqn_param_count(d_h)
        got = param_count(gated_shapes(baseline_hyper(AgentHyper(d_h=d_h)).d_h))
        assert abs(got - target) / target <= 0.25


def test_gated_agent_has_no_refinement():
    agent = ChDQNAgent(baseline_hyper(AgentHyper()))
    assert not agent.uses_refinement


def test_baseline_empty_training_and_determinism():
    cfg = EnvConfig(max_cycles=20)
    hyper = AgentHyper(d_h=6, updates_per_episode=2)
    agent, log = train_baseline(cfg, hyper, 0, seed=1)
    assert log == []
    a, log_a = train_baseline(cfg, hyper, 5, seed=1)
    b, log_b = train_baseline(cfg, hyper, 5, seed=1)
    assert log_a == log_b and np.array_equal(a.params.flat, b.params.flat)
    assert all(row["cons_loss"] == 0.0 for row in log_a)


def test_baseline_null_noise_converges_to_no_action():
    cfg = null_noise_config(max_cycles=20, lambda_action=0.01)
    agent, _ = train_baseline(cfg, AgentHyper(d_h=8, updates_per_episode=8), 80, seed=0)
    trace = run_episode(QECEnv(cfg), agent.policy(0.0), seed=0)
    assert trace.actions.tolist() == [0] * 20


def test_baseline_shares_training_loop():
    cfg = EnvConfig(max_cycles=20)
    hyper = AgentHyper(d_h=6, updates_per_episode=1)
    a, _ = train_baseline(cfg, hyper, 2, seed=4)
    b, _ = train(cfg, baseline_hyper(hyper), 2, seed=4)
    assert np.array_equal(a.params.flat, b.params.flat)
