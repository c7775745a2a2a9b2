from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uprlhf import numerics as nx
from uprlhf.ensemble import RewardEnsemble
from uprlhf.evaluation import closed_form_policy
from uprlhf.model import response_logprobs
from uprlhf.rl import (
    EmaBaseline,
    RlConfig,
    UncertaintyTracker,
    collect_rollouts,
    fit_one_step_policy,
    kl_objective,
    penalized_reward,
    policy_update,
    rl_train,
)
from uprlhf.synthdata import TaskSpec

from conftest import numeric_grad, rel_error

SPEC = TaskSpec()
PROMPTS = [tuple(int(t) for t in row) for row in np.random.default_rng(0).integers(0, 16, (40, 5))]


@pytest.fixture
def ensemble(tiny_policy):
    e = RewardEnsemble.create(tiny_policy.backbone, n_members=3, rank=2, seed=0, init_std=0.3)
    rng = np.random.default_rng(1)
    for m in e.members:
        m.head.w.data = rng.normal(size=8)
        for u in m.lora.values():
            u.B.data = rng.normal(size=u.B.shape) * 0.3
    return e


def _batch(policy, ensemble, seed=0, n=6):
    return collect_rollouts(policy, policy, ensemble, PROMPTS[:n], SPEC, 1.0, np.random.default_rng(seed))


# -- penalty and tracker -----------------------------------------------------


def test_penalized_reward_examples():
    assert penalized_reward(1.3, 0.4, 0.4, 2.0) == 1.3
    assert penalized_reward(1.0, 0.7, 0.2, 0.5) == pytest.approx(0.75, abs=1e-15)
    assert penalized_reward(1.0, 9.0, 0.2, 0.0) == 1.0


@given(st.floats(-5, 5), st.floats(0, 3), st.floats(0, 3))
def test_penalized_reward_is_affine_in_u(r, u_bar, beta2):
    us = np.array([0.0, 0.5, 1.7])
    v = penalized_reward(r, us, u_bar, beta2)
    slopes = np.diff(v) / np.diff(us)
    np.testing.assert_allclose(slopes, -beta2, atol=1e-9)


def test_tracker_examples():
    t = UncertaintyTracker()
    assert t.update([1.0, 3.0]) == 2.0
    assert t.update([5.0]) == 3.0


def test_tracker_matches_list_mean():
    rng = np.random.default_rng(0)
    t, seen = UncertaintyTracker(), []
    for _ in range(10):
        batch = rng.random(rng.integers(1, 20))
        seen.extend(batch)
        assert abs(t.update(batch) - np.mean(seen)) < 1e-12


def test_ema_baseline():
    b = EmaBaseline(0.5)
    np.testing.assert_allclose(b.advantages(np.array([1.0, 3.0])), [-1.0, 1.0])
    assert b.value == 2.0
    np.testing.assert_allclose(b.advantages(np.array([4.0])), [2.0])
    assert b.value == 3.0


# -- KL objective -------------------------------------------------------------


def test_kl_objective_arithmetic():
    v = kl_objective(nx.tensor(np.array([0.3])), np.array([0.0]), 0.05).item()
    assert v == pytest.approx(0.0045, abs=1e-15)


def test_kl_objective_zero_at_reference(tiny_policy, ensemble):
    batch = _batch(tiny_policy, ensemble)
    lp, _ = response_logprobs(tiny_policy, batch.prompts, batch.responses)
    assert kl_objective(nx.sum(lp, axis=1), batch.logp_ref, 0.05).item() == 0.0


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 2.0))
def test_kl_objective_nonnegative(seed, beta1):
    rng = np.random.default_rng(seed)
    seq = rng.normal(size=rng.integers(1, 10)) * 5
    ref = rng.normal(size=seq.size) * 5
    assert kl_objective(nx.tensor(seq), ref, beta1).item() >= 0.0


def test_kl_objective_gradient(tiny_policy, ensemble):
    ref = tiny_policy.copy()
    policy = tiny_policy.copy()
    policy.lm_head.data += np.random.default_rng(3).normal(size=policy.lm_head.shape) * 0.2
    batch = collect_rollouts(policy, ref, ensemble, PROMPTS[:4], SPEC, 1.0, np.random.default_rng(0))

    def value():
        lp, _ = response_logprobs(policy, batch.prompts, batch.responses)
        return kl_objective(nx.sum(lp, axis=1), batch.logp_ref, 0.05)

    out = value()
    assert out.item() > 0
    nx.backward(out)
    for p in (policy.lm_head, policy.backbone.params["tok_emb"]):
        analytic = p.grad.copy()

        def f():
            with nx.no_grad():
                return value().item()

        assert rel_error(analytic, numeric_grad(f, p.data)) < 1e-4


# -- policy update ----------------------------------------------------------


def test_constant_rewards_leave_policy_unchanged(tiny_policy, ensemble):
    for m in ensemble.members:
        m.head.w.data[:] = 0.0
    policy = tiny_policy.copy()
    before = {k: v.copy() for k, v in policy.state_dict().items()}
    batch = _batch(policy, ensemble)
    cfg = RlConfig(beta1=0.0, beta2=0.0, lr=1e-2)
    metrics = policy_update(policy, batch, UncertaintyTracker(), EmaBaseline(), nx.Adam(policy.parameters(), lr=1e-2), cfg)
    for k, v in policy.state_dict().items():
        np.testing.assert_array_equal(v, before[k])
    assert set(metrics) >= {"proxy_reward_mean", "gold_mean", "u_mean", "u_bar", "kl_value"}


def test_update_raises_best_response(tiny_policy, ensemble):
    policy = tiny_policy.copy()
    batch = _batch(policy, ensemble, n=8)
    best = int(np.argmax(batch.rewards))
    before = float(np.sum(batch.logp_policy[best]))
    cfg = RlConfig(beta1=0.0, beta2=0.0)
    policy_update(policy, batch, UncertaintyTracker(), EmaBaseline(), nx.Adam(policy.parameters(), lr=1e-2), cfg)
    lp, _ = response_logprobs(policy, batch.prompts[best : best + 1], [batch.responses[best]])
    assert float(lp.data.sum()) > before


def test_beta2_zero_ignores_tracker_state(tiny_policy, ensemble):
    outs = []
    for prior in ([], [5.0, 7.0]):
        policy = tiny_policy.copy()
        tracker = UncertaintyTracker()
        tracker.update(prior)
        batch = _batch(policy, ensemble)
        policy_update(policy, batch, tracker, EmaBaseline(), nx.Adam(policy.parameters(), lr=1e-2), RlConfig(beta2=0.0))
        outs.append(policy.state_dict())
    for k in outs[0]:
        assert outs[0][k].tobytes() == outs[1][k].tobytes()


def test_clip_variant_runs(tiny_policy, ensemble):
    policy = tiny_policy.copy()
    batch = _batch(policy, ensemble)
    m = policy_update(policy, batch, UncertaintyTracker(), EmaBaseline(), nx.Adam(policy.parameters(), lr=1e-2), RlConfig(clip_eps=0.2))
    assert math.isfinite(m["loss"])


def test_gold_never_reaches_gradient(tiny_policy, ensemble):
    results = []
    for gold_shift in (0.0, 100.0):
        policy = tiny_policy.copy()
        batch = _batch(policy, ensemble)
        batch.gold = batch.gold + gold_shift
        policy_update(policy, batch, UncertaintyTracker(), EmaBaseline(), nx.Adam(policy.parameters(), lr=1e-2), RlConfig())
        results.append(policy.state_dict())
    for k in results[0]:
        assert results[0][k].tobytes() == results[1][k].tobytes()


# -- training loop -----------------------------------------------------------


def test_zero_steps_returns_copy(tiny_policy, ensemble):
    res = rl_train(tiny_policy, ensemble, PROMPTS, SPEC, RlConfig(steps=0))
    assert res.policy is not tiny_policy and res.trace == []
    for k, v in tiny_policy.state_dict().items():
        assert res.policy.state_dict()[k].tobytes() == v.tobytes()


def test_rl_train_deterministic_and_leaves_inputs(tiny_policy, ensemble):
    sft_before = {k: v.copy() for k, v in tiny_policy.state_dict().items()}
    e_before = {k: v.copy() for k, v in ensemble.state_dict().items()}
    cfg = RlConfig(steps=10, prompts_per_batch=4, lr=1e-2, checkpoint_every=5, seed=3)
    a = rl_train(tiny_policy, ensemble, PROMPTS, SPEC, cfg)
    b = rl_train(tiny_policy, ensemble, PROMPTS, SPEC, cfg)
    assert a.trace == b.trace
    for k, v in a.policy.state_dict().items():
        assert v.tobytes() == b.policy.state_dict()[k].tobytes()
    for k, v in tiny_policy.state_dict().items():
        assert v.tobytes() == sft_before[k].tobytes()
    for k, v in ensemble.state_dict().items():
        assert v.tobytes() == e_before[k].tobytes()
    assert [s for s, _ in a.checkpoints] == [0, 5, 10]
    assert a.trace[0].kl_measured == pytest.approx(0.0, abs=1e-10)
    assert all(r.kl_objective_value >= 0 for r in a.trace)


# -- one-step toy -----------------------------------------------------------


def test_one_step_policy_matches_closed_form():
    rng = np.random.default_rng(4)
    pi_d = rng.dirichlet(np.ones(8))
    r = rng.normal(size=8)
    target, _ = closed_form_policy(pi_d, r, 0.5)
    fitted = fit_one_step_policy(pi_d, r, 0.5)
    assert 0.5 * np.abs(fitted - target).sum() < 0.02
