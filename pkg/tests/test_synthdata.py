from __future__ import annotations

import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uprlhf.synthdata import (
    TaskSpec,
    build_bundle,
    gold_reward,
    read_preferences,
    read_prompts,
    read_sft,
    scripted_reference_policy,
    write_preferences,
    write_prompts,
    write_sft,
)

SPEC = TaskSpec()
EOS = SPEC.eos_id


def test_gold_reward_examples():
    assert gold_reward(SPEC, [1, 2, 3, 4, 5], [1, 2, 3, EOS]) == 6.0
    assert gold_reward(SPEC, [1, 2, 3, 4, 5], [7] * 10 + [EOS]) == -14.5
    assert gold_reward(SPEC, [1, 1, 2, 3, 4], [1, 1, EOS]) == 2.5


def _loop_gold(x, y):
    """Literal transcription: each prompt position may be claimed by one response token."""
    body = []
    for t in y:
        if t == EOS:
            break
        body.append(t)
    free = list(x)
    credited = []
    for t in body:
        if t in free:
            free.remove(t)
            credited.append(t)
    rep = 0
    for i in range(1, len(body)):
        if body[i] == body[i - 1]:
            rep += 1
    return 2.0 * len(credited) - 0.5 * max(0, len(body) - 8) - 1.5 * rep


@settings(max_examples=200, deadline=None)
@given(
    st.lists(st.integers(0, 15), min_size=5, max_size=5),
    st.lists(st.integers(0, 15), min_size=0, max_size=12),
    st.lists(st.integers(0, 17), max_size=4),
)
def test_gold_matches_loop_and_ignores_tail(x, body, tail):
    y = body + [EOS]
    assert gold_reward(SPEC, x, y) == _loop_gold(x, y)
    assert gold_reward(SPEC, x, y + tail) == gold_reward(SPEC, x, y)


def test_gold_upper_bound_by_brute_force():
    x = [0, 1, 2, 3, 4]
    best = -np.inf
    alphabet = [0, 1, 2, 3, 4, 5]
    for n in range(7):
        for body in itertools.product(alphabet, repeat=n):
            best = max(best, gold_reward(SPEC, x, list(body) + [EOS]))
    assert best == 10.0


@pytest.mark.parametrize("seed", range(20))
def test_noiseless_demonstrations(seed):
    rng = np.random.default_rng(seed)
    x = [int(t) for t in rng.choice(16, size=5, replace=False)]
    y = scripted_reference_policy(SPEC, x, 0.0, seed)
    body = y[:-1]
    assert y[-1] == EOS and 4 <= len(body) <= 6
    assert set(body) <= set(x)
    assert all(a != b for a, b in zip(body, body[1:]))
    assert gold_reward(SPEC, x, y) >= 8.0


def test_constant_prompt_forces_repeats():
    x = [3, 3, 3, 3, 3]
    y = scripted_reference_policy(SPEC, x, 0.0, 1)
    n = len(y) - 1
    assert gold_reward(SPEC, x, y) == 2.0 * min(n, 5) - 1.5 * (n - 1)


def test_full_noise_is_roughly_uniform():
    rng = np.random.default_rng(0)
    counts = np.zeros(16)
    for _ in range(3000):
        for t in scripted_reference_policy(SPEC, [0, 0, 0, 0, 0], 1.0, rng)[:-1]:
            counts[t] += 1
    freq = counts / counts.sum()
    assert np.abs(freq - 1 / 16).max() < 0.01


def test_noise_bounds():
    with pytest.raises(ValueError):
        scripted_reference_policy(SPEC, [1, 2, 3, 4, 5], 1.5, 0)


def test_scripted_policy_is_reproducible():
    assert scripted_reference_policy(SPEC, [1, 2, 3, 4, 5], 0.3, 9) == scripted_reference_policy(SPEC, [1, 2, 3, 4, 5], 0.3, 9)


@pytest.fixture(scope="module")
def bundle():
    return build_bundle(SPEC, 2000, seed=0)


def test_bundle_sizes(bundle):
    assert len(bundle.sft_set) == 400
    assert len(bundle.pref_set) + bundle.skipped == 800
    assert len(bundle.rl_prompts) == 800
    assert len(bundle.pref_test) == round(0.1 * len(bundle.pref_set))


def test_bundle_pools_are_disjoint(bundle):
    sft = {x for x, _ in bundle.sft_set}
    pref = {t.x for t in bundle.pref_set}
    rl = set(bundle.rl_prompts)
    assert not (sft & pref) and not (sft & rl) and not (pref & rl)


def test_every_triple_strictly_ordered(bundle):
    assert all(gold_reward(SPEC, t.x, t.y_w) > gold_reward(SPEC, t.x, t.y_l) for t in bundle.pref_set)


def test_bundle_is_deterministic(bundle):
    again = build_bundle(SPEC, 2000, seed=0)
    assert again.sft_set == bundle.sft_set and again.pref_set == bundle.pref_set
    assert build_bundle(SPEC, 2000, seed=1).sft_set != bundle.sft_set


def test_small_budget_rejected():
    with pytest.raises(ValueError):
        build_bundle(SPEC, 99)


def test_text_round_trips(tmp_path, bundle):
    write_sft(tmp_path / "s.txt", bundle.sft_set)
    write_preferences(tmp_path / "p.txt", bundle.pref_train)
    write_prompts(tmp_path / "r.txt", bundle.rl_prompts)
    assert read_sft(tmp_path / "s.txt") == bundle.sft_set
    assert read_preferences(tmp_path / "p.txt") == bundle.pref_train
    assert read_prompts(tmp_path / "r.txt") == bundle.rl_prompts
    first = (tmp_path / "p.txt").read_text().splitlines()[0]
    assert first.startswith("x:") and "\tw:" in first and "\tl:" in first


def test_malformed_record_rejected(tmp_path):
    (tmp_path / "bad.txt").write_text("x:1 2 3\tq:4 17\n")
    with pytest.raises(ValueError):
        read_sft(tmp_path / "bad.txt")
