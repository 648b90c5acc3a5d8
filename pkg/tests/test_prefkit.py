import math

import numpy as np
import pytest
from conftest import tiny_model
from hypothesis import given
from hypothesis import strategies as st

from hybridlm.checkpoint import loads, serialize
from hybridlm.compress import PruneSpec, importance_scores, prune_structured
from hybridlm.errors import InputError, SchemaError
from hybridlm.prefkit import (DpoHyper, PreferencePair, dpo_loss, dpo_margin, filter_by_reward_gap,
                              merge_weighted, read_pairs, select_pair, write_pairs)


def pair(lw=-10.0, ll=-12.0, rw=-11.0, rl=-11.0, nw=10, nl=10, gw=1.0, gl=0.0):
    return PreferencePair(4, nw, nl, lw, ll, rw, rl, gw, gl)


def test_ln2_at_policy_equals_reference():
    p = pair(-5.0, -7.0, -5.0, -7.0)
    loss, _ = dpo_loss(p, DpoHyper(0.1, 0.0, 0.0))
    assert abs(loss - math.log(2)) <= 1e-9


def test_length_penalty_monotone_grid():
    hp = DpoHyper(0.5, 0.05, 0.0)
    for ratio in np.linspace(-2, 2, 9):
        for base in (5, 20, 80):
            equal = dpo_loss(pair(-10 + ratio, -10, -10, -10, base, base), hp)[0]
            longer = [dpo_loss(pair(-10 + ratio, -10, -10, -10, base + d, base), hp)[0]
                      for d in (1, 3, 9)]
            assert equal < longer[0] < longer[1] < longer[2]


def _fd(fn, x, eps=1e-6):
    return (fn(x + eps) - fn(x - eps)) / (2 * eps)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(9)
    for _ in range(30):
        lw, ll, rw, rl = -rng.uniform(1, 40, 4)
        nw, nl = rng.integers(1, 60, 2)
        hp = DpoHyper(rng.uniform(0.01, 1), rng.uniform(0, 0.1), rng.uniform(0, 1))
        base = dict(lw=lw, ll=ll, rw=rw, rl=rl, nw=int(nw), nl=int(nl))
        _, g = dpo_loss(pair(**base), hp)
        for field, key in (("policy_logp_chosen", "lw"), ("policy_logp_rejected", "ll"),
                           ("ref_logp_chosen", "rw"), ("ref_logp_rejected", "rl")):
            def f(v, key=key):
                return dpo_loss(pair(**{**base, key: min(v, 0.0)}), hp)[0]
            fd = _fd(f, base[key])
            an = getattr(g, field)
            assert abs(an - fd) <= 1e-6 * max(1.0, abs(fd))


@given(st.floats(-50, 50), st.floats(0, 0.1), st.floats(0, 1), st.integers(1, 50), st.integers(1, 50))
def test_loss_positive_and_gradient_signs(delta, alpha, gamma, nw, nl):
    p = pair(-20 + delta / 10, -20, -20, -20, nw, nl)
    loss, g = dpo_loss(p, DpoHyper(0.3, alpha, gamma))
    assert loss > 0
    assert g.policy_logp_chosen < 0 and g.policy_logp_rejected > 0


def test_loss_vanishes_with_large_margin_and_is_convex():
    hp = DpoHyper(1.0, 0.0, 0.0)
    assert dpo_loss(pair(-1, -200, -100, -100), hp)[0] < 1e-30
    ms = np.linspace(-10, 10, 81)
    losses = [dpo_loss(pair(-50 + m / 2, -50 - m / 2, -50, -50), hp)[0] for m in ms]
    assert np.allclose([dpo_margin(pair(-50 + m / 2, -50 - m / 2, -50, -50), hp) for m in ms], ms)
    second = np.diff(losses, 2)
    assert np.all(second >= -1e-12)


def test_pair_validation():
    with pytest.raises(InputError):
        pair(nw=0)
    with pytest.raises(InputError):
        pair(lw=0.5)
    with pytest.raises(InputError):
        DpoHyper(beta=0)


def test_filter_examples():
    pairs = [pair(gw=g, gl=0.0) for g in (0.1, 0.5, 0.9)]
    assert filter_by_reward_gap(pairs, 0) == pairs
    assert filter_by_reward_gap(pairs, 0.5) == pairs[1:]


@given(st.lists(st.floats(0, 5), max_size=30), st.floats(0, 5))
def test_filter_matches_predicate(gaps, m):
    pairs = [pair(gw=g, gl=0.0) for g in gaps]
    assert filter_by_reward_gap(pairs, m) == [p for p in pairs if p.reward_chosen - p.reward_rejected >= m]


def test_select_pair_extremes():
    c = [dict(len=5, policy_logp=-3.0, ref_logp=-3.5, reward=r) for r in (0.2, 0.9, -0.4, 0.5)]
    p = select_pair(2, c)
    assert (p.reward_chosen, p.reward_rejected) == (0.9, -0.4)


def test_pair_file_round_trip(tmp_path):
    pairs = [pair(gw=g) for g in (0.3, 1.5)]
    write_pairs(pairs, tmp_path / "p.jsonl")
    assert read_pairs(tmp_path / "p.jsonl") == pairs


def test_merge_one_zero_is_first():
    a, b = tiny_model("MA", 4, seed=1), tiny_model("MA", 4, seed=2)
    m = merge_weighted([a, b], [1.0, 0.0])
    assert all(np.array_equal(m.tensors[n], a.tensors[n]) for n in a.tensors)


def test_merge_half_is_mean():
    a, b = tiny_model("MA", 4, seed=1), tiny_model("MA", 4, seed=2)
    m = merge_weighted([a, b], [0.5, 0.5])
    for n in a.tensors:
        assert np.max(np.abs(m.tensors[n] - (a.tensors[n] + b.tensors[n]) / 2)) <= 1e-7


def test_merge_three_simplex_matches_f64():
    cks = [tiny_model("MA", 4, seed=s) for s in (1, 2, 3)]
    lam = np.random.default_rng(0).dirichlet(np.ones(3))
    lam[-1] = 1.0 - lam[0] - lam[1]
    m = merge_weighted(cks, lam)
    for n in cks[0].tensors:
        ref = sum(l * c.tensors[n].astype(np.float64) for l, c in zip(lam, cks))
        assert np.max(np.abs(m.tensors[n] - ref)) <= 1e-6


def test_merge_errors():
    a = tiny_model("MA", 4)
    with pytest.raises(InputError):
        merge_weighted([a, a], [0.5, 0.6])
    with pytest.raises(SchemaError):
        merge_weighted([a, tiny_model("MA", 4, d_ff=8)], [0.5, 0.5])


def test_merge_identical_is_bitwise():
    a = tiny_model("MAMA", 4, seed=5)
    m = merge_weighted([a, a.copy()], [0.3, 0.7])
    assert m.content_hash() == a.content_hash()


def test_merge_commutes_with_keep_all_prune_and_serialization():
    a, b = tiny_model("MA", 4, seed=1), tiny_model("MA", 4, seed=2)
    lam = [0.25, 0.75]
    merged = merge_weighted([a, b], lam)
    cfg = a.config
    spec = PruneSpec(cfg.d_ff, cfg.n_heads, cfg.d_inner, cfg.d_model)
    t = np.arange(20) % 32
    pruned_first = merge_weighted([prune_structured(c, importance_scores(c, t), spec) for c in (a, b)], lam)
    assert pruned_first.content_hash() == merged.content_hash()
    reloaded = merge_weighted([loads(serialize(a)), loads(serialize(b))], lam)
    assert loads(serialize(merged)).content_hash() == reloaded.content_hash()
