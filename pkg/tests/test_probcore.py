import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lrd.probcore import (
    INF_KL,
    NucleusResult,
    entropy,
    entropy_rows,
    forward_mask,
    forward_step,
    kl,
    kl_rows,
    linear_schedule,
    normalized_entropy,
    schedule_from_betas,
    top_p_nucleus,
    true_posterior,
    vocab_normalized_entropy,
)

MASK = 9


def categoricals(min_size=1, max_size=8, allow_zeros=True):
    lo = 0.0 if allow_zeros else 1e-3
    return st.lists(st.floats(lo, 1.0), min_size=min_size, max_size=max_size).filter(
        lambda w: sum(w) > 1e-6).map(lambda w: np.asarray(w) / np.sum(w))


def nucleus_oracle(p, thresh):
    """Plain-python minimal prefix: sort by (-p, id), accumulate until the mass is reached."""
    order = sorted(range(len(p)), key=lambda i: (-p[i], i))
    order = [i for i in order if p[i] > 0]
    if thresh >= 1.0:
        return order
    acc = 0.0
    for n, i in enumerate(order, 1):
        acc += p[i]
        if acc >= thresh - 1e-12:
            return order[:n]
    return order


# ------------------------------------------------------------ schedules


def test_schedule_examples():
    assert schedule_from_betas([0, 0, 0]).alphas.tolist() == [1, 1, 1, 1]
    assert schedule_from_betas([0.5, 0.5]).alphas.tolist() == [1, 0.5, 0.25]
    assert schedule_from_betas([1.0, 0.3]).alphas.tolist() == [1, 0, 0]


@pytest.mark.parametrize("bad", [[-0.1], [1.5], [0.2, float("nan")]])
def test_schedule_rejects_bad_betas(bad):
    with pytest.raises(ValueError):
        schedule_from_betas(bad)


def test_schedule_length_check():
    with pytest.raises(ValueError):
        schedule_from_betas([0.1, 0.2], T=3)


@given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=10))
def test_schedule_is_running_product(betas):
    s = schedule_from_betas(betas)
    acc = 1.0
    assert s[0] == 1.0
    for t, b in enumerate(betas, 1):
        acc *= 1.0 - b
        assert s[t] == pytest.approx(acc, abs=1e-15)
    assert np.all(np.diff(s.alphas) <= 0)


def test_linear_schedule():
    s = linear_schedule(4)
    assert s.alphas.tolist() == [1.0, 0.75, 0.5, 0.25, 0.0]
    assert s.T == 4


# -------------------------------------------------------- forward process


def test_forward_mask_extremes(rng):
    x0 = np.arange(6)
    s = schedule_from_betas([0.0, 1.0])
    assert np.array_equal(forward_mask(x0, 1, s, rng, MASK), x0)
    assert np.all(forward_mask(x0, 2, s, rng, MASK) == MASK)


def test_forward_mask_binomial():
    s = schedule_from_betas([0.3])
    out = forward_mask(np.zeros(1000, dtype=int), 1, s, np.random.default_rng(7), MASK)
    sigma = math.sqrt(1000 * 0.3 * 0.7)
    assert abs(np.sum(out == MASK) - 300) <= 3 * sigma


def test_forward_mask_deterministic_and_maskable():
    s = linear_schedule(10)
    x0 = np.arange(8)
    a = forward_mask(x0, 7, s, np.random.default_rng(1), MASK)
    b = forward_mask(x0, 7, s, np.random.default_rng(1), MASK)
    assert np.array_equal(a, b)
    keep = np.array([False] * 4 + [True] * 4)
    c = forward_mask(x0, 10, s, np.random.default_rng(1), MASK, maskable=keep)
    assert np.array_equal(c[:4], x0[:4]) and np.all(c[4:] == MASK)


def test_forward_mask_rejects_bad_t(rng):
    with pytest.raises(ValueError):
        forward_mask([1, 2], 3, linear_schedule(2), rng, MASK)


def test_stepwise_chain_matches_cumulative_survival():
    betas = [0.1, 0.25, 0.4, 0.05]
    s = schedule_from_betas(betas)
    rng = np.random.default_rng(11)
    n = 200_000
    x = np.zeros(n, dtype=int)
    for t, b in enumerate(betas, 1):
        x = forward_step(x, b, rng, MASK)
        kept = np.mean(x != MASK)
        sigma = math.sqrt(s[t] * (1 - s[t]) / n)
        assert abs(kept - s[t]) <= 4 * sigma


# -------------------------------------------------------- true posterior


def test_true_posterior_examples():
    b = true_posterior(1.0, 0.5, 3)
    assert (b.p_x0, b.p_mask, b.x0_token) == (1.0, 0.0, 3)
    b = true_posterior(0.5, 0.5, 3)
    assert (b.p_x0, b.p_mask) == (0.0, 1.0)
    b = true_posterior(0.8, 0.5, 3)
    assert b.p_x0 == pytest.approx(0.6, abs=1e-15)
    assert b.p_mask == pytest.approx(0.4, abs=1e-15)


@pytest.mark.parametrize("args", [(1.0, 1.0), (0.4, 0.5), (1.2, 0.5), (0.5, -0.1)])
def test_true_posterior_rejects(args):
    with pytest.raises(ValueError):
        true_posterior(*args, 0)


@given(st.floats(0, 1), st.floats(0, 1))
def test_true_posterior_sums_to_one(a, b):
    hi, lo = max(a, b), min(a, b)
    if lo >= 1.0:
        return
    post = true_posterior(hi, lo, 0)
    assert post.p_x0 + post.p_mask == 1.0
    assert 0.0 <= post.p_mask <= 1.0
    assert post.p_x0 == pytest.approx((hi - lo) / (1 - lo), abs=1e-12)


def test_true_posterior_matches_simulation():
    rng = np.random.default_rng(5)
    a_prev, a_cur = 0.7, 0.3
    n = 200_000
    alive_prev = rng.random(n) < a_prev
    alive_cur = alive_prev & (rng.random(n) < a_cur / a_prev)
    masked = ~alive_cur
    freq = alive_prev[masked].mean()
    expected = true_posterior(a_prev, a_cur, 0).p_x0
    sigma = math.sqrt(expected * (1 - expected) / masked.sum())
    assert abs(freq - expected) <= 3 * sigma


# ------------------------------------------------------------- entropy


def test_entropy_examples():
    assert entropy([0, 1, 0]) == 0.0
    assert entropy([0.25] * 4) == pytest.approx(1.38629, abs=1e-5)
    assert entropy([0.5, 0.5, 0, 0]) == pytest.approx(0.69315, abs=1e-5)


@given(categoricals())
def test_entropy_bounds_and_rows(p):
    h = entropy(p)
    assert -1e-12 <= h <= math.log(p.size) + 1e-9
    assert entropy_rows(p[None])[0] == pytest.approx(h, abs=1e-12)


def test_normalized_entropy_examples():
    one = NucleusResult(np.array([4]), np.array([1.0]))
    assert normalized_entropy(one) == 0.0
    uni = NucleusResult(np.arange(5), np.full(5, 0.2))
    assert normalized_entropy(uni) == pytest.approx(1.0, abs=1e-15)
    two = NucleusResult(np.array([0, 1]), np.array([2 / 3, 1 / 3]))
    assert normalized_entropy(two) == pytest.approx(0.91830, abs=1e-5)


@given(categoricals(allow_zeros=False))
def test_normalized_entropy_in_unit_interval(p):
    nuc = NucleusResult(np.arange(p.size), p)
    assert 0.0 <= normalized_entropy(nuc) <= 1.0


def test_vocab_normalized_entropy():
    assert vocab_normalized_entropy(np.full(6, 1 / 6)) == pytest.approx(1.0)
    assert vocab_normalized_entropy([0.0, 1.0, 0.0]) == 0.0


# ----------------------------------------------------------------- KL


def test_kl_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert kl(p, p) == 0.0
    assert kl([1, 0, 0, 0], [0.25] * 4) == pytest.approx(math.log(4), abs=1e-15)
    # 0.9 ln 1.8 + 0.1 ln 0.2, evaluated by hand: 0.368064
    assert kl([0.9, 0.1], [0.5, 0.5]) == pytest.approx(0.368064, abs=1e-6)
    assert kl([0.9, 0.1], [0.5, 0.5]) == pytest.approx(
        0.9 * math.log(1.8) + 0.1 * math.log(0.2), abs=1e-15)


def test_kl_infinite_sentinel():
    assert kl([0.5, 0.5], [1.0, 0.0]) is INF_KL
    assert math.isfinite(kl([0.5, 0.5], [1.0, 0.0], smoothing=1e-10))


def test_kl_dimension_mismatch():
    with pytest.raises(ValueError):
        kl([0.5, 0.5], [0.2, 0.3, 0.5])
    with pytest.raises(ValueError):
        kl_rows(np.ones((2, 3)) / 3, np.ones((3, 3)) / 3)


def test_kl_smoothing_renormalizes():
    p, q = np.array([1.0, 0.0]), np.array([0.5, 0.5])
    eps = 1e-3
    ps = (p + eps) / (1 + 2 * eps)
    qs = (q + eps) / (1 + 2 * eps)
    want = sum(a * math.log(a / b) for a, b in zip(ps, qs))
    assert kl(p, q, eps) == pytest.approx(want, rel=1e-12)


@given(categoricals(2, 6), categoricals(2, 6, allow_zeros=False))
def test_kl_nonnegative_and_finite(p, q):
    if p.size != q.size:
        return
    v = kl(p, q)
    assert math.isfinite(v) and v >= 0.0
    assert kl(p, p) == 0.0
    assert kl_rows(p[None], q[None], 1e-10)[0] == pytest.approx(kl(p, q, 1e-10), abs=1e-12)


# ------------------------------------------------------------ nucleus


def test_nucleus_examples():
    r = top_p_nucleus([0.6, 0.3, 0.08, 0.02], 0.9)
    assert r.support.tolist() == [0, 1]
    assert np.allclose(r.renorm_probs, [2 / 3, 1 / 3], atol=1e-15)
    r = top_p_nucleus([0.5, 0.0, 0.3, 0.2], 1.0)
    assert sorted(r.support.tolist()) == [0, 2, 3]
    assert np.allclose(r.renorm_probs, [0.5, 0.3, 0.2])
    assert top_p_nucleus([0, 0, 1.0], 0.9).support.tolist() == [2]


def test_nucleus_tie_break_by_id():
    r = top_p_nucleus([0.25, 0.25, 0.25, 0.25], 0.5)
    assert r.support.tolist() == [0, 1]


@pytest.mark.parametrize("t", [0.0, -0.5, 1.5])
def test_nucleus_rejects_threshold(t):
    with pytest.raises(ValueError):
        top_p_nucleus([0.5, 0.5], t)


@settings(max_examples=200)
@given(categoricals(), st.floats(0.01, 1.0))
def test_nucleus_matches_oracle(p, thresh):
    r = top_p_nucleus(p, thresh)
    assert r.support.tolist() == nucleus_oracle(p.tolist(), thresh)
    assert r.renorm_probs.sum() == pytest.approx(1.0, abs=1e-12)


@given(categoricals(), st.floats(0.01, 1.0))
def test_nucleus_deterministic_and_idempotent(p, thresh):
    a = top_p_nucleus(p, thresh)
    b = top_p_nucleus(p, thresh)
    assert np.array_equal(a.support, b.support)
    # re-truncating the distribution restricted to the nucleus keeps it unchanged
    restricted = np.zeros_like(p)
    restricted[a.support] = p[a.support]
    again = top_p_nucleus(restricted, thresh)
    assert np.array_equal(again.support, a.support)
    assert np.allclose(again.renorm_probs, a.renorm_probs, atol=1e-15)
