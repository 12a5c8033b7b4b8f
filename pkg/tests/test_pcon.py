import csv
import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import numeric_grad, rel_error
from wpcl.optim import SGD
from wpcl.pcon import (
    ContrastBatch,
    ContrastItem,
    PconConfig,
    alignment_gap,
    cosine_q,
    partial_infonce,
    partial_infonce_backward,
    pcon_head_grad,
    pcon_train_step,
    sample_batch,
    write_loss_log,
)
from wpcl.representation import HeadParams, head_forward
from wpcl.weaksup import PairSet


def random_batch(rng, n_rows, n_items, K):
    items = []
    for _ in range(n_items):
        idx = rng.choice(n_rows, size=2 + K, replace=False)
        items.append(ContrastItem(int(idx[0]), int(idx[1]), tuple(int(k) for k in idx[2:])))
    return ContrastBatch(tuple(items), K)


def naive_loss(batch, F, tau):
    """Per-item loop in mpmath with explicit cosines."""
    total = mpmath.mpf(0)
    for it in batch.items:
        def q(a, b):
            fa, fb = [mpmath.mpf(float(x)) for x in F[a]], [mpmath.mpf(float(x)) for x in F[b]]
            dot = mpmath.fsum(x * y for x, y in zip(fa, fb))
            na = mpmath.sqrt(mpmath.fsum(x * x for x in fa))
            nb = mpmath.sqrt(mpmath.fsum(x * x for x in fb))
            return mpmath.e ** (dot / (tau * na * nb))
        pos = q(it.anchor, it.positive)
        total += -mpmath.log(pos / (pos + mpmath.fsum(q(it.anchor, k) for k in it.negatives)))
    return total / len(batch.items)


def test_cosine_q_examples():
    v = np.array([0.3, -1.2, 2.0])
    assert cosine_q(v, v, 1.0) == pytest.approx(math.e, abs=1e-12)
    assert cosine_q(np.array([1.0, 0.0]), np.array([0.0, 3.0]), 0.2) == pytest.approx(1.0)
    expect = float(mpmath.e ** ((1 / mpmath.sqrt(2)) / mpmath.mpf("0.5")))
    assert cosine_q(np.array([1.0, 0.0]), np.array([1.0, 1.0]), 0.5) == pytest.approx(expect, abs=1e-12)
    assert expect == pytest.approx(4.1132, abs=1e-4)


def test_cosine_q_zero_vector_warns(caplog):
    with caplog.at_level("WARNING"):
        assert cosine_q(np.zeros(3), np.ones(3), 0.1) == 1.0
    assert "zero vector" in caplog.text


def test_k_zero_loss_and_grad_exactly_zero(rng):
    F = rng.normal(size=(6, 4))
    batch = ContrastBatch((ContrastItem(0, 1, ()), ContrastItem(2, 3, ())), 0)
    assert partial_infonce(batch, F, 0.07).loss == 0.0
    assert not partial_infonce_backward(batch, F, 0.07).any()


def test_closed_form_identical_positive_orthogonal_negative():
    F = np.array([[1.0, 0.0], [2.0, 0.0], [0.0, 5.0]])
    batch = ContrastBatch((ContrastItem(0, 1, (2,)),), 1)
    expect = -mpmath.log(mpmath.e / (mpmath.e + 1))
    assert abs(partial_infonce(batch, F, 1.0).loss - float(expect)) <= 1e-9
    assert float(expect) == pytest.approx(0.31326, abs=1e-5)


@pytest.mark.parametrize("K", [1, 4, 8])
def test_random_features_near_log_k_plus_one(K, rng):
    losses = []
    for _ in range(100):
        F = rng.normal(size=(2 + K, 256))
        losses.append(partial_infonce(random_batch(rng, 2 + K, 1, K), F, 1.0).loss)
    assert abs(np.mean(losses) - math.log(K + 1)) <= 0.1


@pytest.mark.parametrize("seed", range(10))
def test_loss_matches_mpmath_oracle(seed):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(12, 6))
    batch = random_batch(rng, 12, 5, int(rng.integers(0, 5)))
    tau = float(rng.uniform(0.05, 1.0))
    assert partial_infonce(batch, F, tau).loss == pytest.approx(float(naive_loss(batch, F, tau)), rel=1e-10, abs=1e-12)


@pytest.mark.parametrize("seed", range(50))
def test_feature_gradient_finite_differences(seed):
    rng = np.random.default_rng(seed)
    d, K = int(rng.integers(2, 17)), int(rng.integers(0, 5))
    n = K + 2 + int(rng.integers(0, 6))
    F = rng.normal(size=(n, d))
    batch = random_batch(rng, n, int(rng.integers(1, 5)), K)
    tau, sym = float(rng.uniform(0.07, 1.0)), bool(seed % 2)
    g = partial_infonce_backward(batch, F, tau, sym)
    num = numeric_grad(lambda: partial_infonce(batch, F, tau, sym).loss, F)
    assert rel_error(g, num) <= 1e-4 if np.abs(num).max() > 0 else not g.any()


@pytest.mark.parametrize("hidden", [None, 6])
def test_head_gradient_finite_differences(hidden):
    rng = np.random.default_rng(3)
    head = HeadParams.init(8, 10, 0.4, hidden, seed=4)
    Z = rng.normal(size=(9, 8))
    batch = random_batch(rng, 9, 4, 3)
    cfg = PconConfig(tau=0.2)
    _, grads = pcon_head_grad(head, Z, batch, cfg)
    for k, arr in head.arrays().items():
        num = numeric_grad(lambda: pcon_head_grad(head, Z, batch, cfg)[0].loss, arr)
        assert rel_error(grads[k], num) <= 1e-4


def test_unreferenced_rows_get_zero_gradient(rng):
    F = rng.normal(size=(10, 5))
    batch = ContrastBatch((ContrastItem(0, 1, (2, 3)),), 2)
    g = partial_infonce_backward(batch, F, 0.1)
    assert not g[4:].any() and g[:4].any()


def test_flex_coordinates_do_not_matter(rng):
    head = HeadParams.init(8, 10, 0.2, seed=0)
    Z = rng.normal(size=(6, 8))
    batch = random_batch(rng, 6, 3, 2)
    H, _ = head_forward(head, Z)
    k = head.obj_dim
    base = partial_infonce(batch, H[:, :k], 0.07).loss
    H2 = H.copy()
    H2[:, k:] += rng.normal(size=H2[:, k:].shape) * 100
    assert partial_infonce(batch, H2[:, :k], 0.07).loss == base
    _, grads = pcon_head_grad(head, Z, batch, PconConfig())
    assert not grads["W1"][k:].any() and not grads["b1"][k:].any()


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(0.05, 2.0), st.floats(0.01, 100.0))
def test_nonnegative_and_scale_invariant(seed, tau, c):
    rng = np.random.default_rng(seed)
    F = rng.normal(size=(8, 4))
    batch = random_batch(rng, 8, 3, int(rng.integers(0, 5)))
    loss = partial_infonce(batch, F, tau).loss
    assert loss >= 0.0
    F2 = F.copy()
    F2[int(rng.integers(8))] *= c
    assert partial_infonce(batch, F2, tau).loss == pytest.approx(loss, rel=1e-9, abs=1e-12)


def test_index_out_of_range():
    with pytest.raises(IndexError):
        partial_infonce(ContrastBatch((ContrastItem(0, 5, ()),), 0), np.ones((3, 2)), 0.1)


def test_sample_batch_clamps_and_records_k_eff(rng):
    pairs = PairSet(((0, 1), (2, 3)), ((), (4, 5, 6)))
    b = sample_batch(pairs, 8, rng)
    assert [it.k_eff for it in b.items] == [0, 3]
    assert b.items[1].negatives == (4, 5, 6)
    b2 = sample_batch(pairs, 2, rng)
    assert b2.items[1].k_eff == 2 and len(set(b2.items[1].negatives)) == 2


def test_sample_batch_uniform_chi_square():
    rng = np.random.default_rng(0)
    pairs = PairSet(((0, 1),), (tuple(range(2, 12)),))
    counts = np.zeros(12)
    draws = 10_000
    for _ in range(draws):
        for k in sample_batch(pairs, 3, rng).items[0].negatives:
            counts[k] += 1
    obs = counts[2:]
    exp = draws * 3 / 10
    chi2 = float(((obs - exp) ** 2 / exp).sum())
    assert chi2 < 27.88  # 99.9th percentile, 9 degrees of freedom
    assert np.all(np.abs(obs - exp) <= 3 * np.sqrt(exp))


def test_zero_learning_rate_leaves_params(rng):
    head = HeadParams.init(8, 10, seed=0)
    Z = rng.normal(size=(6, 8))
    new, _ = pcon_train_step(head, Z, random_batch(rng, 6, 2, 2), PconConfig(learning_rate=0.0))
    assert all(np.array_equal(new.arrays()[k], v) for k, v in head.arrays().items())


def test_repeated_batch_loss_decreases(rng):
    head = HeadParams.init(16, 20, 0.2, seed=1)
    Z = rng.normal(size=(10, 16))
    batch = random_batch(rng, 10, 4, 3)
    cfg = PconConfig(learning_rate=0.05)
    opt = SGD(cfg.learning_rate)
    losses = []
    for _ in range(200):
        head, rep = pcon_train_step(head, Z, batch, cfg, opt)
        losses.append(rep.loss)
    tail = losses[-20:]
    assert all(b <= a + 1e-12 for a, b in zip(tail, tail[1:]))
    assert losses[-1] < losses[0]


def test_first_order_taylor(rng):
    head = HeadParams.init(8, 10, 0.3, seed=2)
    Z = rng.normal(size=(8, 8))
    batch = random_batch(rng, 8, 4, 3)
    cfg = PconConfig(tau=0.2, learning_rate=1e-6)
    rep, grads = pcon_head_grad(head, Z, batch, cfg)
    new, _ = pcon_train_step(head, Z, batch, cfg)
    actual = pcon_head_grad(new, Z, batch, cfg)[0].loss - rep.loss
    predicted = -1e-6 * sum(float((g * g).sum()) for g in grads.values())
    assert abs(actual - predicted) <= 0.1 * abs(predicted)


def test_alignment_gap_and_stats():
    F = np.array([[1.0, 0.0], [1.0, 0.1], [0.0, 1.0]])
    pos, neg = alignment_gap(F, PairSet(((0, 1),), ((2,),)))
    assert pos == pytest.approx(1 / math.sqrt(1.01)) and neg == pytest.approx(0.0)
    rep = partial_infonce(ContrastBatch((ContrastItem(0, 1, (2,)),), 1), F, 1.0)
    assert rep.pos_cos_mean == pytest.approx(pos) and rep.n_items == 1


def test_loss_log_columns(tmp_path, rng):
    F = rng.normal(size=(5, 3))
    rep = partial_infonce(random_batch(rng, 5, 2, 2), F, 0.5)
    write_loss_log(tmp_path / "log.csv", [rep, rep])
    rows = list(csv.reader(open(tmp_path / "log.csv")))
    assert rows[0] == ["step", "loss", "grad_norm", "pos_cos_mean", "neg_cos_mean"]
    assert len(rows) == 3 and float(rows[1][1]) == rep.loss


def test_config_validation():
    with pytest.raises(ValueError):
        PconConfig(tau=0)
    with pytest.raises(ValueError):
        PconConfig(K=-1)
