import math
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from lrdistill import losses as L
from lrdistill import tensor as T
from lrdistill.exceptions import PreconditionError, ShapeError
from lrdistill.tensor import Tensor

from oracles import ce_scalar, kd_scalar, rcd_scalar

pytestmark = pytest.mark.usefixtures("f64")


def t(v):
    return Tensor(np.asarray(v, dtype=np.float64), dtype=np.float64)


# ---- feature regression


def test_gen_identity_is_zero(rng):
    x = rng.standard_normal((4, 6))
    assert L.gen_loss(t(x), t(x)).item() == 0.0


def test_gen_hand_value():
    s = t([[1.0, 0.0], [0.0, 2.0]])
    assert L.gen_loss(s, t(np.zeros((2, 2)))).item() == 5.0
    assert L.gen_loss(s, t(np.zeros((2, 2))), reduction="mean").item() == 2.5


def test_gen_shape_mismatch():
    with pytest.raises(ShapeError):
        L.gen_loss(t(np.zeros((2, 3))), t(np.zeros((3, 2))))


def test_gen_teacher_gets_no_gradient():
    s = Tensor(np.ones((2, 2)), requires_grad=True, dtype=np.float64)
    tea = Tensor(np.zeros((2, 2)), requires_grad=True, dtype=np.float64)
    T.backward(L.gen_loss(s, tea))
    assert tea.grad is None
    np.testing.assert_array_equal(s.grad, 2.0)


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, (5, 3), elements=st.floats(-10, 10)), arrays(np.float64, (5, 3), elements=st.floats(-10, 10)),
       st.permutations(range(5)))
def test_gen_nonnegative_and_permutation_invariant(a, b, perm):
    base = L.gen_loss(t(a), t(b)).item()
    assert base >= 0
    assert (base == 0) == np.array_equal(a, b)
    perm = list(perm)
    assert L.gen_loss(t(a[perm]), t(b[perm])).item() == pytest.approx(base, rel=1e-12, abs=1e-12)


# ---- relational contrastive term


@pytest.mark.parametrize("s,b,expected", [(0.0, 1, 0.405465), (1.0, 1, 0.040223), (0.0, 0, 1.098612)])
def test_rcd_scalar_examples(s, b, expected):
    got = L.rcd_from_scores(t([s]), [b], tau=0.4, n=1, m=2).item()
    assert got == pytest.approx(rcd_scalar([s], [b], 0.4, 1, 2), abs=1e-12)
    assert round(got, 6) == expected


def test_rcd_exact_closed_forms():
    assert L.rcd_from_scores(t([0.0]), [1], 0.4, n=1, m=2).item() == pytest.approx(-math.log(1 / 1.5), abs=1e-12)
    pos = -math.log(math.exp(2.5) / (math.exp(2.5) + 0.5))
    assert L.rcd_from_scores(t([1.0]), [1], 0.4, n=1, m=2).item() == pytest.approx(pos, abs=1e-12)
    assert L.rcd_from_scores(t([0.0]), [0], 0.4, n=1, m=2).item() == pytest.approx(-math.log(1 - 1 / 1.5), abs=1e-12)


def test_rcd_matches_scalar_oracle_on_batches(rng):
    for _ in range(20):
        m = int(rng.integers(2, 12))
        b = rng.integers(0, 2, size=m)
        b[0], b[1] = 1, 0
        s = rng.uniform(-1, 1, size=m)
        n = int((b == 0).sum())
        got = L.rcd_from_scores(t(s), b, tau=0.4, n=n, m=m).item()
        assert got == pytest.approx(rcd_scalar(s, b, 0.4, n, m), rel=1e-12)
        mean = L.rcd_from_scores(t(s), b, tau=0.4, n=n, m=m, reduction="mean").item()
        assert mean == pytest.approx(got / m, rel=1e-12)


def test_rcd_loss_through_projections(rng):
    from lrdistill.model import Projection, project

    h1, h2 = Projection(4, 3, rng), Projection(4, 3, rng)
    h1.fc.weight.data = h1.fc.weight.data.astype(np.float64)
    h2.fc.weight.data = h2.fc.weight.data.astype(np.float64)
    vt, vts = t(rng.standard_normal((4, 4))), t(rng.standard_normal((4, 4)))
    b = np.array([1, 1, 0, 0])
    got = L.rcd_loss(vt, vts, b, tau=0.4, n=2, m=4, h1=h1, h2=h2).item()
    s = (project(h1, vt).data * project(h2, vts).data).sum(axis=1)
    assert got == pytest.approx(rcd_scalar(s, b, 0.4, 2, 4), rel=1e-12)


@pytest.mark.parametrize("kw", [dict(tau=0.0), dict(tau=-1.0), dict(n=0, m=1)])
def test_rcd_preconditions(kw):
    args = dict(tau=0.4, n=1, m=2)
    args.update(kw)
    with pytest.raises(PreconditionError):
        L.rcd_from_scores(t([0.1]), [1], **args)


def test_rcd_empty_batch():
    with pytest.raises(PreconditionError):
        L.rcd_from_scores(t(np.zeros(0)), np.zeros(0), tau=0.4, n=1, m=0)


def test_rcd_clamps_and_counts():
    counter = Counter()
    # s/tau = 100 makes q round to 1 in the negative term
    val = L.rcd_from_scores(t([40.0]), [0], tau=0.4, n=1, m=2, counter=counter).item()
    assert counter["rcd_q_clamped"] == 1
    assert val == pytest.approx(-math.log1p(-(1 - 1e-12)), rel=1e-9)
    assert np.isfinite(val)


@settings(max_examples=100, deadline=None)
@given(st.floats(-1, 1), st.floats(1e-3, 0.5), st.sampled_from([0, 1]))
def test_rcd_monotone_in_score(s, ds, b):
    lo = L.rcd_from_scores(t([s]), [b], 0.4, n=1, m=2).item()
    hi = L.rcd_from_scores(t([s + ds]), [b], 0.4, n=1, m=2).item()
    if b == 1:
        assert hi < lo
    else:
        assert hi > lo


# ---- logit distillation and classification


def test_kd_identity_is_zero(rng):
    z = rng.standard_normal((3, 5))
    assert L.kd_loss(t(z), z, 4.0).item() == pytest.approx(0.0, abs=1e-12)


def test_kd_hand_value():
    got = L.kd_loss(t([[0.0, 2.0]]), np.array([[2.0, 0.0]]), 1.0).item()
    p1 = math.exp(2) / (math.exp(2) + 1)
    assert got == pytest.approx((p1 - (1 - p1)) * 2, abs=1e-12)
    assert got == pytest.approx(1.523188, abs=1e-6)


def test_kd_matches_scalar_oracle(rng):
    zs, zt = rng.standard_normal((4, 6)) * 3, rng.standard_normal((4, 6)) * 3
    for temp in (0.5, 1.0, 4.0):
        assert L.kd_loss(t(zs), zt, temp).item() == pytest.approx(kd_scalar(zs, zt, temp), rel=1e-10)


def test_kd_preconditions():
    with pytest.raises(PreconditionError):
        L.kd_loss(t([[0.0, 1.0]]), np.array([[0.0, 1.0]]), 0.0)
    with pytest.raises(ShapeError):
        L.kd_loss(t([[0.0, 1.0]]), np.array([[0.0, 1.0, 2.0]]), 1.0)


def test_ce_uniform():
    assert L.ce_loss(t(np.zeros((3, 10))), [0, 4, 9]).item() == pytest.approx(math.log(10), abs=1e-9)


def test_ce_hand_value():
    assert L.ce_loss(t([[1.0, 0.0]]), [0]).item() == pytest.approx(-math.log(math.e / (math.e + 1)), abs=1e-12)
    assert L.ce_loss(t([[1.0, 0.0]]), [0]).item() == pytest.approx(0.313262, abs=1e-6)


def test_ce_concentrated_limit():
    assert L.ce_loss(t([[60.0, 0.0, 0.0]]), [0]).item() < 1e-20


def test_ce_matches_oracle(rng):
    z = rng.standard_normal((6, 4)) * 2
    y = rng.integers(0, 4, size=6)
    assert L.ce_loss(t(z), y).item() == pytest.approx(ce_scalar(z, y), rel=1e-12)


def test_ce_label_range():
    with pytest.raises(PreconditionError):
        L.ce_loss(t(np.zeros((2, 3))), [0, 3])
    with pytest.raises(PreconditionError):
        L.ce_loss(t(np.zeros((2, 3))), [-1, 0])


logits = arrays(np.float64, (3, 4), elements=st.floats(-20, 20))


@settings(max_examples=100, deadline=None)
@given(logits, logits, st.floats(-50, 50), st.integers(0, 1))
def test_kd_ce_nonnegative_and_shift_invariant(zs, zt, c, side):
    base = L.kd_loss(t(zs), zt, 4.0).item()
    assert base >= -1e-12
    shifted = L.kd_loss(t(zs + c), zt, 4.0).item() if side else L.kd_loss(t(zs), zt + c, 4.0).item()
    assert shifted == pytest.approx(base, abs=1e-9)
    y = [0, 1, 3]
    ce = L.ce_loss(t(zs), y).item()
    assert ce >= 0
    assert L.ce_loss(t(zs + c), y).item() == pytest.approx(ce, abs=1e-9)


# ---- composite


def test_dis_weights():
    assert L.dis_loss(1.0, 1.0, 1.0) == 5.25
    assert L.dis_loss(0.0, 4.0, 0.0) == 1.0
    assert L.dis_loss(3.5, 0.0, 0.0) == 3.5
    assert L.dis_loss(t(1.0), t(1.0), t(1.0)).item() == 5.25


@settings(max_examples=100, deadline=None)
@given(st.floats(-1e3, 1e3), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_dis_is_linear(a, b, c):
    assert L.dis_loss(a, b, c) == pytest.approx(a + 0.25 * b + 4.0 * c, rel=1e-12, abs=1e-9)


def test_loss_report_weights():
    r = L.LossReport(l_cls=1.0, l_kd=1.0, l_rcd=1.0, l_dis=L.dis_loss(1.0, 1.0, 1.0))
    assert r.weights == {"cls": 1.0, "kd": 0.25, "rcd": 4.0}
    assert r.l_dis == r.l_cls + r.weights["kd"] * r.l_kd + r.weights["rcd"] * r.l_rcd


# ---- pair sampling


def test_sample_pairs_hand_example():
    pb = L.sample_pairs([0, 0, 1], np.random.default_rng(0), pairs_per_batch=5)
    assert pb.n_pos == pb.n_neg == 2
    pos = {(i, j) for i, j, b in pb.pairs() if b == 1}
    neg = {(i, j) for i, j, b in pb.pairs() if b == 0}
    assert pos == {(0, 1), (1, 0)}
    assert neg <= {(0, 2), (1, 2), (2, 0), (2, 1)} and len(neg) == 2


def test_sample_pairs_errors():
    with pytest.raises(PreconditionError, match="class-balanced"):
        L.sample_pairs([0, 1, 2, 3], np.random.default_rng(0))
    with pytest.raises(PreconditionError):
        L.sample_pairs([2, 2, 2], np.random.default_rng(0))


def test_sample_pairs_deterministic():
    labels = np.repeat(np.arange(6), 3)
    a = L.sample_pairs(labels, np.random.default_rng(3)).pairs()
    b = L.sample_pairs(labels, np.random.default_rng(3)).pairs()
    assert a == b


@settings(max_examples=200, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=3, max_size=30), st.integers(1, 60), st.integers(0, 2**32 - 1))
def test_sample_pairs_invariants(labels, ppb, seed):
    labels = np.array(labels)
    counts = np.bincount(labels)
    if counts.max() < 2 or np.unique(labels).size < 2:
        with pytest.raises(PreconditionError):
            L.sample_pairs(labels, np.random.default_rng(seed), ppb)
        return
    pb = L.sample_pairs(labels, np.random.default_rng(seed), ppb)
    assert pb.n_pos == pb.n_neg
    assert pb.n / pb.m == 0.5
    assert ((labels[pb.i] == labels[pb.j]) == (pb.b == 1)).all()
    assert (pb.i != pb.j).all()
    assert len(set(pb.pairs())) == pb.m
    n_pos_avail = int((counts * (counts - 1)).sum())
    n_neg_avail = labels.size * (labels.size - 1) - n_pos_avail
    assert pb.n_pos == min(n_pos_avail, n_neg_avail, ppb)
