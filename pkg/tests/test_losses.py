from fractions import Fraction

import numpy as np
import pytest

from hed.losses import (
    LabelError,
    LabelMap,
    balanced_bce,
    closed_form_at_half,
    side_objective,
    total_objective,
)
from hed.tensor import Tensor

from oracles import naive_bce


def random_label_maps(count, seed=0):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        h, w = rng.integers(1, 40, size=2)
        yield (rng.random((h, w)) < rng.random()).astype(np.uint8)


def test_class_balance_identity_exact_rational():
    for y in random_label_maps(1000):
        lab = LabelMap(y)
        beta = lab.beta_exact
        assert beta * lab.num_pos == (1 - beta) * lab.num_neg
        assert beta == Fraction(int((y == 0).sum()), y.size)


def test_class_balance_identity_float_weights_within_ulps():
    for y in random_label_maps(1000, seed=1):
        lab = LabelMap(y)
        w_pos, w_neg = lab.beta * lab.num_pos, (1.0 - lab.beta) * lab.num_neg
        # rounding beta by half an ulp shifts the two sides apart by up to |Y| * ulp
        eps = np.finfo(float).eps
        assert abs(w_pos - w_neg) <= eps * (y.size + 2 * max(w_pos, w_neg))


def test_balanced_bce_matches_naive_sum():
    rng = np.random.default_rng(2)
    for y in list(random_label_maps(1000, seed=3)):
        a = rng.normal(0, 3, size=y.shape)
        got = float(balanced_bce(Tensor(a[None, None]), y).data)
        want = naive_bce(a, y)
        assert abs(got - want) <= 1e-12 * max(1.0, abs(want))


def test_closed_form_at_half():
    for y in random_label_maps(1000, seed=4):
        got = float(balanced_bce(Tensor(np.zeros((1, 1) + y.shape)), y).data)
        n_pos, n = int(y.sum()), y.size
        want = np.log(2.0) * 2.0 * n_pos * (n - n_pos) / n
        assert abs(got - want) <= 1e-12 * max(1.0, want)
        assert abs(closed_form_at_half(y) - want) <= 1e-12 * max(1.0, want)


def test_unbalanced_variant_is_plain_cross_entropy():
    rng = np.random.default_rng(5)
    y = (rng.random((6, 7)) < 0.3).astype(np.uint8)
    a = rng.normal(size=y.shape)
    s = 1 / (1 + np.exp(-a))
    plain = -np.sum(y * np.log(s) + (1 - y) * np.log(1 - s))
    np.testing.assert_allclose(balanced_bce(Tensor(a[None, None]), y, balanced=False).data, plain, rtol=1e-13)


def test_degenerate_maps():
    zeros = np.zeros((4, 4), dtype=np.uint8)
    assert LabelMap(zeros).beta == 1.0
    assert closed_form_at_half(zeros) == 0.0
    # all negatives: only the (1 - beta) = 0 weighted term would apply
    assert float(balanced_bce(Tensor(np.full((1, 1, 4, 4), 5.0)), zeros).data) == 0.0


def test_label_validation():
    with pytest.raises(LabelError):
        LabelMap(np.array([[0, 2]]))
    with pytest.raises(LabelError):
        balanced_bce(Tensor(np.zeros((1, 1, 3, 3))), np.zeros((3, 4), dtype=np.uint8))


def test_objective_composition():
    rng = np.random.default_rng(6)
    y = (rng.random((5, 6)) < 0.25).astype(np.uint8)
    sides = [Tensor(rng.normal(size=(1, 1, 5, 6))) for _ in range(3)]
    fused = Tensor(rng.normal(size=(1, 1, 5, 6)))
    alphas = (0.5, 0.0, 2.0)
    loss, rep = total_objective(sides, fused, y, alphas)
    per = [naive_bce(s.data[0, 0], y) for s in sides]
    f = naive_bce(fused.data[0, 0], y)
    np.testing.assert_allclose(rep.sides, per, rtol=1e-12)
    np.testing.assert_allclose(loss.data, 0.5 * per[0] + 2.0 * per[2] + f, rtol=1e-12)
    off, rep_off = total_objective(sides, fused, y, alphas, deep_supervision=False)
    np.testing.assert_allclose(off.data, f, rtol=1e-12)
    # side losses are still reported without deep supervision
    np.testing.assert_allclose(rep_off.sides, per, rtol=1e-12)
    zero_total, _ = side_objective(sides, y, (0.0, 0.0, 0.0))
    assert float(zero_total.data) == 0.0
    with pytest.raises(ValueError):
        side_objective(sides, y, (1.0, 1.0))


def test_zero_alpha_side_gets_no_gradient():
    rng = np.random.default_rng(7)
    y = (rng.random((4, 4)) < 0.5).astype(np.uint8)
    sides = [Tensor(rng.normal(size=(1, 1, 4, 4)), requires_grad=True) for _ in range(2)]
    total, _ = side_objective(sides, y, (1.0, 0.0))
    total.backward()
    assert sides[0].grad is not None and np.abs(sides[0].grad).sum() > 0
    assert sides[1].grad is None or not np.any(sides[1].grad)
