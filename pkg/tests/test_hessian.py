import numpy as np
import pytest

from osaq.errors import DimMismatch, EmptyCalibration
from osaq.hessian import HessianAccumulator, hessian_finalize, hessian_update
from osaq.linalg import eigh_symmetric


def test_empty_batch_is_noop():
    acc = HessianAccumulator("l", 3)
    hessian_update(acc, np.zeros((0, 3)))
    assert acc.sample_count == 0
    np.testing.assert_array_equal(acc.sum_xx, np.zeros((3, 3)))


def test_axis_rows():
    acc = HessianAccumulator("l", 2)
    hessian_update(acc, [[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_array_equal(acc.sum_xx, np.eye(2))
    assert acc.sample_count == 2
    np.testing.assert_array_equal(hessian_finalize(acc), np.eye(2))


def test_single_row_rank_one():
    acc = HessianAccumulator("l", 2)
    hessian_update(acc, [[1.0, 1.0]])
    np.testing.assert_array_equal(acc.sum_xx, np.ones((2, 2)))
    h = hessian_finalize(acc)
    np.testing.assert_array_equal(h, 2.0 * np.ones((2, 2)))
    np.testing.assert_allclose(eigh_symmetric(h).values, [0.0, 4.0], atol=1e-14)


def test_scaling_is_quadratic():
    x = np.random.default_rng(0).standard_normal((10, 4))
    a, b = HessianAccumulator("a", 4), HessianAccumulator("b", 4)
    hessian_update(a, x)
    hessian_update(b, 3.0 * x)
    np.testing.assert_allclose(hessian_finalize(b), 9.0 * hessian_finalize(a), rtol=1e-14)


def test_errors():
    acc = HessianAccumulator("layer0.attn.q_proj", 3)
    with pytest.raises(EmptyCalibration, match="layer0.attn.q_proj"):
        hessian_finalize(acc)
    with pytest.raises(DimMismatch):
        hessian_update(acc, np.ones((2, 4)))


def test_order_invariance_and_merge():
    rng = np.random.default_rng(1)
    b1, b2 = rng.standard_normal((7, 5)), rng.standard_normal((11, 5))
    a, b = HessianAccumulator("x", 5), HessianAccumulator("x", 5)
    hessian_update(hessian_update(a, b1), b2)
    hessian_update(hessian_update(b, b2), b1)
    ha, hb = hessian_finalize(a), hessian_finalize(b)
    assert np.abs(ha - hb).max() <= 1e-12 * np.abs(ha).max()
    c1, c2 = HessianAccumulator("x", 5), HessianAccumulator("x", 5)
    hessian_update(c1, b1)
    hessian_update(c2, b2)
    assert np.abs(hessian_finalize(c1.merge(c2)) - ha).max() <= 1e-12 * np.abs(ha).max()


def test_symmetry_psd_and_rank():
    rng = np.random.default_rng(2)
    acc = HessianAccumulator("x", 8)
    for _ in range(3):
        hessian_update(acc, rng.standard_normal((2, 8)))
        assert np.array_equal(acc.sum_xx, acc.sum_xx.T)
        lam = eigh_symmetric(acc.sum_xx).values
        assert lam.min() >= -1e-8 * np.abs(acc.sum_xx).max()
    lam = eigh_symmetric(hessian_finalize(acc)).values
    assert np.count_nonzero(np.abs(lam) > 1e-8 * np.abs(lam).max()) <= acc.sample_count


def test_null_space_annihilates_inputs():
    rng = np.random.default_rng(3)
    basis = np.linalg.qr(rng.standard_normal((6, 6)))[0][:, :4]
    x = rng.standard_normal((50, 4)) @ basis.T
    acc = HessianAccumulator("x", 6)
    hessian_update(acc, x)
    e = eigh_symmetric(acc.sum_xx)
    null = e.vectors[:, :2]
    assert np.abs(x @ null).max() <= 1e-6
