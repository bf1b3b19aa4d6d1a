import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import minimize_scalar
from scipy.spatial.transform import Rotation

from sama import autodiff as ad
from sama.autodiff import grad_check
from sama.losses import (AUC_THRESHOLDS, all_metrics, combine, mpjpe, mpjve, n_mpjpe, p_mpjpe, pck_auc,
                         procrustes_align, total_loss, weighted_mpjpe)
from sama.verify import random_pose_pair


def test_weighted_mpjpe_cases(rng):
    gt = rng.standard_normal((1, 17, 3)) * 100
    assert weighted_mpjpe(gt, gt).value == 0.0
    pred = gt.copy()
    pred[0, 5] += [3.0, 4.0, 0.0]
    assert weighted_mpjpe(pred, gt).value == pytest.approx(5 / 17)
    pred = gt + rng.standard_normal(gt.shape)
    plain = np.linalg.norm(pred - gt, axis=-1).mean()
    assert weighted_mpjpe(pred, gt).value == pytest.approx(plain, rel=1e-14)


def test_weighted_mpjpe_weights():
    gt = np.zeros((1, 2, 3))
    pred = np.array([[[1.0, 0, 0], [0, 0, 3.0]]])
    assert weighted_mpjpe(pred, gt, [3.0, 1.0]).value == pytest.approx((3 * 1 + 1 * 3) / 4)
    with pytest.raises(ValueError):
        weighted_mpjpe(pred, gt, [1.0])
    with pytest.raises(ValueError):
        weighted_mpjpe(pred, gt, [0.0, 0.0])
    with pytest.raises(ValueError):
        weighted_mpjpe(pred, gt, [-1.0, 2.0])


def test_mpjve_cases(rng):
    gt = rng.standard_normal((6, 4, 3))
    assert mpjve(gt, gt).value == 0.0
    assert mpjve(gt + np.array([5.0, -2.0, 1.0]), gt).value == pytest.approx(0.0, abs=1e-12)
    drift = gt + np.arange(6)[:, None, None] * np.array([1.0, 0.0, 0.0])
    assert mpjve(drift, gt).value == pytest.approx(1.0)
    with pytest.raises(ValueError):
        mpjve(gt[:1], gt[:1])


def test_n_mpjpe_scale_removed(rng):
    gt = rng.standard_normal((3, 5, 3))
    assert n_mpjpe(2 * gt, gt).value == pytest.approx(0.0, abs=1e-12)
    assert n_mpjpe(gt, gt).value == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ValueError):
        n_mpjpe(np.zeros_like(gt), gt)
    with pytest.raises(ValueError):
        n_mpjpe(gt, np.zeros_like(gt))


def test_n_mpjpe_scale_is_least_squares(rng):
    pred, gt = rng.standard_normal((2, 4, 5, 3))
    s_ls = (pred * gt).sum() / (pred * pred).sum()
    res = minimize_scalar(lambda s: ((s * pred - gt) ** 2).sum())
    assert s_ls == pytest.approx(res.x, rel=1e-6)
    assert n_mpjpe(pred, gt).value == pytest.approx(mpjpe(s_ls * pred, gt).value)


def test_least_squares_scale_can_lose_to_identity():
    """The least-squares scale minimises squared error, not mean distance, so
    n_mpjpe can exceed mpjpe slightly when the optimal scale is near 1."""
    rng = np.random.default_rng(9)
    for _ in range(42):
        gt = rng.normal(0, 200, (4, 17, 3))
        pred = gt * rng.uniform(0.7, 1.3) + rng.normal(0, rng.uniform(5, 80), gt.shape)
    n, m = n_mpjpe(pred, gt).value, mpjpe(pred, gt).value
    assert n > m
    assert n - m < 1e-3


def test_procrustes_removes_similarity(rng):
    gt = rng.standard_normal((17, 3)) * 100
    rot = Rotation.random(random_state=3).as_matrix()
    pred = 0.7 * gt @ rot.T + np.array([10.0, -5.0, 200.0])
    assert p_mpjpe(pred[None], gt[None]) < 1e-8
    assert p_mpjpe(gt[None], gt[None]) < 1e-10


def test_procrustes_fixes_reflection(rng):
    gt = rng.standard_normal((17, 3))
    mirrored = gt * np.array([-1.0, 1.0, 1.0])
    aligned, degenerate = procrustes_align(mirrored, gt)
    assert not degenerate
    assert np.linalg.norm(aligned - gt, axis=-1).mean() > 1e-3  # a rotation cannot undo a mirror


def test_procrustes_degenerate_fallback():
    gt = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    pred = np.zeros((3, 3))
    value, bad = p_mpjpe(pred[None], gt[None], return_degenerate=True)
    assert bad == 1 and np.isfinite(value)


def test_metric_ordering_on_independent_pairs():
    rng = np.random.default_rng(0)
    for _ in range(100):
        pred, gt = random_pose_pair(rng)
        p, n, m = p_mpjpe(pred, gt), n_mpjpe(pred, gt).value, mpjpe(pred, gt).value
        assert p <= n + 1e-9 and n <= m + 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_alignment_classes_nest_in_squared_error(seed):
    # each alignment minimises squared error over a larger class, so the
    # chain is exact for sums of squares (not for mean distances)
    rng = np.random.default_rng(seed)
    pred, gt = rng.standard_normal((2, 3, 17, 3))
    s = (pred * gt).sum() / (pred * pred).sum()
    sse_raw = ((pred - gt) ** 2).sum()
    sse_scale = ((s * pred - gt) ** 2).sum()
    sse_proc = sum(((procrustes_align(p, g)[0] - g) ** 2).sum() for p, g in zip(pred, gt))
    assert sse_proc <= sse_scale * (1 + 1e-12) and sse_scale <= sse_raw * (1 + 1e-12)


def test_pck_auc_trivial(rng):
    gt = rng.standard_normal((2, 17, 3))
    assert pck_auc(gt, gt) == (100.0, 100.0)
    far = gt + np.array([200.0, 0, 0])
    assert pck_auc(far, gt) == (0.0, 0.0)
    mid = gt + np.array([0.0, 75.0, 0.0])
    pck, auc = pck_auc(mid, gt)
    assert pck == 100.0
    assert len(AUC_THRESHOLDS) == 31
    assert auc == pytest.approx(100.0 * 16 / 31)


def test_total_loss_composition(rng):
    gt = rng.standard_normal((4, 17, 3))
    assert total_loss(gt, gt)[0].value == pytest.approx(0.0, abs=1e-12)
    pred = gt + rng.standard_normal(gt.shape)
    assert total_loss(pred, gt, 0.0, 0.0)[0].value == weighted_mpjpe(pred, gt).value
    total, parts = total_loss(pred, gt)
    assert total.value == pytest.approx(parts["w"] + 20 * parts["m"] + 0.5 * parts["n"])
    assert combine(1.0, 0.1, 0.8) == pytest.approx(3.4)


def test_loss_gradient(rng):
    gt = rng.standard_normal((3, 4, 3))
    pred = gt + rng.standard_normal(gt.shape)
    assert grad_check(lambda p: total_loss(p, gt)[0], pred).passed


def test_all_metrics_keys(rng):
    gt = rng.standard_normal((2, 5, 17, 3)) * 100
    m = all_metrics(gt, gt)
    assert m["mpjpe"] == 0 and m["pck"] == 100 and m["auc"] == 100
    assert set(m) >= {"mpjpe", "p_mpjpe", "n_mpjpe", "mpjve", "pck", "auc"}


def test_shape_mismatch(rng):
    with pytest.raises(ValueError):
        mpjpe(np.zeros((2, 17, 3)), np.zeros((2, 16, 3)))
    assert ad.mean(ad.as_tensor(np.ones(3))).value == 1.0
