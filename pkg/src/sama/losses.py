"""Training objective and pose metrics.

Arrays are ``[..., T, N, 3]`` in millimetres.  The loss terms accept Tensors
and stay differentiable; the ``*_metric`` helpers and the Procrustes-based
scores work on plain arrays.
"""
from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

log = logging.getLogger(__name__)

AUC_THRESHOLDS = np.arange(0.0, 151.0, 5.0)  # 31 points, 0..150 mm inclusive


def _check_shapes(pred, gt):
    if ad._val(pred).shape != ad._val(gt).shape:
        raise ValueError(f"shape mismatch {ad._val(pred).shape} vs {ad._val(gt).shape}")


def joint_errors(pred, gt) -> Tensor:
    """Euclidean error per joint, shape [..., T, N]."""
    _check_shapes(pred, gt)
    return ad.norm(ad.sub(pred, gt), axis=-1)


def weighted_mpjpe(pred, gt, joint_weights=None) -> Tensor:
    """Mean over frames (and batch) of sum_j w_j e_j / sum_j w_j."""
    err = joint_errors(pred, gt)
    N = err.shape[-1]
    w = np.ones(N) if joint_weights is None else np.asarray(joint_weights, dtype=float)
    if w.shape != (N,):
        raise ValueError(f"need {N} joint weights, got shape {w.shape}")
    if np.any(w < 0):
        raise ValueError("joint weights must be non-negative")
    if w.sum() <= 0:
        raise ValueError("joint weights sum to zero")
    per_frame = ad.mul(ad.einsum("...j,j->...", err, w), 1.0 / w.sum())
    return ad.mean(per_frame)


def mpjpe(pred, gt) -> Tensor:
    return ad.mean(joint_errors(pred, gt))


def mpjve(pred, gt) -> Tensor:
    """MPJPE of first-order temporal differences (frame axis -3)."""
    _check_shapes(pred, gt)
    T = ad._val(pred).shape[-3]
    if T < 2:
        raise ValueError("velocity error needs at least 2 frames")
    vel = lambda x: ad.sub(ad.getitem(x, (Ellipsis, slice(1, None), slice(None), slice(None))),  # noqa: E731
                           ad.getitem(x, (Ellipsis, slice(None, -1), slice(None), slice(None))))
    return mpjpe(vel(pred), vel(gt))


def n_mpjpe(pred, gt) -> Tensor:
    """MPJPE after scaling each sequence of ``pred`` by <pred, gt> / <pred, pred>."""
    _check_shapes(pred, gt)
    if np.all(ad._val(gt) == 0):
        raise ValueError("ground truth is all zero")
    pp = ad.sum(ad.square(pred), axis=(-3, -2, -1), keepdims=True)
    if np.any(pp.value == 0):
        raise ValueError("prediction has zero norm")
    pg = ad.sum(ad.mul(pred, gt), axis=(-3, -2, -1), keepdims=True)
    scale = ad.div(pg, pp)
    return mpjpe(ad.mul(scale, pred), gt)


def total_loss(pred, gt, lambda_m: float = 20.0, lambda_n: float = 0.5, joint_weights=None):
    """L_w + lambda_m * L_m + lambda_n * L_n; returns (total, components dict of floats)."""
    lw = weighted_mpjpe(pred, gt, joint_weights)
    total = lw
    parts = {"w": float(lw.value)}
    if lambda_m:
        lm = mpjve(pred, gt)
        total = ad.add(total, ad.mul(lm, lambda_m))
        parts["m"] = float(lm.value)
    if lambda_n:
        ln = n_mpjpe(pred, gt)
        total = ad.add(total, ad.mul(ln, lambda_n))
        parts["n"] = float(ln.value)
    return total, parts


def combine(lw: float, lm: float, ln: float, lambda_m: float = 20.0, lambda_n: float = 0.5) -> float:
    return lw + lambda_m * lm + lambda_n * ln


# ----------------------------------------------------------------- Procrustes


def procrustes_align(pred: np.ndarray, gt: np.ndarray, tol: float = 1e-12):
    """Best similarity transform of ``pred`` [N, 3] onto ``gt`` in least squares.

    Returns (aligned, degenerate).  A rank-deficient cross-covariance falls
    back to translation-only alignment and sets ``degenerate``.
    """
    mu_p, mu_g = pred.mean(axis=0), gt.mean(axis=0)
    p0, g0 = pred - mu_p, gt - mu_g
    var_p = (p0 ** 2).sum()
    cov = g0.T @ p0
    sv = np.linalg.svd(cov, compute_uv=False)
    if var_p <= tol or sv[1] <= tol * max(sv[0], 1.0):
        return p0 + mu_g, True
    u, s, vt = np.linalg.svd(cov)
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.diag([1.0, 1.0, d])
    rot = u @ fix @ vt
    scale = (s * np.diag(fix)).sum() / var_p
    return scale * p0 @ rot.T + mu_g, False


def p_mpjpe(pred, gt, return_degenerate: bool = False):
    """Per-frame similarity-aligned MPJPE."""
    pred, gt = np.asarray(pred, dtype=float), np.asarray(gt, dtype=float)
    _check_shapes(pred, gt)
    flat_p = pred.reshape(-1, *pred.shape[-2:])
    flat_g = gt.reshape(-1, *gt.shape[-2:])
    errs, bad = [], 0
    for p, g in zip(flat_p, flat_g):
        aligned, degenerate = procrustes_align(p, g)
        bad += degenerate
        errs.append(np.linalg.norm(aligned - g, axis=-1).mean())
    if bad:
        log.warning("p_mpjpe: %d frame(s) fell back to translation-only alignment", bad)
    value = float(np.mean(errs))
    return (value, bad) if return_degenerate else value


def pck_auc(pred, gt, threshold_mm: float = 150.0) -> tuple[float, float]:
    """PCK at ``threshold_mm`` and AUC over 0..150 mm in 5 mm steps, both in percent.

    A joint counts as correct when its error is <= the threshold, so a perfect
    prediction scores 100 on every point of the curve, including 0 mm.
    """
    err = joint_errors(np.asarray(pred, float), np.asarray(gt, float)).value
    pck = 100.0 * float(np.mean(err <= threshold_mm))
    curve = [np.mean(err <= t) for t in AUC_THRESHOLDS]
    return pck, 100.0 * float(np.mean(curve))


def all_metrics(pred, gt) -> dict:
    pred, gt = np.asarray(pred, float), np.asarray(gt, float)
    pck, auc = pck_auc(pred, gt)
    p, bad = p_mpjpe(pred, gt, return_degenerate=True)
    out = {
        "mpjpe": float(mpjpe(pred, gt).value),
        "p_mpjpe": p,
        "n_mpjpe": float(n_mpjpe(pred, gt).value) if np.any(pred) else float("nan"),
        "mpjve": float(mpjve(pred, gt).value) if pred.shape[-3] > 1 else float("nan"),
        "pck": pck,
        "auc": auc,
    }
    if bad:
        out["p_mpjpe_degenerate_frames"] = bad
    return out
