"""Motion-adaptive state modulator: temporal scan with a two-frame timescale."""
from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .autodiff import Tensor
from .core import MSM_VARIANTS
from .ssm import SsdWeights, affine, scan_chunked, selective_project


@dataclass
class MotionWeights:
    """``pointwise_conv``: per-channel kernel-2 taps ``w_now``/``w_prev`` [d].
    ``linear``: ``w_prev`` [d, H], the x_{t-1} half of a linear map on [x_{t-1} | x_t]
    whose x_t half is the SSD timescale projection."""

    variant: str
    w_prev: Tensor
    w_now: Tensor | None = None


def motion_delta(x, variant: str, motion: MotionWeights, ssd: SsdWeights) -> Tensor:
    """Timescale from the current and previous frame, x_{-1} = 0; x is [..., T, d].

    pointwise_conv: softplus((w_now*x_t + w_prev*x_{t-1}) @ W_delta + bias)
    linear:         softplus(x_{t-1} @ W_prev + x_t @ W_delta + bias)
    """
    if variant not in MSM_VARIANTS:
        raise ValueError(f"unknown msm variant {variant!r}")
    prev = ad.shift_right(x, axis=-2)
    if variant == "pointwise_conv":
        z = ad.add(ad.mul(motion.w_now, x), ad.mul(motion.w_prev, prev))
        return ad.softplus(affine(z, ssd.w_delta, ssd.delta_bias))
    pre = ad.add(affine(prev, motion.w_prev), affine(x, ssd.w_delta))
    return ad.softplus(ad.add(pre, ssd.delta_bias))


def msm_scan(x, weights: SsdWeights, motion: MotionWeights | None = None, d_skip=None,
             chunk: int = 64, capture: list | None = None) -> Tensor:
    """Temporal SSD over frames (axis -2).  ``motion=None`` uses the plain
    input-only timescale, i.e. the vanilla selective scan.  The timescale
    array [..., T, H] is appended to ``capture`` when given."""
    delta = None if motion is None else motion_delta(x, motion.variant, motion, weights)
    p = selective_project(x, weights, delta=delta)
    if capture is not None:
        capture.append(ad._val(p.delta))
    y = scan_chunked(x, p, chunk)
    if d_skip is not None:
        y = ad.add(y, ad.mul(d_skip, x))
    return y
