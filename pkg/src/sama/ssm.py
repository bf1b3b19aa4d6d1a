"""Selective state-space (SSD) kernels.

Shapes: a sequence input ``x`` is ``[..., L, d]``.  Decays ``alpha`` are
``[..., L]`` (one head) or ``[..., L, H]`` with ``d`` split into ``H`` heads of
``P = d // H`` channels.  ``b`` and ``c`` are ``[..., L, n]`` (shared by all
heads) or ``[..., L, H, n]``.  Per head the recurrence is

    h_t = alpha_t * h_{t-1} + x_t (outer) b_t,     y_t = h_t @ c_t

with ``h_{-1} = 0`` and ``h_t`` of shape ``[P, n]``.

Mask convention: ``P[i, j] = alpha_{j+1} * ... * alpha_i`` for ``i > j``, i.e.
the decay accumulated strictly after position ``j`` up to and including ``i``.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

TAYLOR_CUTOFF = 1e-4
QUADRATIC_MAX_T = 4096


@dataclass
class SsdParams:
    alpha: Tensor
    b: Tensor
    c: Tensor
    delta: Tensor | None = None
    a_log: Tensor | None = None


@dataclass
class SemiseparableMask:
    p: np.ndarray


@dataclass
class SsdWeights:
    """Parameters of one selective projection (x -> B, C, delta)."""

    w_b: Tensor
    bias_b: Tensor
    w_c: Tensor
    bias_c: Tensor
    w_delta: Tensor
    delta_bias: Tensor
    a_log: Tensor


# ----------------------------------------------------------------- ZOH


def zoh_gain(delta, a) -> Tensor:
    """(exp(delta*a) - 1) / a, with a second-order Taylor branch near zero."""
    dv, av = ad._val(delta), ad._val(a)
    z = dv * av
    small = np.abs(z) < TAYLOR_CUTOFF
    a_safe = np.where(small, 1.0, av)
    ez = np.exp(z)
    exact = np.expm1(z) / a_safe
    out = np.where(small, dv * (1.0 + 0.5 * z), exact)

    def vjp(g):
        d_delta = np.where(small, 1.0 + z, ez)
        d_a = np.where(small, 0.5 * dv * dv, (z * ez - np.expm1(z)) / (a_safe * a_safe))
        return (ad.unbroadcast(g * d_delta, dv.shape), ad.unbroadcast(g * d_a, av.shape))

    return ad._make("zoh_gain", out, (delta, a), vjp)


def zoh_discretize(delta, a_log, b_raw):
    """Zero-order-hold discretisation with A = -exp(a_log).

    Single head: ``delta [..., L]``, scalar ``a_log``, ``b_raw [..., L, n]`` ->
    ``alpha [..., L]``, ``b_bar [..., L, n]``.  Multi-head: ``delta [..., L, H]``,
    ``a_log [H]`` -> ``alpha [..., L, H]``, ``b_bar [..., L, H, n]``.
    """
    dv = ad._val(delta)
    if np.any(dv <= 0):
        raise ValueError("delta must be positive")
    a = ad.neg(ad.exp(a_log))
    alpha = ad.exp(ad.mul(delta, a))
    gain = zoh_gain(delta, a)
    if ad._val(a_log).ndim == 0:
        b_bar = ad.mul(ad.reshape(gain, gain.shape + (1,)), b_raw)
    else:
        b_bar = ad.mul(ad.reshape(gain, gain.shape + (1,)),
                       ad.reshape(b_raw, b_raw.shape[:-1] + (1, b_raw.shape[-1])))
    return alpha, b_bar


def selective_project(x, w: SsdWeights, delta=None) -> SsdParams:
    """Input-dependent B_t, C_t and timescale; ``delta`` overrides the timescale path."""
    b_raw = affine(x, w.w_b, w.bias_b)
    c = affine(x, w.w_c, w.bias_c)
    if delta is None:
        delta = ad.softplus(affine(x, w.w_delta, w.delta_bias))
    alpha, b_bar = zoh_discretize(delta, w.a_log, b_raw)
    if ad._val(w.a_log).ndim:
        c = ad.reshape(c, c.shape[:-1] + (1, c.shape[-1]))
    return SsdParams(alpha=alpha, b=b_bar, c=c, delta=delta, a_log=w.a_log)


# ----------------------------------------------------------------- helpers


def affine(x, w, bias=None) -> Tensor:
    return ad.linear(x, w, bias)


def _split_heads(x, p: SsdParams):
    """Head-major views: x [..., H, L, P], alpha [..., H, L], b/c [..., H|1, L, n]."""
    x = ad.as_tensor(x)
    alpha, b, c = ad.as_tensor(p.alpha), ad.as_tensor(p.b), ad.as_tensor(p.c)
    if alpha.ndim == x.ndim - 1:
        alpha = ad.reshape(alpha, alpha.shape + (1,))
    H = alpha.shape[-1]
    d = x.shape[-1]
    if d % H:
        raise ValueError(f"width {d} not divisible by {H} heads")
    xh = ad.swapaxes(ad.reshape(x, x.shape[:-1] + (H, d // H)), -3, -2)
    alpha = ad.swapaxes(alpha, -1, -2)

    def heads_first(t):
        if t.ndim == x.ndim:
            return ad.reshape(t, t.shape[:-2] + (1,) + t.shape[-2:])
        return ad.swapaxes(t, -3, -2)

    return xh, alpha, heads_first(b), heads_first(c)


def _merge_heads(y) -> Tensor:
    """[..., H, L, P] -> [..., L, H*P]."""
    y = ad.swapaxes(y, -3, -2)
    return ad.reshape(y, y.shape[:-2] + (y.shape[-2] * y.shape[-1],))


def _log_alpha(alpha) -> Tensor:
    with np.errstate(divide="ignore"):
        return ad.log(alpha)


def segsum(z) -> Tensor:
    """S[..., i, j] = sum_{j < k <= i} z[..., k] for i >= j, -inf above the diagonal."""
    L = z.shape[-1]
    i, j = np.indices((L, L))
    zz = ad.broadcast_to(ad.reshape(z, z.shape + (1,)), z.shape + (L,))
    masked = ad.where(i > j, zz, 0.0)
    seg = ad.cumsum(masked, axis=-2)
    return ad.where(i >= j, seg, -np.inf)


def mask_from_log(log_alpha) -> Tensor:
    return ad.exp(segsum(log_alpha))


def build_mask(alpha) -> SemiseparableMask:
    """Materialise P for decays ``alpha [..., T]``."""
    av = ad._val(alpha)
    if np.any(av < 0) or np.any(av > 1):
        raise ValueError("alpha must lie in [0, 1]")
    with np.errstate(divide="ignore"):
        p = mask_from_log(np.log(av)).value
    return SemiseparableMask(p=p)


def _kernel(c, b, mask) -> Tensor:
    """(C B^T) o P for head-major c, b [..., H|1, L, n] and mask [..., H, L, L]."""
    return ad.mul(ad.matmul(c, ad.swapaxes(b, -1, -2)), mask)


# ----------------------------------------------------------------- scans


def scan_recurrent(x, p: SsdParams) -> Tensor:
    xh, alpha, b, c = _split_heads(x, p)
    H, L, P = xh.shape[-3:]
    n = b.shape[-1]
    batch = xh.shape[:-3]
    h = Tensor(np.zeros(batch + (H, P, n)))
    ys = []
    for t in range(L):
        a_t = ad.reshape(alpha[..., t], batch + (H, 1, 1))
        x_t = ad.reshape(xh[..., t, :], batch + (H, P, 1))
        b_t = ad.reshape(b[..., t, :], b.shape[:-2] + (1, n))
        c_t = ad.reshape(c[..., t, :], c.shape[:-2] + (n, 1))
        h = ad.add(ad.mul(a_t, h), ad.mul(x_t, b_t))
        ys.append(ad.reshape(ad.matmul(h, c_t), batch + (H, P)))
    y = ad.stack(ys, axis=-2)  # [..., H, L, P]
    return _merge_heads(y)


def scan_quadratic(x, p: SsdParams) -> Tensor:
    """Dual (attention-like) form y = (P o C B^T) x, O(L^2) memory."""
    xh, alpha, b, c = _split_heads(x, p)
    L = xh.shape[-2]
    if L > QUADRATIC_MAX_T:
        raise ValueError(f"quadratic form limited to T <= {QUADRATIC_MAX_T}, got {L}")
    mask = mask_from_log(_log_alpha(alpha))  # [..., H, L, L]
    return _merge_heads(ad.matmul(_kernel(c, b, mask), xh))


def _pad_seq(t: Tensor, axis: int, extra: int, fill: float) -> Tensor:
    if extra == 0:
        return t
    shape = list(t.shape)
    shape[axis] = extra
    return ad.concat([t, Tensor(np.full(shape, fill))], axis=axis)


def scan_chunked(x, p: SsdParams, chunk: int = 64) -> Tensor:
    """Blockwise scan: quadratic form inside blocks, carried state across blocks."""
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    xh, alpha, b, c = _split_heads(x, p)
    H, L, P = xh.shape[-3:]
    n = b.shape[-1]
    batch = tuple(xh.shape[:-3])
    Q = min(chunk, L)
    if Q == L:
        mask = mask_from_log(_log_alpha(alpha))
        return _merge_heads(ad.matmul(_kernel(c, b, mask), xh))
    nc = -(-L // Q)
    extra = nc * Q - L
    xh = _pad_seq(xh, -2, extra, 0.0)
    alpha = _pad_seq(alpha, -1, extra, 1.0)
    b = _pad_seq(b, -2, extra, 0.0)
    c = _pad_seq(c, -2, extra, 0.0)
    # [..., H, nc, Q, *]
    xc = ad.reshape(xh, batch + (H, nc, Q, P))
    bc = ad.reshape(b, b.shape[:-2] + (nc, Q, n))
    cc = ad.reshape(c, c.shape[:-2] + (nc, Q, n))
    la = ad.reshape(_log_alpha(alpha), batch + (H, nc, Q))

    mask = mask_from_log(la)  # [..., H, nc, Q, Q]
    y_diag = ad.matmul(_kernel(cc, bc, mask), xc)

    # state contributed by each block, measured at the block's last position
    to_end = ad.reshape(mask[..., Q - 1, :], batch + (H, nc, Q, 1))
    states = ad.matmul(ad.swapaxes(ad.mul(xc, to_end), -1, -2), bc)  # [..., H, nc, P, n]
    block_decay = ad.exp(ad.sum(la, axis=-1))  # [..., H, nc]

    carried = []
    h = Tensor(np.zeros(batch + (H, P, n)))
    for k in range(nc):
        carried.append(h)
        if k + 1 < nc:
            dk = ad.reshape(block_decay[..., k], batch + (H, 1, 1))
            h = ad.add(ad.mul(dk, h), states[..., k, :, :])
    carried = ad.stack(carried, axis=-3)  # [..., H, nc, P, n]
    from_start = ad.reshape(ad.exp(ad.cumsum(la, axis=-1)), batch + (H, nc, Q, 1))
    y_off = ad.mul(ad.matmul(cc, ad.swapaxes(carried, -1, -2)), from_start)

    y = ad.reshape(ad.add(y_diag, y_off), batch + (H, nc * Q, P))
    if extra:
        y = y[..., :L, :]
    return _merge_heads(y)


SCAN_FORMS = {
    "rec": scan_recurrent,
    "quad": scan_quadratic,
    "chunk": scan_chunked,
}


# ----------------------------------------------------------------- benchmark


def random_instance(rng: np.random.Generator, T: int, n: int, d: int, heads: int = 1,
                    batch: tuple[int, ...] = ()):
    """Random x and SsdParams with alpha in (0.5, 1)."""
    x = rng.standard_normal(batch + (T, d))
    alpha = rng.uniform(0.5, 1.0, size=batch + ((T,) if heads == 1 else (T, heads)))
    b = rng.standard_normal(batch + (T, n))
    c = rng.standard_normal(batch + (T, n))
    return x, SsdParams(alpha=Tensor(alpha), b=Tensor(b), c=Tensor(c))


def max_rel_dev(y, ref) -> float:
    y, ref = ad._val(y), ad._val(ref)
    scale = max(float(np.abs(ref).max()), 1e-300)
    return float(np.abs(y - ref).max() / scale)


def bench(T: int, n: int, d: int, forms=("rec", "quad", "chunk"), chunks=(64,),
          repeats: int = 3, seed: int = 0, heads: int = 1) -> list[dict]:
    """Time each scan form on one random instance; returns one row per (form, chunk).

    ``max_rel_dev`` is measured against the first form timed.
    """
    rng = np.random.default_rng(seed)
    x, p = random_instance(rng, T, n, d, heads=heads)
    ref = None
    rows = []
    for form in forms:
        for chunk in (chunks if form == "chunk" else (None,)):
            if form == "quad" and T > QUADRATIC_MAX_T:
                continue
            fn = (lambda: scan_chunked(x, p, chunk)) if form == "chunk" else (lambda f=SCAN_FORMS[form]: f(x, p))
            best = math.inf
            for _ in range(repeats):
                t0 = time.perf_counter_ns()
                y = fn()
                best = min(best, time.perf_counter_ns() - t0)
            if ref is None:
                ref = y
            rows.append({
                "form": form, "T": T, "n": n, "d": d, "chunk": chunk if chunk else "",
                "wall_ns_per_token": best / T, "max_rel_dev": max_rel_dev(y, ref),
            })
    return rows
