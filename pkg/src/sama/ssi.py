"""Structure-aware state integrator: spatial scan over joints with graph fusion."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .core import JointGraph
from .ssm import (SsdWeights, _kernel, _log_alpha, _merge_heads, _split_heads, mask_from_log,
                  scan_chunked, selective_project)


def normalized_adjacency(graph: JointGraph) -> np.ndarray:
    """D^-1/2 (M_o + I) D^-1/2 with D the degree of M_o + I."""
    deg = graph.degree.astype(float)
    if np.any(deg <= 0):
        raise ValueError("zero-degree joint")
    a = graph.m_o + np.eye(graph.n_joints)
    return a / np.sqrt(np.outer(deg, deg))


@dataclass
class LearnableAdjacency:
    pre_softmax: Param

    @property
    def m(self) -> Tensor:
        """Row-softmax of the learnable matrix, recomputed on every access."""
        return ad.softmax(self.pre_softmax, axis=-1)


def build_adjacency(graph: JointGraph, name: str = "adjacency") -> LearnableAdjacency:
    return LearnableAdjacency(Param(normalized_adjacency(graph), name=name))


def fuse_features(x, m) -> Tensor:
    """x'_a = x_a + sum_k m[a, k] x_k over the joint axis (-2)."""
    return ad.add(x, ad.matmul(m, x))


def state_fusion_term(x, p, m) -> Tensor:
    """sum_k m[a, k] (c_a . h_k) for every joint a, via the semiseparable mask.

    With h_k = sum_{j<=k} P[k, j] x_j b_j^T this is
    sum_j (m P)[a, j] (c_a . b_j) x_j, so no per-joint state is materialised.
    """
    xh, alpha, b, c = _split_heads(x, p)
    mask = mask_from_log(_log_alpha(alpha))  # [..., H, N, N]
    return _merge_heads(ad.matmul(_kernel(c, b, ad.matmul(m, mask)), xh))


def ssi_scan(x, m, weights: SsdWeights, d_skip=None, chunk: int = 64,
             fusion: bool = True) -> Tensor:
    """Spatial SSD over joints (axis -2) with feature and state fusion.

    Joints are scanned in index order.  ``fusion=False`` skips both fusion
    steps and reduces exactly to the plain selective scan.
    """
    xp = fuse_features(x, m) if fusion else ad.as_tensor(x)
    p = selective_project(xp, weights)
    y = scan_chunked(xp, p, chunk)
    if fusion:
        y = ad.add(y, state_fusion_term(xp, p, m))
    if d_skip is not None:
        y = ad.add(y, ad.mul(d_skip, xp))
    return y
