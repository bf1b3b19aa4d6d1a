"""Full lifting network: input projection, SSD layers, attention layers, head."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Param, Tensor
from .core import JointGraph, ModelConfig, ParamStore, PoseSeq, check_finite, skeleton
from .msm import MotionWeights, msm_scan
from .ssi import LearnableAdjacency, normalized_adjacency, ssi_scan
from .ssm import SsdWeights, affine

NORM_EPS = 1e-5
MAGIC = b"SAMA1\n"
DELTA_INIT = 0.1


def inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


@dataclass
class SsdBlock:
    norm_g: Param
    norm_b: Param
    ssd: SsdWeights
    d_skip: Param | None
    out_w: Param
    out_b: Param
    adjacency: LearnableAdjacency | None = None
    motion: MotionWeights | None = None


@dataclass
class AttnBlock:
    norm1_g: Param
    norm1_b: Param
    wq: Param
    bq: Param
    wk: Param
    wv: Param
    bv: Param
    wo: Param
    bo: Param
    norm2_g: Param
    norm2_b: Param
    w1: Param
    b1: Param
    w2: Param
    b2: Param


class SamaModel:
    """Parameters and structure of the lifting network.

    Every parameter is drawn from its own (seed, name) stream, so two models
    from the same seed share identical values for every parameter name they
    have in common; this is what makes the vanilla reduction bit-exact.
    """

    def __init__(self, config: ModelConfig, graph: JointGraph | None = None):
        self.config = config
        self.graph = graph if graph is not None else skeleton(config.skeleton)
        self.store = ParamStore(seed=config.seed)
        d, n, H = config.d_model, config.d_state, config.heads
        s = self.store
        self.in_w = s.new("input_proj.w", (2, d))
        self.in_b = s.new("input_proj.b", (d,), "zeros")
        self.spatial: list[SsdBlock] = []
        self.temporal: list[SsdBlock] = []
        for k in range(config.depth):
            self.spatial.append(self._ssd_block(f"ssi.{k}", spatial=True))
            self.temporal.append(self._ssd_block(f"msm.{k}", spatial=False))
        self.attn_spatial = [self._attn_block(f"attn_s.{k}") for k in range(config.depth)]
        self.attn_temporal = [self._attn_block(f"attn_t.{k}") for k in range(config.depth)]
        self.head_w = s.new("head.w", (d, 3))
        self.head_b = s.new("head.b", (3,), "zeros")

    def _ssd_block(self, prefix: str, spatial: bool) -> SsdBlock:
        cfg, s = self.config, self.store
        d, n, H = cfg.d_model, cfg.d_state, cfg.heads
        ssd = SsdWeights(
            w_b=s.new(f"{prefix}.w_b", (d, n)),
            bias_b=s.new(f"{prefix}.bias_b", (n,), "zeros"),
            w_c=s.new(f"{prefix}.w_c", (d, n)),
            bias_c=s.new(f"{prefix}.bias_c", (n,), "zeros"),
            w_delta=s.new(f"{prefix}.w_delta", (d, H)),
            delta_bias=s.new(f"{prefix}.delta_bias", (H,), "constant", c=inverse_softplus(DELTA_INIT)),
            a_log=s.new(f"{prefix}.a_log", (H,), "zeros"),
        )
        block = SsdBlock(
            norm_g=s.new(f"{prefix}.norm.g", (d,), "constant", c=1.0),
            norm_b=s.new(f"{prefix}.norm.b", (d,), "zeros"),
            ssd=ssd,
            d_skip=s.new(f"{prefix}.d_skip", (d,), "constant", c=1.0) if cfg.skip_d else None,
            out_w=s.new(f"{prefix}.out.w", (d, d)),
            out_b=s.new(f"{prefix}.out.b", (d,), "zeros"),
        )
        if spatial and cfg.use_ssi:
            adj = s.new(f"{prefix}.adjacency", (self.graph.n_joints,) * 2, "constant")
            adj.value[...] = normalized_adjacency(self.graph)
            block.adjacency = LearnableAdjacency(adj)
        if not spatial and cfg.use_msm:
            if cfg.msm_variant == "pointwise_conv":
                block.motion = MotionWeights(
                    "pointwise_conv",
                    w_prev=s.new(f"{prefix}.motion.w_prev", (d,), "zeros"),
                    w_now=s.new(f"{prefix}.motion.w_now", (d,), "constant", c=1.0),
                )
            else:
                block.motion = MotionWeights(
                    "linear", w_prev=s.new(f"{prefix}.motion.w_prev", (d, H), fan_in=2 * d))
        return block

    def _attn_block(self, prefix: str) -> AttnBlock:
        d, s = self.config.d_model, self.store
        return AttnBlock(
            norm1_g=s.new(f"{prefix}.norm1.g", (d,), "constant", c=1.0),
            norm1_b=s.new(f"{prefix}.norm1.b", (d,), "zeros"),
            wq=s.new(f"{prefix}.wq", (d, d)), bq=s.new(f"{prefix}.bq", (d,), "zeros"),
            wk=s.new(f"{prefix}.wk", (d, d)),
            wv=s.new(f"{prefix}.wv", (d, d)), bv=s.new(f"{prefix}.bv", (d,), "zeros"),
            wo=s.new(f"{prefix}.wo", (d, d)), bo=s.new(f"{prefix}.bo", (d,), "zeros"),
            norm2_g=s.new(f"{prefix}.norm2.g", (d,), "constant", c=1.0),
            norm2_b=s.new(f"{prefix}.norm2.b", (d,), "zeros"),
            w1=s.new(f"{prefix}.mlp.w1", (d, 2 * d)), b1=s.new(f"{prefix}.mlp.b1", (2 * d,), "zeros"),
            w2=s.new(f"{prefix}.mlp.w2", (2 * d, d)), b2=s.new(f"{prefix}.mlp.b2", (d,), "zeros"),
        )

    @property
    def params(self) -> list[Param]:
        return list(self.store)

    def num_params(self) -> int:
        return self.store.count()

    def __call__(self, pose2d, **kw) -> Tensor:
        return forward(self, pose2d, **kw)


# ----------------------------------------------------------------- blocks


def layer_norm(x, g, b) -> Tensor:
    mu = ad.mean(x, axis=-1, keepdims=True)
    xc = ad.sub(x, mu)
    var = ad.mean(ad.square(xc), axis=-1, keepdims=True)
    return ad.add(ad.mul(ad.div(xc, ad.sqrt(ad.add(var, NORM_EPS))), g), b)


def attention_weights(q, k) -> Tensor:
    """Softmax attention matrix [..., H, L, L] from head-major q, k [..., H, L, Dh]."""
    scale = 1.0 / math.sqrt(q.shape[-1])
    return ad.softmax(ad.mul(ad.matmul(q, ad.swapaxes(k, -1, -2)), scale), axis=-1)


def attention_block(x, blk: AttnBlock, heads: int, return_weights: bool = False):
    """Full (non-causal) multi-head self-attention over the token axis (-2)."""
    L, d = x.shape[-2:]

    def split(t):
        return ad.swapaxes(ad.reshape(t, t.shape[:-1] + (heads, d // heads)), -3, -2)

    q = split(affine(x, blk.wq, blk.bq))
    k = split(affine(x, blk.wk))  # a key bias shifts each score row uniformly, so none
    v = split(affine(x, blk.wv, blk.bv))
    a = attention_weights(q, k)
    o = ad.swapaxes(ad.matmul(a, v), -3, -2)
    out = affine(ad.reshape(o, o.shape[:-2] + (d,)), blk.wo, blk.bo)
    return (out, a) if return_weights else out


def attention_layer(x, blk: AttnBlock, heads: int) -> Tensor:
    x = ad.add(x, attention_block(layer_norm(x, blk.norm1_g, blk.norm1_b), blk, heads))
    h = layer_norm(x, blk.norm2_g, blk.norm2_b)
    h = affine(ad.silu(affine(h, blk.w1, blk.b1)), blk.w2, blk.b2)
    return ad.add(x, h)


def spatial_ssd(x, blk: SsdBlock, cfg: ModelConfig, disable_fusion: bool = False) -> Tensor:
    u = layer_norm(x, blk.norm_g, blk.norm_b)
    if blk.adjacency is not None and not disable_fusion:
        y = ssi_scan(u, blk.adjacency.m, blk.ssd, blk.d_skip, cfg.chunk, fusion=True)
    else:
        y = ssi_scan(u, None, blk.ssd, blk.d_skip, cfg.chunk, fusion=False)
    return ad.add(x, affine(y, blk.out_w, blk.out_b))


def temporal_ssd(x, blk: SsdBlock, cfg: ModelConfig, disable_motion: bool = False,
                 capture: list | None = None) -> Tensor:
    u = ad.swapaxes(layer_norm(x, blk.norm_g, blk.norm_b), -3, -2)  # [..., N, T, d]
    motion = None if disable_motion else blk.motion
    y = ad.swapaxes(msm_scan(u, blk.ssd, motion, blk.d_skip, cfg.chunk, capture), -3, -2)
    return ad.add(x, affine(y, blk.out_w, blk.out_b))


def _as_input(model: SamaModel, pose2d) -> Tensor:
    if isinstance(pose2d, PoseSeq):
        pose2d = pose2d.data
    if isinstance(pose2d, Tensor):
        val = pose2d.value
    else:
        val = np.asarray(pose2d, dtype=float)
        check_finite(val, "pose2d")
        pose2d = Tensor(val)
    if val.ndim < 3 or val.shape[-1] != 2:
        raise ValueError(f"expected [..., T, N, 2] input, got {val.shape}")
    if val.shape[-2] != model.graph.n_joints:
        raise ValueError(f"model expects {model.graph.n_joints} joints, input has {val.shape[-2]}")
    return pose2d


def forward(model: SamaModel, pose2d, disable_fusion: bool = False,
            disable_motion: bool = False, capture_delta: list | None = None) -> Tensor:
    """[..., T, N, 2] -> [..., T, N, 3].

    With ``center_input`` the root joint's 2D position is subtracted from every
    joint first.  The 2D input is then multiplied by ``input_scale`` and the head output by
    ``output_scale`` (fixed constants that bring normalized image coordinates
    and millimetres to unit range).  ``disable_fusion``/``disable_motion`` are
    debug switches that bypass the SSI graph fusion and the MSM two-frame
    timescale, leaving the vanilla SSD path.  ``capture_delta`` collects the
    temporal timescales [..., N, T, H] of every MSM layer.
    """
    cfg = model.config
    x = _as_input(model, pose2d)
    if cfg.center_input:
        x = ad.sub(x, x[..., :1, :])
    x = ad.mul(x, cfg.input_scale)
    x = affine(x, model.in_w, model.in_b)
    for sblk, tblk in zip(model.spatial, model.temporal):
        x = spatial_ssd(x, sblk, cfg, disable_fusion)
        x = temporal_ssd(x, tblk, cfg, disable_motion, capture_delta)
    for ablk, tblk in zip(model.attn_spatial, model.attn_temporal):
        x = attention_layer(x, ablk, cfg.heads)
        x = ad.swapaxes(attention_layer(ad.swapaxes(x, -3, -2), tblk, cfg.heads), -3, -2)
    return ad.mul(affine(x, model.head_w, model.head_b), cfg.output_scale)


def predict(model: SamaModel, pose2d, batch: int = 16, **kw) -> np.ndarray:
    """Inference without a tape; batches along the leading axis of 4-D input."""
    arr = pose2d.data if isinstance(pose2d, PoseSeq) else np.asarray(pose2d, dtype=float)
    if arr.ndim == 3:
        return forward(model, arr, **kw).value
    outs = [forward(model, arr[i:i + batch], **kw).value for i in range(0, len(arr), batch)]
    return np.concatenate(outs, axis=0)


# ----------------------------------------------------------------- accounting


def count_params(config: ModelConfig, n_joints: int = 17) -> int:
    """Closed-form scalar parameter count.

    input 2->d: 3d;  head d->3: 3d + 3;  per SSD block: norm 2d, B and C
    projections 2(dn + n), timescale dH + H, a_log H, skip d (if on),
    output d^2 + d;  SSI adds N^2;  MSM adds 2d (pointwise_conv) or dH
    (linear);  per attention layer: 2 norms 4d, q/k/v/o projections,
    MLP d->2d->d 4d^2 + 3d.  Keys carry no bias (softmax cancels it),
    so q/k/v/o hold 4d^2 + 3d.  K of each SSD kind and 2K attention layers.
    """
    d, n, H, K, N = config.d_model, config.d_state, config.heads, config.depth, n_joints
    ssd = 2 * d + 2 * (d * n + n) + d * H + 2 * H + (d if config.skip_d else 0) + d * d + d
    ssi_extra = N * N if config.use_ssi else 0
    msm_extra = (2 * d if config.msm_variant == "pointwise_conv" else d * H) if config.use_msm else 0
    attn = 4 * d + 4 * d * d + 3 * d + 4 * d * d + 3 * d
    return 3 * d + 3 * d + 3 + K * (2 * ssd + ssi_extra + msm_extra + 2 * attn)


def macs_per_frame(config: ModelConfig, n_joints: int = 17, T: int = 243) -> int:
    """Analytic multiply-accumulates per output frame (recurrent-form scans).

    Per frame of N joints: input 2Nd; head 3Nd; each SSD block Nd(2n + H)
    for projections, 2Ndn for state update and readout, Nd^2 output; SSI
    adds N^2 d (feature fusion) + N^2 dn (state fusion); MSM adds 2Nd
    (pointwise_conv) or NdH (linear); each attention layer 8Nd^2 for
    q/k/v/o and MLP plus 2N L d for scores and mixing, L = N spatially and
    L = T temporally.  Norms, softmax and activations are not counted.
    """
    d, n, H, K, N = config.d_model, config.d_state, config.heads, config.depth, n_joints
    ssd = N * d * (2 * n + H) + 2 * N * d * n + N * d * d
    ssi_extra = (N * N * d + N * N * d * n) if config.use_ssi else 0
    msm_extra = ((2 * N * d) if config.msm_variant == "pointwise_conv" else N * d * H) if config.use_msm else 0
    attn_s = 8 * N * d * d + 2 * N * N * d
    attn_t = 8 * N * d * d + 2 * N * T * d
    return 2 * N * d + 3 * N * d + K * (2 * ssd + ssi_extra + msm_extra + attn_s + attn_t)


# ----------------------------------------------------------------- checkpoint


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, model: SamaModel, meta: dict | None = None) -> None:
    """Write ``MAGIC | u64 header length | JSON header | little-endian f8 data``."""
    entries, offset, chunks = [], 0, []
    for p in model.store:
        arr = np.ascontiguousarray(p.value, dtype="<f8")
        entries.append({"name": p.name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    header = {
        "version": 1,
        "config": model.config.to_dict(),
        "graph": {"n_joints": model.graph.n_joints, "edges": [list(e) for e in model.graph.edges],
                  "name": model.graph.name},
        "params": entries,
        "meta": meta or {},
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for c in chunks:
            fh.write(c)


def read_checkpoint(path) -> tuple[dict, np.ndarray]:
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw.startswith(MAGIC):
        raise CheckpointError("bad checkpoint magic")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise CheckpointError("truncated checkpoint")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos:pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    data = np.frombuffer(raw[pos + hlen:], dtype="<f8")
    return header, data


def load_checkpoint(path) -> tuple[SamaModel, dict]:
    header, data = read_checkpoint(path)
    cfg = ModelConfig.from_dict(header["config"])
    g = header["graph"]
    graph = JointGraph(g["n_joints"], tuple(tuple(e) for e in g["edges"]), name=g.get("name", "custom"))
    model = SamaModel(cfg, graph)
    names = set()
    for e in header["params"]:
        p = model.store[e["name"]]
        size = int(np.prod(e["shape"]))
        if tuple(e["shape"]) != p.shape or e["offset"] + size > data.size:
            raise CheckpointError(f"parameter {e['name']} does not match the model")
        p.value = data[e["offset"]:e["offset"] + size].reshape(e["shape"]).astype(float)
        p.zero_grad()
        names.add(e["name"])
    missing = set(model.store.params) - names
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:3]}")
    return model, header.get("meta", {})
