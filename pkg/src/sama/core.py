"""Domain types, deterministic RNG and the parameter store."""
from __future__ import annotations

import dataclasses
import json
import math
import zlib
from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .autodiff import DTYPE, Param

# 17-joint Human3.6M kinematic tree, root-outward index order
H36M_EDGES: tuple[tuple[int, int], ...] = (
    (0, 1), (1, 2), (2, 3), (0, 4), (4, 5), (5, 6), (0, 7), (7, 8), (8, 9),
    (9, 10), (8, 11), (11, 12), (12, 13), (8, 14), (14, 15), (15, 16),
)
H36M_NAMES = (
    "pelvis", "r_hip", "r_knee", "r_ankle", "l_hip", "l_knee", "l_ankle", "spine",
    "thorax", "neck", "head", "l_shoulder", "l_elbow", "l_wrist", "r_shoulder",
    "r_elbow", "r_wrist",
)


class PoseSeq:
    """A [T][N][k] keypoint sequence, k=2 (normalized image) or k=3 (mm)."""

    __slots__ = ("data",)

    def __init__(self, data):
        data = np.array(data, dtype=DTYPE)
        if data.ndim != 3:
            raise ValueError(f"PoseSeq needs a [T][N][k] array, got shape {data.shape}")
        T, N, k = data.shape
        if T < 1 or N < 1 or k not in (2, 3):
            raise ValueError(f"invalid PoseSeq shape {data.shape}")
        check_finite(data, "PoseSeq")
        data.setflags(write=False)
        self.data = data

    @property
    def T(self) -> int:
        return self.data.shape[0]

    @property
    def N(self) -> int:
        return self.data.shape[1]

    @property
    def k(self) -> int:
        return self.data.shape[2]

    def __repr__(self):
        return f"PoseSeq(T={self.T}, N={self.N}, k={self.k})"


def check_finite(x: np.ndarray, what: str = "input") -> None:
    if not np.all(np.isfinite(x)):
        raise ValueError(f"{what} contains non-finite entries")


@dataclass(frozen=True)
class JointGraph:
    n_joints: int
    edges: tuple[tuple[int, int], ...]
    name: str = "custom"

    def __post_init__(self):
        if self.n_joints < 1:
            raise ValueError("graph needs at least one joint")
        for a, b in self.edges:
            if a == b or not (0 <= a < self.n_joints and 0 <= b < self.n_joints):
                raise ValueError(f"bad edge ({a}, {b})")
        if not self._connected():
            raise ValueError("joint graph must be connected")

    def _connected(self) -> bool:
        adj = self.m_o
        seen, todo = {0}, [0]
        while todo:
            a = todo.pop()
            for b in np.flatnonzero(adj[a]):
                if b not in seen:
                    seen.add(int(b))
                    todo.append(int(b))
        return len(seen) == self.n_joints

    @property
    def m_o(self) -> np.ndarray:
        m = np.zeros((self.n_joints, self.n_joints), dtype=DTYPE)
        for a, b in self.edges:
            m[a, b] = m[b, a] = 1.0
        return m

    @property
    def degree(self) -> np.ndarray:
        """Degree of each joint in M_o + I."""
        return (self.m_o.sum(axis=1) + 1).astype(np.int64)

    def parents(self) -> list[int]:
        """Parent of each joint in a BFS tree rooted at joint 0 (-1 for the root)."""
        adj = self.m_o
        parent = [-1] * self.n_joints
        seen, queue = {0}, [0]
        while queue:
            a = queue.pop(0)
            for b in np.flatnonzero(adj[a]):
                b = int(b)
                if b not in seen:
                    seen.add(b)
                    parent[b] = a
                    queue.append(b)
        return parent


def h36m_graph() -> JointGraph:
    return JointGraph(17, H36M_EDGES, name="h36m")


SKELETONS = {"h36m": h36m_graph}


def skeleton(name: str) -> JointGraph:
    try:
        return SKELETONS[name]()
    except KeyError:
        raise ValueError(f"unknown skeleton {name!r}") from None


MSM_VARIANTS = ("pointwise_conv", "linear")


@dataclass
class ModelConfig:
    depth: int = 2
    d_model: int = 32
    d_state: int = 8
    heads: int = 2
    msm_variant: str = "pointwise_conv"
    use_ssi: bool = True
    use_msm: bool = True
    skip_d: bool = True
    chunk: int = 64
    input_scale: float = 10.0
    center_input: bool = True
    output_scale: float = 1000.0
    lambda_m: float = 20.0
    lambda_n: float = 0.5
    joint_weights: list[float] | None = None
    skeleton: str = "h36m"
    seed: int = 0
    lr: float = 3e-3
    weight_decay: float = 0.01
    lr_decay: float = 0.99
    epochs: int = 200
    batch_size: int = 8
    clip_len: int = 16
    stride: int = 16
    checkpoint_every: int = 50

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("d_model", "d_state", "heads", "batch_size", "clip_len", "stride", "chunk"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.depth < 0 or self.epochs < 0:
            raise ValueError("depth and epochs must be non-negative")
        if self.d_model % self.heads:
            raise ValueError("d_model must be divisible by heads")
        if self.msm_variant not in MSM_VARIANTS:
            raise ValueError(f"msm_variant must be one of {MSM_VARIANTS}")
        if self.input_scale <= 0 or self.output_scale <= 0:
            raise ValueError("input_scale and output_scale must be positive")
        if self.lr < 0 or self.weight_decay < 0:
            raise ValueError("lr and weight_decay must be non-negative")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ModelConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **kw) -> "ModelConfig":
        return dataclasses.replace(self, **kw)


def seeded_rng(seed: int) -> np.random.Generator:
    """PCG64 generator (numpy's 128-bit-state, 64-bit-output permuted LCG)."""
    return np.random.Generator(np.random.PCG64(seed))


def named_rng(seed: int, name: str) -> np.random.Generator:
    """Independent stream per (seed, name), so adding a parameter never shifts others."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(name.encode())])))


def init_param(shape, scheme: str = "uniform_fan_in", rng: np.random.Generator | None = None,
               name: str = "", fan_in: int | None = None, c: float = 0.0) -> Param:
    """Build a Param.  ``uniform_fan_in`` draws U(-1/sqrt(fan_in), 1/sqrt(fan_in));
    fan_in defaults to ``shape[0]`` (weights are stored [in, out])."""
    shape = tuple(int(s) for s in np.atleast_1d(shape))
    if not shape:
        raise ValueError("shape must be nonempty")
    if scheme == "zeros":
        value = np.zeros(shape)
    elif scheme == "constant":
        value = np.full(shape, float(c))
    elif scheme == "uniform_fan_in":
        fan_in = shape[0] if fan_in is None else fan_in
        if fan_in <= 0:
            raise ValueError("zero fan-in")
        if rng is None:
            raise ValueError("uniform_fan_in needs an rng")
        bound = 1.0 / math.sqrt(fan_in)
        value = rng.uniform(-bound, bound, size=shape)
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return Param(value, name=name)


@dataclass
class ParamStore:
    """Registry of every learnable array, keyed by unique name."""

    seed: int = 0
    params: dict[str, Param] = field(default_factory=dict)

    def new(self, name: str, shape, scheme: str = "uniform_fan_in", **kw) -> Param:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name!r}")
        p = init_param(shape, scheme, rng=named_rng(self.seed, name), name=name, **kw)
        self.params[name] = p
        return p

    def __iter__(self) -> Iterator[Param]:
        return iter(self.params.values())

    def __len__(self) -> int:
        return len(self.params)

    def __getitem__(self, name: str) -> Param:
        return self.params[name]

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def count(self) -> int:
        return int(sum(p.value.size for p in self))
