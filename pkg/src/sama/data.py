"""Synthetic motion generator, JSON-lines dataset files and clip batching."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .core import JointGraph, PoseSeq, check_finite, skeleton

FOCAL = 1.0
DEPTH_OFFSET_MM = 4000.0

# Rest-pose bone vectors (child minus parent) in mm, body frame with y up.
H36M_OFFSETS = np.array([
    [0, 0, 0],            # pelvis
    [-130, 0, 0], [0, -450, 0], [0, -440, 0],      # right leg
    [130, 0, 0], [0, -450, 0], [0, -440, 0],       # left leg
    [0, 230, 0], [0, 250, 0], [0, 110, 0], [0, 120, 0],  # spine .. head
    [150, 0, 0], [0, -280, 0], [0, -250, 0],       # left arm
    [-150, 0, 0], [0, -280, 0], [0, -250, 0],      # right arm
], dtype=float)

# Default motion profile: displacement amplitude per joint in mm.  Trunk joints
# move least and limb extremities most; the profile is non-decreasing along
# every chain so each target is reachable given the motion a joint inherits.
H36M_AMPLITUDES = np.array([
    4.0,                      # pelvis
    8.0, 30.0, 75.0,          # right hip, knee, ankle
    10.0, 36.0, 90.0,         # left hip, knee, ankle
    6.0, 12.0, 15.0, 25.0,    # spine, thorax, neck, head
    18.0, 44.0, 62.0,         # left shoulder, elbow, wrist
    21.0, 52.0, 108.0,        # right shoulder, elbow, wrist
])
PHASE_JITTER = 0.25


@dataclass(frozen=True)
class Rig:
    """A joint graph plus rest bone offsets (row 0, the root, is ignored)."""

    graph: JointGraph
    offsets: np.ndarray

    def __post_init__(self):
        if self.offsets.shape != (self.graph.n_joints, 3):
            raise ValueError("offsets must be [N, 3]")

    @property
    def bone_lengths(self) -> np.ndarray:
        return np.linalg.norm(self.offsets, axis=1)


def h36m_rig() -> Rig:
    return Rig(skeleton("h36m"), H36M_OFFSETS)


RIGS = {"h36m": h36m_rig}


@dataclass
class SyntheticSpec:
    n_sequences: int = 16
    T: int = 64
    skeleton: str | Rig = "h36m"
    amplitudes: np.ndarray | None = None    # displacement amplitude, mm per joint
    frequencies: np.ndarray | None = None   # Hz per joint; 1.5 Hz when None
    noise_std_2d: float = 0.0
    seed: int = 0
    fps: float = 50.0
    random_yaw: bool = True
    yaw_range: float = math.pi              # yaw ~ U(0, yaw_range) when random_yaw

    def rig(self) -> Rig:
        if isinstance(self.skeleton, Rig):
            return self.skeleton
        try:
            return RIGS[self.skeleton]()
        except KeyError:
            raise ValueError(f"no rest pose for skeleton {self.skeleton!r}") from None

    def profile(self) -> tuple[np.ndarray, np.ndarray]:
        n = self.rig().graph.n_joints
        if self.amplitudes is None:
            if n != len(H36M_AMPLITUDES):
                raise ValueError("custom rigs need explicit amplitudes")
            amp = H36M_AMPLITUDES.copy()
        else:
            amp = np.asarray(self.amplitudes, dtype=float)
        freq = np.full(n, 1.5) if self.frequencies is None else np.asarray(self.frequencies, dtype=float)
        if amp.shape != (n,) or freq.shape != (n,):
            raise ValueError(f"amplitude and frequency profiles need {n} entries")
        if np.any(amp < 0):
            raise ValueError("amplitudes must be non-negative")
        if np.any(freq < 0):
            raise ValueError("frequencies must be non-negative")
        return amp, freq

    def validate(self) -> None:
        if self.n_sequences < 1 or self.T < 1:
            raise ValueError("n_sequences and T must be positive")
        if self.noise_std_2d < 0 or self.fps <= 0:
            raise ValueError("noise_std_2d must be >= 0 and fps > 0")
        if not 0 <= self.yaw_range <= 2 * math.pi:
            raise ValueError("yaw_range must lie in [0, 2*pi]")
        self.profile()


def axis_angle(axis: np.ndarray, angle: np.ndarray) -> np.ndarray:
    """Rodrigues rotation matrices [..., 3, 3] for a unit ``axis`` and angles [...]."""
    x, y, z = axis
    k = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    s, c = np.sin(angle)[..., None, None], np.cos(angle)[..., None, None]
    return np.eye(3) + s * k + (1 - c) * (k @ k)


def forward_kinematics(rig: Rig, local_rot: np.ndarray, root_pos: np.ndarray) -> np.ndarray:
    """Joint positions [T, N, 3].  ``local_rot`` [T, N, 3, 3] rotates the bone
    into joint j relative to its parent's frame; root_pos is [T, 3]."""
    parents = rig.graph.parents()
    T, N = local_rot.shape[:2]
    glob = np.empty_like(local_rot)
    pos = np.empty((T, N, 3))
    glob[:, 0] = local_rot[:, 0]
    pos[:, 0] = root_pos
    for j in _topological(parents):
        p = parents[j]
        glob[:, j] = glob[:, p] @ local_rot[:, j]
        pos[:, j] = pos[:, p] + glob[:, j] @ rig.offsets[j]
    return pos


def _topological(parents: list[int]) -> list[int]:
    order, placed = [], {0}
    while len(order) < len(parents) - 1:
        for j, p in enumerate(parents):
            if j not in placed and p in placed:
                order.append(j)
                placed.add(j)
    return order


def project(pose3d: np.ndarray, focal: float = FOCAL) -> np.ndarray:
    """Pinhole projection of camera-frame points [..., 3] (z is depth)."""
    z = pose3d[..., 2:3]
    if np.any(z <= 0):
        raise ValueError("points behind the camera")
    return focal * pose3d[..., :2] / z


def body_to_camera(pose: np.ndarray) -> np.ndarray:
    """Body frame (y up) to camera frame (y down, z forward) at the fixed depth offset."""
    out = pose * np.array([1.0, -1.0, 1.0])
    out[..., 2] += DEPTH_OFFSET_MM
    return out


def swing_axes(rig: Rig) -> np.ndarray:
    """Fixed unit rotation axis per joint, perpendicular to its rest bone.

    Crossing with the forward axis makes vertical bones swing forward and back
    and horizontal bones turn about the vertical, a gait-like pattern.
    """
    axes = np.zeros((rig.graph.n_joints, 3))
    fwd = np.array([0.0, 0.0, 1.0])
    for j, o in enumerate(rig.offsets):
        ax = np.cross(o, fwd)
        if np.linalg.norm(ax) < 1e-9 * max(np.linalg.norm(o), 1.0):
            ax = np.cross(o, [1.0, 0.0, 0.0])
        n = np.linalg.norm(ax)
        axes[j] = ax / n if n > 0 else (1.0, 0.0, 0.0)
    return axes


def target_intensity(amp: np.ndarray, freq: np.ndarray, fps: float) -> np.ndarray:
    """Mean per-frame displacement of a sinusoid of amplitude ``amp`` along a line."""
    return 4.0 * amp * freq / fps


def _pose3d(rig: Rig, axes, theta_amp, amp_root, freq, t, phase, yaw) -> np.ndarray:
    N, T = rig.graph.n_joints, len(t)
    local = np.empty((T, N, 3, 3))
    local[:, 0] = axis_angle(np.array([0.0, 1.0, 0.0]), np.full(T, yaw))
    for j in range(1, N):
        local[:, j] = axis_angle(axes[j], theta_amp[j] * np.sin(2 * math.pi * freq[j] * t + phase[j]))
    root = np.zeros((T, 3))
    root[:, 0] = amp_root * np.sin(2 * math.pi * freq[0] * t + phase[0])
    return forward_kinematics(rig, local, root)


def swing_angles(rig: Rig, amp: np.ndarray, freq: np.ndarray, fps: float, T: int,
                 iters: int = 30) -> np.ndarray:
    """Local swing amplitudes (rad) whose measured joint intensity matches the profile.

    Fixed-point calibration on phase-aligned sequences: each joint's angle is
    rescaled by target/measured until the mean displacement agrees.
    """
    axes = swing_axes(rig)
    lengths = np.maximum(rig.bone_lengths, 1e-9)
    theta = amp / lengths
    theta[0] = 0.0
    want = target_intensity(amp, freq, fps)
    t = np.arange(max(T, 2)) / fps
    phases = np.linspace(0, 2 * math.pi, 4, endpoint=False)
    for _ in range(iters):
        poses = np.stack([_pose3d(rig, axes, theta, amp[0], freq, t, np.full(len(amp), ph), 0.0)
                          for ph in phases])
        got = motion_intensity(poses)
        ratio = np.where(got > 0, want / np.maximum(got, 1e-12), 1.0)
        theta = np.where(want > 0, theta * np.clip(ratio, 0.5, 2.0), 0.0)
        theta[0] = 0.0
    return theta


def _sequence(spec: SyntheticSpec, rig: Rig, amp, freq, theta, rng: np.random.Generator):
    N, T = rig.graph.n_joints, spec.T
    t = np.arange(T) / spec.fps
    phase = rng.uniform(0, 2 * math.pi) + rng.uniform(-PHASE_JITTER, PHASE_JITTER, size=N)
    yaw = rng.uniform(0, spec.yaw_range) if spec.random_yaw else 0.0
    cam = body_to_camera(_pose3d(rig, swing_axes(rig), theta, amp[0], freq, t, phase, yaw))
    uv = project(cam)
    if spec.noise_std_2d > 0:
        uv = uv + rng.normal(scale=spec.noise_std_2d, size=uv.shape)
    return cam, uv


def generate_synthetic(spec: SyntheticSpec) -> list[tuple[PoseSeq, PoseSeq]]:
    """(3D ground truth in camera mm, noisy 2D projection) pairs, bit-reproducible per seed."""
    spec.validate()
    rig = spec.rig()
    amp, freq = spec.profile()
    theta = swing_angles(rig, amp, freq, spec.fps, spec.T)
    streams = np.random.SeedSequence(spec.seed).spawn(spec.n_sequences)
    out = []
    for ss in streams:
        cam, uv = _sequence(spec, rig, amp, freq, theta, np.random.Generator(np.random.PCG64(ss)))
        out.append((PoseSeq(cam), PoseSeq(uv)))
    return out


def motion_intensity(pose: np.ndarray) -> np.ndarray:
    """Mean frame-to-frame displacement per joint of [..., T, N, k] data."""
    pose = np.asarray(pose, dtype=float)
    if pose.shape[-3] < 2:
        return np.zeros(pose.shape[-2])
    step = np.linalg.norm(np.diff(pose, axis=-3), axis=-1)
    return step.reshape(-1, pose.shape[-2]).mean(axis=0)


# ----------------------------------------------------------------- dataset files


class DatasetError(ValueError):
    pass


@dataclass
class Sequence:
    id: str
    skeleton: str
    fps: float
    pose2d: np.ndarray
    pose3d: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.pose2d.shape[0]


def synthetic_dataset(spec: SyntheticSpec, prefix: str = "syn") -> list[Sequence]:
    name = spec.skeleton if isinstance(spec.skeleton, str) else spec.skeleton.graph.name
    return [Sequence(f"{prefix}{i:04d}", name, spec.fps, p2.data.copy(), p3.data.copy())
            for i, (p3, p2) in enumerate(generate_synthetic(spec))]


def save_dataset(path, data: list[Sequence]) -> None:
    with open(path, "w") as fh:
        for s in data:
            rec = {"id": s.id, "skeleton": s.skeleton, "fps": float(s.fps), "pose2d": s.pose2d.tolist()}
            if s.pose3d is not None:
                rec["pose3d"] = s.pose3d.tolist()
            fh.write(json.dumps(rec) + "\n")


def _parse_line(line: str, lineno: int, expect_skeleton: str | None) -> Sequence:
    def fail(msg):
        raise DatasetError(f"line {lineno}: {msg}")

    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        fail(f"malformed JSON ({exc.msg})")
    if not isinstance(rec, dict):
        fail("record is not an object")
    for key in ("id", "skeleton", "fps", "pose2d"):
        if key not in rec:
            fail(f"missing field {key!r}")
    if expect_skeleton is not None and rec["skeleton"] != expect_skeleton:
        fail(f"skeleton {rec['skeleton']!r} does not match {expect_skeleton!r}")
    try:
        n = skeleton(rec["skeleton"]).n_joints
    except ValueError as exc:
        fail(str(exc))
    arrays = {}
    for key, k in (("pose2d", 2), ("pose3d", 3)):
        if key not in rec:
            continue
        try:
            arr = np.array(rec[key], dtype=float)
        except (ValueError, TypeError):
            fail(f"{key} is not a numeric array")
        if arr.ndim != 3 or arr.shape[1:] != (n, k) or arr.shape[0] < 1:
            fail(f"{key} has shape {arr.shape}, expected [T][{n}][{k}]")
        try:
            check_finite(arr, key)
        except ValueError as exc:
            fail(str(exc))
        arrays[key] = arr
    p3 = arrays.get("pose3d")
    if p3 is not None and p3.shape[0] != arrays["pose2d"].shape[0]:
        fail("pose2d and pose3d lengths differ")
    return Sequence(str(rec["id"]), rec["skeleton"], float(rec["fps"]), arrays["pose2d"], p3)


def load_dataset(path, skeleton_name: str | None = None) -> list[Sequence]:
    """Read a JSON-lines file.  All lines must share one skeleton (or ``skeleton_name``)."""
    out: list[Sequence] = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            seq = _parse_line(line, lineno, skeleton_name)
            skeleton_name = seq.skeleton
            out.append(seq)
    if not out:
        raise DatasetError(f"{Path(path).name}: no sequences")
    return out


# ----------------------------------------------------------------- batching


def root_center(pose3d: np.ndarray) -> np.ndarray:
    return pose3d - pose3d[..., :1, :]


def clip_grid(data: list[Sequence], clip_len: int, stride: int) -> list[tuple[int, int]]:
    """(sequence index, start) for every strided window that fits."""
    out = []
    for i, s in enumerate(data):
        out.extend((i, st) for st in range(0, s.T - clip_len + 1, stride))
    return out


def batcher(data: list[Sequence], batch: int, clip_len: int, stride: int,
            rng: np.random.Generator | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (input [B,T,N,2], root-centred target [B,T,N,3]).

    With ``rng`` (training) the epoch has as many clips as the strided grid,
    each drawn from a uniformly random valid start.  Without ``rng`` the
    strided grid is walked in order.
    """
    if batch < 1 or clip_len < 1 or stride < 1:
        raise ValueError("batch, clip_len and stride must be positive")
    for s in data:
        if s.T < clip_len:
            raise ValueError(f"sequence {s.id} has {s.T} frames, fewer than clip_len={clip_len}")
        if s.pose3d is None:
            raise ValueError(f"sequence {s.id} has no 3D targets")
    grid = clip_grid(data, clip_len, stride)
    if rng is not None:
        starts = np.array([s.T - clip_len + 1 for s in data], dtype=float)
        seq_idx = rng.choice(len(data), size=len(grid), p=starts / starts.sum())
        grid = [(int(i), int(rng.integers(0, data[i].T - clip_len + 1))) for i in seq_idx]
    for b0 in range(0, len(grid), batch):
        chunk = grid[b0:b0 + batch]
        x = np.stack([data[i].pose2d[st:st + clip_len] for i, st in chunk])
        y = np.stack([root_center(data[i].pose3d[st:st + clip_len]) for i, st in chunk])
        yield x, y
