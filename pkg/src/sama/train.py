"""Optimiser, training loop, evaluation and reference baselines."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .core import ModelConfig, named_rng
from .data import Sequence, batcher, clip_grid, root_center
from .losses import all_metrics, total_loss
from .network import SamaModel, forward, save_checkpoint

log = logging.getLogger(__name__)

LOG_FIELDS = ("epoch", "train_loss", "eval_mpjpe", "lr")


class AdamW:
    """Adam with decoupled weight decay: p -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * p)."""

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = list(params)
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.value
            p.value = p.value - self.lr * update

    def decay(self, factor: float) -> None:
        self.lr *= factor


def check_dataset(model: SamaModel, data: list[Sequence], need_3d: bool = True) -> None:
    n = model.graph.n_joints
    for s in data:
        if s.skeleton != model.graph.name:
            raise ValueError(f"sequence {s.id}: skeleton {s.skeleton!r} but model uses {model.graph.name!r}")
        if s.pose2d.shape[1] != n or (s.pose3d is not None and s.pose3d.shape[1] != n):
            raise ValueError(f"sequence {s.id}: joint count does not match the model ({n})")
        if need_3d and s.pose3d is None:
            raise ValueError(f"sequence {s.id} has no 3D targets")


def train_step(model: SamaModel, opt: AdamW, x: np.ndarray, y: np.ndarray) -> float:
    cfg = model.config
    model.store.zero_grad()
    with ad.Tape() as tape:
        pred = forward(model, x)
        loss, _ = total_loss(pred, y, cfg.lambda_m, cfg.lambda_n, cfg.joint_weights)
    tape.backward(loss)
    opt.step()
    return float(loss.value)


def eval_clips(model: SamaModel, data: list[Sequence], batch: int = 16):
    """Predictions and root-centred targets [C, T, N, 3] on the strided eval grid."""
    cfg = model.config
    preds, gts = [], []
    for x, y in batcher(data, batch, cfg.clip_len, cfg.clip_len):
        preds.append(forward(model, x).value)
        gts.append(y)
    return np.concatenate(preds), np.concatenate(gts)


def evaluate(model: SamaModel, data: list[Sequence]) -> dict:
    pred, gt = eval_clips(model, data)
    return all_metrics(pred, gt)


def eval_mpjpe(model: SamaModel, data: list[Sequence]) -> float:
    pred, gt = eval_clips(model, data)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    @property
    def final(self) -> dict:
        return self.history[-1]


def train(model: SamaModel, train_set: list[Sequence], eval_set: list[Sequence] | None = None,
          out_dir=None, epochs: int | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Run the configured schedule.  Each epoch draws as many random clips as the
    strided grid holds; the learning rate decays by ``lr_decay`` after every epoch.

    With ``out_dir`` set, writes ``train_log.csv`` and a checkpoint every
    ``checkpoint_every`` epochs plus ``final.sama``.
    """
    cfg: ModelConfig = model.config
    check_dataset(model, train_set)
    if eval_set:
        check_dataset(model, eval_set)
    if not clip_grid(train_set, cfg.clip_len, cfg.stride):
        raise ValueError("training set has no clip of the configured length")
    epochs = cfg.epochs if epochs is None else epochs
    opt = AdamW(model.params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = named_rng(cfg.seed, "batcher")
    result = TrainResult()
    writer = fh = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
    try:
        for epoch in range(epochs):
            losses = [train_step(model, opt, x, y)
                      for x, y in batcher(train_set, cfg.batch_size, cfg.clip_len, cfg.stride, rng)]
            row = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                   "eval_mpjpe": eval_mpjpe(model, eval_set) if eval_set else float("nan"),
                   "lr": opt.lr}
            if not np.isfinite(row["train_loss"]):
                raise FloatingPointError(f"training diverged at epoch {epoch}")
            opt.decay(cfg.lr_decay)
            result.history.append(row)
            if writer is not None:
                writer.writerow(row)
                fh.flush()
                if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                    path = out_dir / f"epoch_{epoch + 1:04d}.sama"
                    save_checkpoint(path, model, {"epoch": epoch + 1})
                    result.checkpoints.append(str(path))
            if on_epoch is not None:
                on_epoch(row)
            log.info("epoch %d loss %.3f eval %.2f", epoch, row["train_loss"], row["eval_mpjpe"])
        if out_dir is not None:
            path = out_dir / "final.sama"
            save_checkpoint(path, model, {"epoch": epochs})
            result.checkpoints.append(str(path))
    finally:
        if fh is not None:
            fh.close()
    return result


# ----------------------------------------------------------------- baselines


@dataclass
class LinearBaseline:
    """Independent affine map per joint from its own 2D position to its root-relative 3D position."""

    coef: np.ndarray  # [N, 3, 3]: rows (u, v, 1) -> (x, y, z)

    @staticmethod
    def _features(pose2d: np.ndarray) -> np.ndarray:
        return np.concatenate([pose2d, np.ones(pose2d.shape[:-1] + (1,))], axis=-1)

    @classmethod
    def fit(cls, data: list[Sequence]) -> "LinearBaseline":
        x = np.concatenate([cls._features(s.pose2d) for s in data])      # [F, N, 3]
        y = np.concatenate([root_center(s.pose3d) for s in data])        # [F, N, 3]
        coef = np.stack([np.linalg.lstsq(x[:, j], y[:, j], rcond=None)[0] for j in range(x.shape[1])])
        return cls(coef)

    def predict(self, pose2d: np.ndarray) -> np.ndarray:
        return np.einsum("...nk,nkc->...nc", self._features(pose2d), self.coef)

    def evaluate(self, data: list[Sequence], clip_len: int) -> dict:
        xs, ys = zip(*batcher(data, 16, clip_len, clip_len))
        x, y = np.concatenate(xs), np.concatenate(ys)
        return all_metrics(self.predict(x), y)


# ----------------------------------------------------------------- inspection


def joint_deltas(model: SamaModel, data: list[Sequence], batch: int = 16) -> np.ndarray:
    """Mean MSM timescale per joint over every layer, head, frame and clip.

    Clips tile each sequence with stride ``clip_len``; only 2D input is needed.
    """
    cfg = model.config
    grid = clip_grid(data, cfg.clip_len, cfg.clip_len)
    sums = np.zeros(model.graph.n_joints)
    count = 0
    for b0 in range(0, len(grid), batch):
        x = np.stack([data[i].pose2d[st:st + cfg.clip_len] for i, st in grid[b0:b0 + batch]])
        cap: list = []
        forward(model, x, capture_delta=cap)
        for d in cap:  # [B, N, T, H]
            sums += d.mean(axis=(-1, -2)).sum(axis=0)
            count += d.shape[0]
    if not count:
        raise ValueError("no temporal layers or no clips to inspect")
    return sums / count


def delta_report(model: SamaModel, data: list[Sequence]) -> dict:
    """Per-joint mean timescale next to per-joint mean 2D motion intensity, with their Spearman rho."""
    from scipy.stats import spearmanr

    from .core import H36M_NAMES
    from .data import motion_intensity

    delta = joint_deltas(model, data)
    intensity = np.mean([motion_intensity(s.pose2d) for s in data], axis=0)
    rho = float(spearmanr(intensity, delta).statistic)
    names = list(H36M_NAMES) if model.graph.name == "h36m" else [str(i) for i in range(len(delta))]
    return {"joints": names, "mean_delta": delta.tolist(), "motion_intensity": intensity.tolist(),
            "spearman": rho}


def adjacency_matrices(model: SamaModel) -> list[np.ndarray]:
    """Row-softmax fusion matrix of every SSI layer."""
    return [blk.adjacency.m.value for blk in model.spatial if blk.adjacency is not None]
