"""Desk-scale training experiments: module ablation, learning sanity, timescale report.

Every run is cached as one JSON file keyed by its full configuration, so a
repeated call only trains what is missing.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import ModelConfig
from .data import Sequence, SyntheticSpec, synthetic_dataset
from .network import SamaModel
from .train import LinearBaseline, delta_report, evaluate, train

log = logging.getLogger(__name__)

VARIANTS = {
    "vanilla": {"use_ssi": False, "use_msm": False},
    "ssi": {"use_ssi": True, "use_msm": False},
    "msm": {"use_ssi": False, "use_msm": True},
    "full": {"use_ssi": True, "use_msm": True},
}
SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class Benchmark:
    """Synthetic train/eval split; replicate ``seed`` draws both sets and the model init."""

    n_train: int = 64
    n_eval: int = 16
    frames: int = 32
    noise_std_2d: float = 0.002
    epochs: int = 200

    def data(self, seed: int) -> tuple[list[Sequence], list[Sequence]]:
        tr = SyntheticSpec(n_sequences=self.n_train, T=self.frames, noise_std_2d=self.noise_std_2d,
                           seed=1000 * seed + 1)
        ev = SyntheticSpec(n_sequences=self.n_eval, T=self.frames, noise_std_2d=self.noise_std_2d,
                           seed=1000 * seed + 2)
        return synthetic_dataset(tr, "train"), synthetic_dataset(ev, "eval")


def variant_config(variant: str, seed: int, base: ModelConfig | None = None,
                   epochs: int | None = None) -> ModelConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    base = base if base is not None else ModelConfig()
    kw = dict(VARIANTS[variant], seed=seed)
    if epochs is not None:
        kw["epochs"] = epochs
    return base.replace(**kw)


def run_key(variant: str, seed: int, bench: Benchmark, cfg: ModelConfig) -> str:
    blob = json.dumps({"variant": variant, "seed": seed, "bench": dataclasses.asdict(bench),
                       "config": cfg.to_dict()}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def run_one(variant: str, seed: int, bench: Benchmark = Benchmark(),
            base: ModelConfig | None = None) -> dict:
    """Train one variant on one replicate and collect everything the checks need."""
    cfg = variant_config(variant, seed, base, bench.epochs)
    train_set, eval_set = bench.data(seed)
    model = SamaModel(cfg)
    t0 = time.perf_counter()
    result = train(model, train_set)
    wall = time.perf_counter() - t0
    hist = result.history
    rec = {
        "variant": variant, "seed": seed, "bench": dataclasses.asdict(bench), "config": cfg.to_dict(),
        "params": model.num_params(), "wall_s": wall,
        "train_loss": [h["train_loss"] for h in hist],
        "eval": evaluate(model, eval_set),
        "linear_baseline_eval": LinearBaseline.fit(train_set).evaluate(eval_set, cfg.clip_len),
    }
    if cfg.use_msm:
        rec["delta"] = delta_report(model, eval_set)
    return rec


def run_grid(cache_dir, variants=tuple(VARIANTS), seeds=SEEDS, bench: Benchmark = Benchmark(),
             base: ModelConfig | None = None) -> list[dict]:
    """Run (or load from ``cache_dir``) every variant x seed combination."""
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    out = []
    for seed in seeds:
        for variant in variants:
            cfg = variant_config(variant, seed, base, bench.epochs)
            path = cache / f"{variant}_seed{seed}_{run_key(variant, seed, bench, cfg)}.json"
            if path.exists():
                rec = json.loads(path.read_text())
            else:
                log.info("training %s seed %d", variant, seed)
                rec = run_one(variant, seed, bench, base)
                path.write_text(json.dumps(rec, indent=1) + "\n")
            out.append(rec)
    return out


def summarize(records: list[dict]) -> dict:
    """Median held-out MPJPE per variant plus the directional verdicts."""
    by = {}
    for r in records:
        by.setdefault(r["variant"], []).append(r)
    med = {v: float(np.median([r["eval"]["mpjpe"] for r in rs])) for v, rs in by.items()}
    out = {"median_mpjpe": med, "runs": {v: len(rs) for v, rs in by.items()}}
    if set(VARIANTS) <= set(med):
        out["ablation_order"] = (med["full"] <= med["ssi"] and med["full"] <= med["msm"]
                                 and med["ssi"] <= med["vanilla"] and med["msm"] <= med["vanilla"])
    full = by.get("full", [])
    if full:
        ratios = [r["train_loss"][-1] / r["train_loss"][0] for r in full]
        lin = [r["linear_baseline_eval"]["mpjpe"] for r in full]
        rhos = [r["delta"]["spearman"] for r in full if "delta" in r]
        out["loss_ratio"] = ratios
        out["linear_baseline_mpjpe"] = lin
        out["learning_sanity"] = (all(x <= 0.5 for x in ratios)
                                  and all(r["eval"]["mpjpe"] < b for r, b in zip(full, lin)))
        if rhos:
            out["delta_spearman"] = rhos
            out["delta_spearman_median"] = float(np.median(rhos))
    return out
