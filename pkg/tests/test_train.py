import csv

import numpy as np
import pytest

from sama.autodiff import Param
from sama.core import ModelConfig
from sama.data import Sequence, SyntheticSpec, synthetic_dataset
from sama.network import SamaModel, load_checkpoint
from sama.train import (AdamW, LinearBaseline, adjacency_matrices, delta_report, evaluate, joint_deltas,
                        train)


def tiny_cfg(**kw):
    base = dict(depth=1, d_model=8, d_state=2, heads=2, batch_size=2, clip_len=4, stride=4, epochs=1,
                checkpoint_every=1)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture(scope="module")
def tiny_data():
    return synthetic_dataset(SyntheticSpec(n_sequences=4, T=8, seed=3))


def test_adamw_first_step_by_hand():
    p = Param(np.array([1.0, -2.0]))
    p.grad = np.array([0.5, -0.1])
    opt = AdamW([p], lr=0.1, weight_decay=0.01)
    opt.step()
    # bias-corrected first step is g/|g| elementwise, plus decoupled decay
    expected = np.array([1.0, -2.0]) - 0.1 * (np.sign([0.5, -0.1]) * (1 - 1e-8 / (np.abs([0.5, -0.1]) + 1e-8))
                                              + 0.01 * np.array([1.0, -2.0]))
    assert np.allclose(p.value, expected, rtol=1e-12)
    opt.decay(0.5)
    assert opt.lr == pytest.approx(0.05)


def test_zero_lr_leaves_params(tiny_data):
    model = SamaModel(tiny_cfg(lr=0.0, weight_decay=0.0))
    before = {p.name: p.value.copy() for p in model.params}
    train(model, tiny_data)
    assert all(np.array_equal(before[p.name], p.value) for p in model.params)


def test_one_epoch_log_and_checkpoint(tiny_data, tmp_path):
    model = SamaModel(tiny_cfg())
    res = train(model, tiny_data, tiny_data, out_dir=tmp_path)
    rows = list(csv.DictReader(open(tmp_path / "train_log.csv")))
    assert len(rows) == 1 and set(rows[0]) == {"epoch", "train_loss", "eval_mpjpe", "lr"}
    assert (tmp_path / "epoch_0001.sama").exists() and (tmp_path / "final.sama").exists()
    reloaded, meta = load_checkpoint(tmp_path / "final.sama")
    assert meta["epoch"] == 1
    assert evaluate(reloaded, tiny_data) == evaluate(model, tiny_data)
    assert float(rows[0]["eval_mpjpe"]) == pytest.approx(evaluate(model, tiny_data)["mpjpe"])
    assert res.final["train_loss"] > 0


def test_training_is_deterministic(tiny_data):
    a, b = SamaModel(tiny_cfg(epochs=2)), SamaModel(tiny_cfg(epochs=2))
    ha, hb = train(a, tiny_data).history, train(b, tiny_data).history
    assert [h["train_loss"] for h in ha] == [h["train_loss"] for h in hb]


def test_loss_goes_down(tiny_data):
    res = train(SamaModel(tiny_cfg(epochs=15, lr=1e-2)), tiny_data)
    assert res.history[-1]["train_loss"] < 0.7 * res.history[0]["train_loss"]


def test_training_rejects_bad_data(tiny_data):
    short = [Sequence("x", "h36m", 50.0, np.zeros((2, 17, 2)), np.zeros((2, 17, 3)))]
    with pytest.raises(ValueError):
        train(SamaModel(tiny_cfg()), short)
    no3d = [Sequence("x", "h36m", 50.0, np.zeros((8, 17, 2)))]
    with pytest.raises(ValueError, match="no 3D"):
        train(SamaModel(tiny_cfg()), no3d)


def test_linear_baseline_recovers_affine_map(rng):
    coef = rng.standard_normal((17, 3, 3))
    x = rng.standard_normal((30, 17, 2))
    y = np.einsum("tnk,nkc->tnc", np.concatenate([x, np.ones((30, 17, 1))], -1), coef)
    y[:, 0] = 0.0  # root-relative targets
    coef[0] = 0.0
    seq = Sequence("a", "h36m", 50.0, x, y)
    fit = LinearBaseline.fit([seq])
    assert np.allclose(fit.coef, coef, atol=1e-10)
    assert fit.evaluate([seq], 10)["mpjpe"] < 1e-9


def test_delta_report_and_adjacency(tiny_data):
    model = SamaModel(tiny_cfg())
    rep = delta_report(model, [Sequence(s.id, s.skeleton, s.fps, s.pose2d) for s in tiny_data])
    assert len(rep["mean_delta"]) == 17 and -1 <= rep["spearman"] <= 1
    assert np.all(joint_deltas(model, tiny_data) > 0)
    mats = adjacency_matrices(model)
    assert len(mats) == 1 and np.allclose(mats[0].sum(axis=1), 1.0)
    with pytest.raises(ValueError):
        joint_deltas(SamaModel(tiny_cfg(depth=0)), tiny_data)
