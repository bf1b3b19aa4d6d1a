import json
import math

import numpy as np
import pytest
from scipy.stats import spearmanr

from sama.core import JointGraph
from sama.data import (DEPTH_OFFSET_MM, H36M_AMPLITUDES, DatasetError, Rig, Sequence, SyntheticSpec,
                       axis_angle, batcher, clip_grid, generate_synthetic, load_dataset, motion_intensity,
                       project, save_dataset, synthetic_dataset)


def pair_rig(offset):
    return Rig(JointGraph(2, ((0, 1),), name="pair"), np.array([[0, 0, 0], offset], dtype=float))


def test_pinhole_two_joint_toy():
    spec = SyntheticSpec(n_sequences=1, T=3, skeleton=pair_rig([300.0, 200.0, 500.0]),
                         amplitudes=[0.0, 0.0], random_yaw=False)
    (p3, p2), = generate_synthetic(spec)
    X, Y, Z = 300.0, -200.0, 500.0 + DEPTH_OFFSET_MM  # camera y points down
    assert np.allclose(p3.data[0, 1], [X, Y, Z])
    assert np.allclose(p2.data[:, 1], [X / Z, Y / Z], rtol=0, atol=1e-15)
    assert np.allclose(p2.data[:, 0], 0.0)


def test_static_when_amplitudes_zero():
    spec = SyntheticSpec(n_sequences=2, T=5, amplitudes=np.zeros(17), noise_std_2d=0.0)
    for p3, p2 in generate_synthetic(spec):
        assert np.allclose(p2.data, p2.data[0], rtol=0, atol=1e-15)
        assert np.allclose(p3.data, p3.data[0], rtol=0, atol=1e-12)


def test_bone_lengths_constant():
    spec = SyntheticSpec(n_sequences=3, T=40)
    rig = spec.rig()
    parents = rig.graph.parents()
    for p3, _ in generate_synthetic(spec):
        for j in range(1, 17):
            bone = np.linalg.norm(p3.data[:, j] - p3.data[:, parents[j]], axis=-1)
            assert np.abs(bone - rig.bone_lengths[j]).max() < 1e-9


def test_reproducible_per_seed():
    a = generate_synthetic(SyntheticSpec(n_sequences=2, T=8, noise_std_2d=0.01, seed=4))
    b = generate_synthetic(SyntheticSpec(n_sequences=2, T=8, noise_std_2d=0.01, seed=4))
    c = generate_synthetic(SyntheticSpec(n_sequences=2, T=8, noise_std_2d=0.01, seed=5))
    assert all(np.array_equal(x[1].data, y[1].data) for x, y in zip(a, b))
    assert not np.array_equal(a[0][1].data, c[0][1].data)


def test_intensity_follows_amplitudes():
    spec = SyntheticSpec(n_sequences=8, T=64, seed=0)
    p3 = np.stack([p.data for p, _ in generate_synthetic(spec)])
    rho = spearmanr(motion_intensity(p3), H36M_AMPLITUDES).statistic
    assert rho == pytest.approx(1.0)


def test_limbs_move_more_than_trunk():
    amp = H36M_AMPLITUDES
    trunk = amp[[0, 7, 8, 9]]
    limbs = amp[[3, 6, 13, 16]]
    assert limbs.min() > trunk.max()


def test_projection_rejects_points_behind_camera():
    with pytest.raises(ValueError):
        project(np.array([[0.0, 0.0, -1.0]]))


def test_axis_angle_is_rotation():
    r = axis_angle(np.array([0.0, 0.0, 1.0]), np.array(math.pi / 2))
    assert np.allclose(r @ [1, 0, 0], [0, 1, 0])
    assert np.allclose(r @ r.T, np.eye(3))


def test_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(amplitudes=-np.ones(17)).validate()
    with pytest.raises(ValueError):
        SyntheticSpec(amplitudes=np.ones(3)).validate()
    with pytest.raises(ValueError):
        SyntheticSpec(skeleton="mpii").validate()
    with pytest.raises(ValueError):
        SyntheticSpec(noise_std_2d=-1).validate()


# ----------------------------------------------------------------- files


def test_round_trip_is_exact(tmp_path):
    data = synthetic_dataset(SyntheticSpec(n_sequences=3, T=6, noise_std_2d=0.01))
    data[1].pose3d = None
    path = tmp_path / "d.jsonl"
    save_dataset(path, data)
    back = load_dataset(path)
    assert [s.id for s in back] == [s.id for s in data]
    assert np.array_equal(back[0].pose2d, data[0].pose2d)
    assert np.array_equal(back[0].pose3d, data[0].pose3d)
    assert back[1].pose3d is None


def _write(tmp_path, lines):
    path = tmp_path / "bad.jsonl"
    path.write_text("\n".join(lines) + "\n")
    return path


def test_errors_name_the_line(tmp_path):
    good = json.dumps({"id": "a", "skeleton": "h36m", "fps": 50, "pose2d": np.zeros((2, 17, 2)).tolist()})
    with pytest.raises(DatasetError, match="line 2"):
        load_dataset(_write(tmp_path, [good, good[:40]]))
    rec = json.loads(good)
    del rec["fps"]
    with pytest.raises(DatasetError, match="line 1: missing field 'fps'"):
        load_dataset(_write(tmp_path, [json.dumps(rec)]))
    rec = json.loads(good)
    rec["pose2d"] = np.zeros((2, 5, 2)).tolist()
    with pytest.raises(DatasetError, match="shape"):
        load_dataset(_write(tmp_path, [json.dumps(rec)]))
    rec = json.loads(good)
    rec["skeleton"] = "mpii"
    with pytest.raises(DatasetError, match="unknown skeleton"):
        load_dataset(_write(tmp_path, [json.dumps(rec)]))
    with pytest.raises(DatasetError, match="does not match"):
        load_dataset(_write(tmp_path, [good]), "other")
    with pytest.raises(DatasetError, match="no sequences"):
        load_dataset(_write(tmp_path, [""]))


# ----------------------------------------------------------------- batching


def _seqs(n, T):
    rng = np.random.default_rng(0)
    return [Sequence(f"s{i}", "h36m", 50.0, rng.standard_normal((T, 17, 2)), rng.standard_normal((T, 17, 3)))
            for i in range(n)]


def test_eval_grid_two_clips():
    data = _seqs(1, 16)
    clips = list(batcher(data, 4, 8, 8))
    assert len(clips) == 1 and clips[0][0].shape == (2, 8, 17, 2)
    assert np.array_equal(clips[0][0][1], data[0].pose2d[8:])


def test_targets_root_centred():
    for _, y in batcher(_seqs(3, 10), 2, 4, 2, np.random.default_rng(1)):
        assert np.all(y[:, :, 0] == 0)


def test_random_schedule_reproducible():
    data = _seqs(3, 20)
    a = [x for x, _ in batcher(data, 2, 5, 5, np.random.default_rng(7))]
    b = [x for x, _ in batcher(data, 2, 5, 5, np.random.default_rng(7))]
    assert all(np.array_equal(u, v) for u, v in zip(a, b))
    assert sum(len(x) for x in a) == len(clip_grid(data, 5, 5))


def test_batcher_errors():
    with pytest.raises(ValueError):
        list(batcher(_seqs(1, 4), 2, 8, 8))
    seqs = _seqs(1, 8)
    seqs[0].pose3d = None
    with pytest.raises(ValueError):
        list(batcher(seqs, 2, 4, 4))
