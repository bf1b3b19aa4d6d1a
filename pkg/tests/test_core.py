import numpy as np
import pytest
from scipy.stats import chisquare

from sama.core import (H36M_EDGES, JointGraph, ModelConfig, ParamStore, PoseSeq, h36m_graph,
                       init_param, named_rng, seeded_rng, skeleton)


def test_seeded_rng_is_deterministic():
    a = seeded_rng(0).random(10)
    b = seeded_rng(0).random(10)
    assert np.array_equal(a, b)


def test_seeds_differ():
    assert seeded_rng(0).random() != seeded_rng(1).random()


@pytest.mark.parametrize("seed", [0, 7, 2024])
def test_uniform_draws_pass_chi_square(seed):
    draws = seeded_rng(seed).random(100_000)
    assert draws.min() >= 0.0 and draws.max() < 1.0
    counts, _ = np.histogram(draws, bins=20, range=(0, 1))
    assert chisquare(counts).pvalue > 1e-3


def test_named_streams_are_independent_of_order():
    s1 = ParamStore(seed=3)
    s1.new("a", (4,))
    s1.new("b", (4,))
    s2 = ParamStore(seed=3)
    s2.new("b", (4,))
    assert np.array_equal(s1["b"].value, s2["b"].value)
    assert not np.array_equal(named_rng(3, "a").random(4), named_rng(3, "b").random(4))


def test_init_schemes():
    assert np.array_equal(init_param(3, "zeros").value, [0, 0, 0])
    assert np.array_equal(init_param(2, "constant", c=0.5).value, [0.5, 0.5])
    p = init_param((4, 2500), rng=seeded_rng(0))
    assert np.all(np.abs(p.value) <= 0.5)
    with pytest.raises(ValueError):
        init_param((0, 3), rng=seeded_rng(0))
    with pytest.raises(ValueError):
        init_param(3, "gaussian")


def test_duplicate_param_rejected():
    s = ParamStore()
    s.new("w", (2,))
    with pytest.raises(KeyError):
        s.new("w", (2,))


def test_poseseq_validation():
    p = PoseSeq(np.zeros((4, 17, 2)))
    assert (p.T, p.N, p.k) == (4, 17, 2)
    with pytest.raises(ValueError):
        PoseSeq(np.zeros((4, 17, 4)))
    with pytest.raises(ValueError):
        PoseSeq(np.zeros((0, 17, 3)))
    bad = np.zeros((2, 3, 3))
    bad[1, 1, 1] = np.nan
    with pytest.raises(ValueError, match="non-finite"):
        PoseSeq(bad)


def test_h36m_graph():
    g = h36m_graph()
    assert g.n_joints == 17 and len(g.edges) == 16
    assert np.array_equal(g.m_o, g.m_o.T)
    assert g.parents()[0] == -1
    assert [g.parents()[b] for a, b in H36M_EDGES] == [a for a, b in H36M_EDGES]
    assert skeleton("h36m") == g
    with pytest.raises(ValueError):
        skeleton("mpii")


def test_graph_rejects_bad_edges():
    with pytest.raises(ValueError):
        JointGraph(3, ((0, 0),))
    with pytest.raises(ValueError):
        JointGraph(3, ((0, 5),))
    with pytest.raises(ValueError, match="connected"):
        JointGraph(3, ((0, 1),))


def test_config_validation_and_round_trip(tmp_path):
    cfg = ModelConfig(depth=1, d_model=8, heads=2)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg
    path = tmp_path / "c.json"
    path.write_text('{"d_model": 16, "heads": 4}')
    assert ModelConfig.from_json(path).d_model == 16
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, heads=3)
    with pytest.raises(ValueError):
        ModelConfig(msm_variant="lstm")
    with pytest.raises(ValueError, match="unknown config keys"):
        ModelConfig.from_dict({"width": 3})
    with pytest.raises(ValueError):
        ModelConfig(input_scale=0)
