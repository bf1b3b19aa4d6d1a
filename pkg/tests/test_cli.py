import csv
import io
import json

import numpy as np
import pytest

from sama.cli import main
from sama.core import ModelConfig
from sama.network import macs_per_frame

TINY = ["--depth", "1", "--d-model", "8", "--d-state", "2", "--heads", "2", "--clip-len", "8",
        "--stride", "8", "--batch-size", "4", "--checkpoint-every", "0"]


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--out", str(d / "train.jsonl"), "--n-sequences", "3", "--frames", "16",
                 "--seed", "1"]) == 0
    assert main(["gen-data", "--out", str(d / "eval.jsonl"), "--n-sequences", "2", "--frames", "16",
                 "--seed", "2"]) == 0
    assert main(["train", "--train", str(d / "train.jsonl"), "--eval", str(d / "eval.jsonl"),
                 "--out", str(d / "run"), "--epochs-override", "1", *TINY]) == 0
    return d


def test_help_and_usage_errors(capsys):
    assert main(["--help"]) == 0
    assert "gen-data" in capsys.readouterr().out
    assert main([]) == 2
    assert main(["train", "--no-such-flag"]) == 2
    assert main(["--threads", "0", "verify", "--only", "param_count"]) == 2


def test_gen_data_outputs(workdir):
    meta = json.loads((workdir / "train.jsonl.meta.json").read_text())
    assert meta["sequences"] == 3 and len(meta["spec"]["amplitudes"]) == 17
    assert len((workdir / "train.jsonl").read_text().splitlines()) == 3


def test_gen_data_is_deterministic(tmp_path):
    for name in ("a", "b"):
        main(["gen-data", "--out", str(tmp_path / f"{name}.jsonl"), "--n-sequences", "2", "--frames", "4",
              "--noise-std", "0.01"])
    assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()


def test_train_outputs(workdir):
    run = workdir / "run"
    cfg = json.loads((run / "config.json").read_text())
    assert cfg["d_model"] == 8 and cfg["depth"] == 1
    summary = json.loads((run / "summary.json").read_text())
    assert summary["epochs"] == 1 and "mpjpe" in summary["eval"]
    assert "mpjpe" in summary["linear_baseline_eval"]
    assert (run / "final.sama").exists() and (run / "train_log.csv").exists()


def test_config_file_and_flag_precedence(tmp_path, workdir):
    (tmp_path / "c.json").write_text(json.dumps({"d_model": 4, "heads": 1, "depth": 1, "d_state": 2,
                                                 "clip_len": 8, "stride": 8}))
    out = tmp_path / "run"
    assert main(["train", "--train", str(workdir / "train.jsonl"), "--out", str(out), "--config",
                 str(tmp_path / "c.json"), "--d-model", "6", "--no-use-msm", "--epochs-override", "1"]) == 0
    cfg = json.loads((out / "config.json").read_text())
    assert cfg["d_model"] == 6 and cfg["heads"] == 1 and cfg["use_msm"] is False


def test_invalid_config_exit_1(tmp_path, workdir, capsys):
    code = main(["train", "--train", str(workdir / "train.jsonl"), "--out", str(tmp_path / "r"),
                 "--d-model", "7", "--heads", "2"])
    assert code == 1 and "divisible" in capsys.readouterr().err
    (tmp_path / "c.json").write_text('{"widht": 3}')
    assert main(["train", "--train", str(workdir / "train.jsonl"), "--out", str(tmp_path / "r"),
                 "--config", str(tmp_path / "c.json")]) == 1


def test_missing_dataset_exit_1(tmp_path, capsys):
    assert main(["train", "--train", str(tmp_path / "nope.jsonl"), "--out", str(tmp_path / "r")]) == 1


def test_eval_oracle_and_repeatability(workdir, capsys):
    ck, data = str(workdir / "run" / "final.sama"), str(workdir / "eval.jsonl")
    assert main(["eval", "--checkpoint", ck, "--data", data, "--oracle"]) == 0
    m = json.loads(capsys.readouterr().out)["metrics"]
    assert m["mpjpe"] == 0 and m["p_mpjpe"] < 1e-9 and m["mpjve"] == 0
    assert m["pck"] == 100 and m["auc"] == 100
    assert main(["eval", "--checkpoint", ck, "--data", data]) == 0
    first = capsys.readouterr().out
    assert main(["eval", "--checkpoint", ck, "--data", data]) == 0
    assert capsys.readouterr().out == first
    assert json.loads(first)["metrics"]["mpjpe"] > 0


def test_eval_bad_magic(workdir, tmp_path, capsys):
    raw = bytearray((workdir / "run" / "final.sama").read_bytes())
    raw[:4] = b"XXXX"
    (tmp_path / "bad.sama").write_bytes(bytes(raw))
    assert main(["eval", "--checkpoint", str(tmp_path / "bad.sama"), "--data",
                 str(workdir / "eval.jsonl")]) == 1
    assert "bad checkpoint magic" in capsys.readouterr().err


def test_eval_skeleton_mismatch(workdir, tmp_path, capsys):
    rec = json.loads((workdir / "eval.jsonl").read_text().splitlines()[0])
    rec["pose2d"] = [f[:5] for f in rec["pose2d"]]
    rec["pose3d"] = [f[:5] for f in rec["pose3d"]]
    (tmp_path / "x.jsonl").write_text(json.dumps(rec) + "\n")
    assert main(["eval", "--checkpoint", str(workdir / "run" / "final.sama"), "--data",
                 str(tmp_path / "x.jsonl")]) == 1


def test_dump_commands(workdir, capsys):
    ck = str(workdir / "run" / "final.sama")
    assert main(["dump-adjacency", "--checkpoint", ck]) == 0
    layers = json.loads(capsys.readouterr().out)["layers"]
    assert len(layers) == 1 and np.allclose(np.sum(layers[0], axis=1), 1.0)
    assert main(["dump-delta", "--checkpoint", ck, "--data", str(workdir / "eval.jsonl")]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["joints"][0] == "pelvis" and len(rep["mean_delta"]) == 17
    assert len(rep["motion_intensity"]) == 17 and -1 <= rep["spearman"] <= 1


def test_verify_detects_injected_fault(capsys):
    assert main(["verify", "--only", "dual_form_equivalence", "chunked_nondividing"]) == 0
    assert main(["verify", "--only", "dual_form_equivalence", "--inject-fault", "quadratic"]) == 1
    assert "FAIL" in capsys.readouterr().out


def _bench(args, capsys):
    assert main(["bench", *args]) == 0
    return list(csv.DictReader(io.StringIO(capsys.readouterr().out)))


def test_bench_chunk_sweep(capsys, tmp_path):
    rows = _bench(["--t", "1024", "--forms", "rec,chunk", "--chunk", "1,8,64", "--repeats", "1",
                   "--out", str(tmp_path / "b.csv")], capsys)
    chunk_rows = [r for r in rows if r["form"] == "chunk"]
    assert [r["chunk"] for r in chunk_rows] == ["1", "8", "64"]
    assert all(float(r["max_rel_dev"]) < 1e-10 for r in rows)
    assert (tmp_path / "b.csv.config.json").exists()


def test_bench_mac_column(capsys):
    rows = _bench(["--t", "32", "--forms", "rec", "--repeats", "1", "--d-model", "16", "--depth", "1",
                   "--macs-frames", "81"], capsys)
    d, n, H, K, N, T = 16, 8, 2, 1, 17, 81  # state size and heads keep their config defaults
    per_ssd = N * d * 2 * n + N * d * H + 2 * N * d * n + N * d * d
    hand = 5 * N * d + K * (2 * per_ssd + N * N * d + N * N * d * n + 2 * N * d
                            + 16 * N * d * d + 2 * N * N * d + 2 * N * T * d)
    assert int(rows[0]["macs_per_frame"]) == hand
    assert hand == macs_per_frame(ModelConfig(d_model=16, depth=1), 17, 81)


def test_recurrent_time_roughly_linear(capsys):
    rows = _bench(["--t", "256,512", "--forms", "rec", "--repeats", "3"], capsys)
    per_token = [float(r["wall_ns_per_token"]) for r in rows]
    assert 0.5 <= per_token[1] / per_token[0] <= 2.0


def test_bench_rejects_unknown_form(capsys):
    assert main(["bench", "--forms", "fft"]) == 1
