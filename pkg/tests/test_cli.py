import numpy as np
import pytest

import tdconvs.bench as bench
import tdconvs.tensor
from tdconvs import cli
from tdconvs.tensor import load_checkpoint

TINY = """
profile = synth
synth.n_points = 256
net.n_input_points = 256
net.level_sizes = 256,64,16,8
net.map_specs = 6x6,4x4,2x2,2x2
net.volume_spec = 4x4x2
net.widths = 8,8,8,8
net.k_c = 2
net.k_s = 2
net.knn_sizes = 2,3,4
train.steps = 3
train.checkpoint_every = 2
"""


@pytest.fixture()
def tiny_cfg_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY)
    return path


def run_cli(*args):
    return cli.main(list(args))


def test_synth_train_eval_predict_pipeline(tiny_cfg_file, tmp_path, capsys):
    out = tmp_path / "run"
    assert run_cli("synth", "--config", str(tiny_cfg_file), "--out", str(out),
                   "--seed", "1") == 0
    assert (out / "synth_scene.txt").exists()
    assert (out / "config_resolved.txt").exists()

    assert run_cli("train", "--config", str(tiny_cfg_file), "--out", str(out),
                   "--seed", "1") == 0
    assert (out / "model_final.tdcv").exists()
    assert (out / "model_step000002.tdcv").exists()
    assert (out / "patches.tdpc").exists()
    loss_lines = (out / "loss.csv").read_text().splitlines()
    assert loss_lines[0] == cli.LOSS_HEADER
    assert len(loss_lines) == 4          # header + 3 steps
    log_lines = (out / "train_log.csv").read_text().splitlines()
    assert log_lines[0] == cli.LOG_HEADER
    assert all(len(l.split(",")) == 9 for l in log_lines[1:])

    assert run_cli("eval", "--config", str(tiny_cfg_file), "--out", str(out),
                   "--seed", "1") == 0
    assert (out / "metrics.csv").exists() and (out / "metrics.json").exists()
    assert (out / "metrics.csv").read_text().splitlines()[0] == \
        "class,precision,recall,f1,count"

    assert run_cli("predict", "--config", str(tiny_cfg_file), "--out", str(out),
                   "--seed", "1") == 0
    pred_lines = (out / "predictions.txt").read_text().splitlines()
    scene_lines = (out / "synth_scene.txt").read_text().splitlines()
    assert len(pred_lines) == len(scene_lines)
    for orig, pred in zip(scene_lines, pred_lines):
        assert pred.startswith(orig)
        assert pred.split()[-1].isdigit()


def test_checkpoint_is_versioned_binary(tiny_cfg_file, tmp_path):
    out = tmp_path / "run"
    run_cli("synth", "--config", str(tiny_cfg_file), "--out", str(out))
    run_cli("train", "--config", str(tiny_cfg_file), "--out", str(out))
    raw = (out / "model_final.tdcv").read_bytes()
    assert raw[:4] == b"TDCV"
    entries = load_checkpoint(out / "model_final.tdcv")
    assert any(name.endswith("fuse_bn.running_mean") for name in entries)


def test_missing_train_path_is_config_error(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("profile = custom\n")
    rc = run_cli("train", "--config", str(cfg), "--out", str(tmp_path / "o"))
    assert rc == 2
    err = capsys.readouterr().err
    assert err.startswith("error: config:") and err.count("\n") == 1


def test_missing_data_file_is_data_error(tiny_cfg_file, tmp_path, capsys):
    rc = run_cli("train", "--config", str(tiny_cfg_file),
                 "--out", str(tmp_path / "fresh"))
    assert rc == 3
    assert capsys.readouterr().err.startswith("error: data:")


def test_unknown_config_key_exit_code(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("net.nonsense = 1\n")
    assert run_cli("train", "--config", str(cfg), "--out", str(tmp_path / "o")) == 2


def test_gradcheck_fresh_build_passes(tmp_path, capsys):
    assert run_cli("gradcheck", "--out", str(tmp_path / "g"), "--seeds", "1") == 0
    out = capsys.readouterr().out
    assert "grid_sample_2d/values" in out
    assert "grid_sample_2d/coords" in out
    assert "grid_sample_3d/coords" in out
    assert "PASS" in out and "FAIL" not in out


def test_gradcheck_detects_corrupted_backward(tmp_path, capsys, monkeypatch):
    real_relu = tdconvs.tensor.relu

    def broken_relu(x):
        data = np.maximum(x.data, 0.0)
        mask = x.data > 0.0
        return tdconvs.tensor.make_node(data, (x,), lambda g: [1.01 * g * mask])

    monkeypatch.setattr(tdconvs.tensor, "relu", broken_relu)
    rc = run_cli("gradcheck", "--out", str(tmp_path / "g"), "--seeds", "1")
    monkeypatch.setattr(tdconvs.tensor, "relu", real_relu)
    assert rc == 1
    captured = capsys.readouterr()
    assert "relu" in captured.err


def test_seeded_runs_are_bit_reproducible(tiny_cfg_file, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        run_cli("synth", "--config", str(tiny_cfg_file), "--out", str(out), "--seed", "7")
        run_cli("train", "--config", str(tiny_cfg_file), "--out", str(out), "--seed", "7")
        outs.append(out)
    assert (outs[0] / "loss.csv").read_bytes() == (outs[1] / "loss.csv").read_bytes()
    assert (outs[0] / "model_final.tdcv").read_bytes() == \
        (outs[1] / "model_final.tdcv").read_bytes()


def test_thread_cap_env(monkeypatch):
    monkeypatch.setenv("TDCONVS_THREADS", "1")
    cli._apply_thread_cap()
    monkeypatch.setenv("TDCONVS_THREADS", "0")
    cli._apply_thread_cap()


def test_bench_rows_self_check_and_knn_monotonicity(tmp_path):
    rows = bench.run_bench(repeats=3)
    ops = {r[0] for r in rows}
    for expected in ("cylindricize:", "spheroidize:", "grid_sample_2d:",
                     "grid_sample_3d:", "knn:", "fps:"):
        assert any(op.startswith(expected) for op in ops)
    assert any(op == "cylindricize:brute" for op in ops)
    path = tmp_path / "bench.csv"
    bench.write_csv(path, rows)
    lines = path.read_text().splitlines()
    assert lines[0] == "op,n_points,grid,median_us,p95_us"
    assert len(lines) == len(rows) + 1
    for flavour in ("numba", "numpy"):
        med = [r[3] for r in rows if r[0] == f"knn:{flavour}"]
        if med:
            assert all(a <= b for a, b in zip(med, med[1:]))
    bench.self_check()
