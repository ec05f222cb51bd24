import json
from pathlib import Path

import numpy as np
import pytest

from specband.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from specband.attention import AttentionCnnConfig, build_model
from specband.cli import RunManifest, main
from specband.harness import ExperimentConfig
from specband.selection import Heatmap, write_heatmap_csv

FAST = ["--max-epochs", "3", "--patience", "2"]


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--bands", "32", "--classes", "3", "--planted", "5,13,27",
                 "--seed", "1", "--rows", "10", "--cols", "12", "--out-dir", str(out)]) == 0
    return out


def data_flags(d):
    return ["--data", str(d / "synth.bin"), "--gt", str(d / "synth_gt.bin")]


def artifacts_exist(out):
    m = RunManifest.read(Path(out) / "manifest.json")
    assert all(Path(p).exists() for p in m.artifacts.values())
    return m


def test_synth_writes_cube_and_gt(synth_dir):
    m = artifacts_exist(synth_dir)
    assert set(m.artifacts) >= {"cube", "header", "gt"}
    assert (synth_dir / "synth.bin").stat().st_size == 10 * 12 * 32 * 4


def test_train_writes_checkpoint(synth_dir, tmp_path):
    out = tmp_path / "t"
    rc = main(["train", *data_flags(synth_dir), "--blocks", "3", "--attention", "--seed", "7",
               "--out-dir", str(out), *FAST])
    assert rc == 0
    m = artifacts_exist(out)
    assert m.seeds == [7] and m.config["architectures"] == ["CNN-3A"]
    model, extras, meta = load_checkpoint(out / "model.ckpt")
    assert model.config.num_blocks == 3 and model.bands == 32 and meta["split_seed"] == 7
    assert extras["scaler_lo"].shape == (32,)
    history = (out / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,loss,train_acc,val_acc" and len(history) == 4

    ev = tmp_path / "e"
    assert main(["eval", "--checkpoint", str(out / "model.ckpt"), *data_flags(synth_dir),
                 "--out-dir", str(ev)]) == 0
    trained = json.loads((out / "metrics.json").read_text())
    scored = json.loads((ev / "metrics.json").read_text())
    assert scored["average_accuracy"] == pytest.approx(trained["average_accuracy"])


def test_missing_ground_truth_exit_3(synth_dir, tmp_path, capsys):
    rc = main(["train", "--data", str(synth_dir / "synth.bin"), "--gt", str(tmp_path / "no.bin"),
               "--out-dir", str(tmp_path)])
    assert rc == 3
    assert "ground truth" in capsys.readouterr().err


def test_unsupported_depth_exit_2(synth_dir, tmp_path):
    assert main(["train", *data_flags(synth_dir), "--blocks", "5", "--out-dir", str(tmp_path)]) == 2


def test_unknown_flag_exit_2():
    assert main(["train", "--bogus"]) == 2


def test_select_reports_and_mixed_counts(tmp_path, capsys):
    rng = np.random.default_rng(0)
    for name, b in (("h1", 32), ("h2", 32), ("h3", 16)):
        s = 1 + 0.01 * rng.random(b)
        s[[5, 13]] = 4
        write_heatmap_csv(tmp_path / f"{name}.csv", Heatmap.from_scores(s))
    out = tmp_path / "sel"
    rc = main(["select", "--heatmaps", str(tmp_path / "h1.csv"), str(tmp_path / "h2.csv"),
               "--lambda", "0.01", "0.05", "--out-dir", str(out)])
    assert rc == 0
    reports = sorted(p.name for p in out.glob("selection_*.json"))
    assert reports == ["selection_lambda0.01.json", "selection_lambda0.05.json"]
    artifacts_exist(out)

    one = tmp_path / "one"
    assert main(["select", "--heatmaps", str(tmp_path / "h1.csv"), str(tmp_path / "h2.csv"),
                 "--lambda", "0.05", "--out-dir", str(one)]) == 0
    assert (json.loads((one / "selection_lambda0.05.json").read_text())
            == json.loads((out / "selection_lambda0.05.json").read_text()))

    capsys.readouterr()
    rc = main(["select", "--heatmaps", str(tmp_path / "h1.csv"), str(tmp_path / "h3.csv"),
               "--out-dir", str(tmp_path / "bad")])
    assert rc == 2
    err = capsys.readouterr().err
    assert "16" in err and "32" in err


def test_reduce_subset_and_identity(synth_dir, tmp_path):
    (tmp_path / "sel.txt").write_text("5\n13\n27\n")
    out = tmp_path / "r"
    assert main(["reduce", "--cube", str(synth_dir / "synth.bin"),
                 "--selection", str(tmp_path / "sel.txt"), "--out-dir", str(out)]) == 0
    assert (out / "synth_reduced.bands.txt").read_text().split() == ["5", "13", "27"]
    full = np.frombuffer((synth_dir / "synth.bin").read_bytes(), "<f4").reshape(-1, 32)
    red = np.frombuffer((out / "synth_reduced.bin").read_bytes(), "<f4").reshape(-1, 3)
    np.testing.assert_array_equal(red, full[:, [5, 13, 27]])
    artifacts_exist(out)

    (tmp_path / "all.txt").write_text(" ".join(map(str, range(32))))
    out2 = tmp_path / "r2"
    assert main(["reduce", "--cube", str(synth_dir / "synth.bin"),
                 "--selection", str(tmp_path / "all.txt"), "--out-dir", str(out2)]) == 0
    assert (out2 / "synth_reduced.bin").read_bytes() == (synth_dir / "synth.bin").read_bytes()


def test_pipeline_from_config_is_deterministic(synth_dir, tmp_path):
    cfg = tmp_path / "exp.ini"
    cfg.write_text(
        "[experiment]\n"
        f"cube = {synth_dir / 'synth.bin'}\n"
        f"gt = {synth_dir / 'synth_gt.bin'}\n"
        "architectures = 2A\nlambdas = 0.01 0.05\nchannels = 8 6 4 4\nhidden = 16 8\n"
        "max_epochs = 3\npatience = 2\nbatch_size = 16\neval_reduced = false\n"
    )
    outs = []
    for k in range(2):
        out = tmp_path / f"p{k}"
        assert main(["pipeline", "--config", str(cfg), "--runs", "2", "--out-dir", str(out)]) == 0
        outs.append(out)
    a = json.loads((outs[0] / "summary.json").read_text())["selections"]
    b = json.loads((outs[1] / "summary.json").read_text())["selections"]
    assert a == b
    m = artifacts_exist(outs[0])
    assert m.seeds == [0, 1]
    # the manifest's config snapshot rebuilds the experiment exactly
    assert ExperimentConfig(**m.config).to_dict() == m.config


def test_pipeline_rejects_zero_runs(synth_dir, tmp_path):
    assert main(["pipeline", *data_flags(synth_dir), "--runs", "0",
                 "--out-dir", str(tmp_path)]) == 2


def test_eval_monte_carlo(synth_dir, tmp_path):
    out = tmp_path / "mc"
    assert main(["eval", *data_flags(synth_dir), "--arch", "2", "2A", "--runs", "1",
                 "--config", str(_fast_config(tmp_path)), "--out-dir", str(out)]) == 0
    lines = (out / "runs.csv").read_text().splitlines()
    assert lines[0] == "run,arch,attention,aa,kappa,epochs,seconds" and len(lines) == 3


def _fast_config(tmp_path):
    p = tmp_path / "fast.ini"
    p.write_text("[experiment]\nchannels = 8 6 4 4\nhidden = 16 8\nmax_epochs = 2\npatience = 1\n")
    return p


# -------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    model = build_model(AttentionCnnConfig(num_blocks=2, num_classes=3, channels=(8, 6, 4, 4),
                                           hidden=(16, 8), seed=3), 20)
    x = np.random.default_rng(0).random((5, 20))
    save_checkpoint(tmp_path / "m.ckpt", model, extras={"v": np.arange(3.0)}, meta={"k": 1})
    back, extras, meta = load_checkpoint(tmp_path / "m.ckpt")
    np.testing.assert_array_equal(back.forward(x).output, model.forward(x).output)
    assert extras["v"].tolist() == [0, 1, 2] and meta == {"k": 1}


def test_checkpoint_corruption_detected(tmp_path):
    model = build_model(AttentionCnnConfig(channels=(4, 4, 4, 4), hidden=(8, 4)), 16)
    path = save_checkpoint(tmp_path / "m.ckpt", model)
    raw = path.read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(raw[:-4])
    with pytest.raises(CheckpointError, match="payload"):
        load_checkpoint(tmp_path / "short.ckpt")
