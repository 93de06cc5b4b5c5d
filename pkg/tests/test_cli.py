"""End-to-end command-line tests; everything runs in-process via main()."""

import json

import numpy as np
import pytest

from oodalign.cli import main
from oodalign.data import read_dataset, read_header
from oodalign.model import HeadParams, ModelConfig

TINY_ARGS = [
    "--seed", "21", "--num-classes", "3", "--channels", "6", "--text-dim", "10",
    "--n-train", "36", "--n-val-id", "12", "--n-val-ood", "12",
    "--margin-deg", "45", "--scene-size", "6",
]


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny synth+ate train run shared by the read-only tests below."""
    root = tmp_path_factory.mktemp("cli")
    data_dir = root / "data"
    run_dir = root / "run"
    assert main(["synth", "--out-dir", str(data_dir), *TINY_ARGS]) == 0
    assert main([
        "train", "--out-dir", str(run_dir),
        "--seed", "3", "--dataset", str(data_dir / "train.alds"),
        "--epochs", "2", "--base-lr", "5e-3", "--box-dim", "8",
    ]) == 0
    return data_dir, run_dir


def test_synth_writes_both_splits(pipeline):
    data_dir, _ = pipeline
    for name in ("train.alds", "val.alds", "train.json", "val.json"):
        assert (data_dir / name).exists(), name
    header = read_header(data_dir / "train.alds")
    assert header.counts["train"] == 36
    assert header.classes == ["class_0", "class_1", "class_2"]


def test_train_writes_checkpoints_and_loss(pipeline):
    _, run_dir = pipeline
    assert (run_dir / "checkpoint.alod").exists()
    assert (run_dir / "loss.csv").exists()
    assert (run_dir / "checkpoint_epoch002.alod").exists()
    params = HeadParams.load(run_dir / "checkpoint.alod")
    assert params.cfg.channels == 6
    assert params.cfg.text_dim == 10


def test_eval_reports_all_variants(pipeline, tmp_path, capsys):
    data_dir, run_dir = pipeline
    out = tmp_path / "eval"
    code = main([
        "eval", "--out-dir", str(out),
        "--checkpoint", str(run_dir / "checkpoint.alod"),
        "--dataset", str(data_dir / "val.alds"),
    ])
    assert code == 0
    report = json.loads((out / "report.json").read_text())
    variants = report["variants"]
    assert set(variants) == {
        "maxlogit_raw", "maxlogit_norm", "msp_raw", "msp_norm",
        "energy_raw", "energy_norm",
    }
    for entry in variants.values():
        assert 0.0 <= entry["auroc"] <= 1.0
        assert entry["n_id"] == 12 and entry["n_ood"] == 12
        assert (out / f"hist_{entry['variant']}.csv").exists()
    table = capsys.readouterr().out
    assert "maxlogit_norm" in table


def test_score_calibrates_when_no_threshold_given(pipeline, tmp_path):
    data_dir, run_dir = pipeline
    out = tmp_path / "score"
    code = main([
        "score", "--out-dir", str(out),
        "--checkpoint", str(run_dir / "checkpoint.alod"),
        "--dataset", str(data_dir / "val.alds"),
    ])
    assert code == 0
    rows = (out / "scores.csv").read_text().strip().splitlines()
    assert rows[0] == "scene_id,object_id,label,is_ood,score,decision"
    body = [r.split(",") for r in rows[1:]]
    assert len(body) == 24
    id_rows = [r for r in body if r[3] == "0"]
    accepted = sum(1 for r in id_rows if r[5] == "ID")
    # calibration keeps at least 95% of the ID objects
    assert accepted / len(id_rows) >= 0.95


def test_score_with_explicit_threshold(pipeline, tmp_path):
    data_dir, run_dir = pipeline
    out = tmp_path / "score"
    code = main([
        "score", "--out-dir", str(out),
        "--checkpoint", str(run_dir / "checkpoint.alod"),
        "--dataset", str(data_dir / "val.alds"),
        "--threshold", "1e9",
    ])
    assert code == 0
    rows = (out / "scores.csv").read_text().strip().splitlines()[1:]
    assert all(r.endswith(",OOD") for r in rows)


def test_config_file_with_flag_override(tmp_path):
    config = tmp_path / "synth.json"
    config.write_text(json.dumps({
        "seed": 5, "num_classes": 3, "channels": 6, "text_dim": 10,
        "n_train": 30, "n_val_id": 6, "n_val_ood": 6,
        "margin_deg": 45.0, "scene_size": 6,
    }))
    out = tmp_path / "data"
    code = main([
        "synth", "--config", str(config), "--out-dir", str(out), "--n-train", "24",
    ])
    assert code == 0
    header = read_header(out / "train.alds")
    assert header.counts["train"] == 24  # flag beat the config file
    assert header.counts["val_id"] == 6


def test_unknown_config_key_exits_2(tmp_path, capsys):
    config = tmp_path / "bad.json"
    config.write_text(json.dumps({"seed": 1, "wheels": 4}))
    code = main(["synth", "--config", str(config), "--out-dir", str(tmp_path / "o")])
    assert code == 2
    assert "wheels" in capsys.readouterr().err


def test_missing_required_option_exits_2(tmp_path, capsys):
    code = main(["synth", "--out-dir", str(tmp_path / "o")])
    assert code == 2
    assert "seed" in capsys.readouterr().err


def test_bad_mode_exits_2(tmp_path):
    code = main([
        "synth", "--out-dir", str(tmp_path / "o"), "--seed", "1", "--mode", "volumetric",
    ])
    assert code == 2


def test_missing_dataset_exits_3(tmp_path, capsys):
    code = main([
        "train", "--out-dir", str(tmp_path / "o"),
        "--seed", "1", "--dataset", str(tmp_path / "nope.alds"),
    ])
    assert code == 3
    assert "error:" in capsys.readouterr().err


def test_uninitialized_checkpoint_exits_4(pipeline, tmp_path):
    data_dir, _ = pipeline
    # a freshly initialized head has no batch-norm running statistics yet
    fresh = HeadParams.initialize(ModelConfig(channels=6, text_dim=10, box_dim=8), seed=0)
    ckpt = tmp_path / "fresh.alod"
    fresh.save(ckpt)
    code = main([
        "eval", "--out-dir", str(tmp_path / "o"),
        "--checkpoint", str(ckpt), "--dataset", str(data_dir / "val.alds"),
    ])
    assert code == 4


def test_eval_outputs_are_deterministic(pipeline, tmp_path):
    data_dir, run_dir = pipeline
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        assert main([
            "eval", "--out-dir", str(out),
            "--checkpoint", str(run_dir / "checkpoint.alod"),
            "--dataset", str(data_dir / "val.alds"),
        ]) == 0
        outs.append(out)
    a, b = outs
    assert (a / "report.json").read_bytes() == (b / "report.json").read_bytes()
    assert (a / "hist_maxlogit_norm.csv").read_bytes() == (
        b / "hist_maxlogit_norm.csv"
    ).read_bytes()


def test_train_rejects_missing_dataset_file_error_text(tmp_path, capsys):
    code = main([
        "train", "--out-dir", str(tmp_path / "o"),
        "--seed", "1", "--dataset", "/does/not/exist.alds",
    ])
    assert code == 3
    err = capsys.readouterr().err
    assert "error:" in err
