import json
from pathlib import Path

import numpy as np
import pytest

from proto_cil.cli import main
from proto_cil.features import ingest_features
from proto_cil.pgm import read_pgm, write_pgm

CONFIG_PATH = Path(__file__).resolve().parent.parent / "configs" / "b2inc2_blobs.json"


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        main(["--help"])
    assert exc.value.code == 0


def test_no_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 1


def test_unknown_subcommand_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1


# ---------------------------------------------------------------------------
# synth

def test_synth_writes_dataset(tmp_path):
    out = tmp_path / "ds"
    rc = main(["synth", "--kind", "blobs", "--classes", "5", "--train", "2",
               "--test", "1", "--size", "32", "--seed", "7", "--out", str(out)])
    assert rc == 0
    assert (out / "manifest.csv").exists() and (out / "manifest.json").exists()
    assert len(list(out.glob("*.pgm"))) == 5 * 3


def test_synth_deterministic_bytes(tmp_path):
    args = ["synth", "--kind", "blobs", "--classes", "3", "--train", "2",
            "--test", "1", "--size", "16", "--seed", "5"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    for pa in sorted((tmp_path / "a").iterdir()):
        pb = tmp_path / "b" / pa.name
        assert pa.read_bytes() == pb.read_bytes()


def test_synth_rejects_bad_counts(tmp_path, capsys):
    rc = main(["synth", "--kind", "blobs", "--classes", "1", "--train", "2",
               "--test", "1", "--size", "8", "--out", str(tmp_path)])
    assert rc == 1
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------------------
# denoise

def rank1_pgms(dir_path, n=40, size=8, seed=0):
    rng = np.random.default_rng(seed)
    u = rng.uniform(0.2, 1.0, size=size * size).reshape(size, size)
    u /= u.max()
    dir_path.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        write_pgm(dir_path / f"im{i:03d}.pgm", u * rng.uniform(0.5, 1.0), maxval=65535)


def test_denoise_pipeline(tmp_path):
    rank1_pgms(tmp_path / "in")
    out = tmp_path / "out"
    rc = main(["denoise", "--train-glob", str(tmp_path / "in" / "*.pgm"),
               "--apply-glob", str(tmp_path / "in" / "im00*.pgm"),
               "--rank", "1", "--epochs", "400", "--lr", "0.5",
               "--out", str(out)])
    assert rc == 0
    produced = sorted(out.glob("*.pgm"))
    assert len(produced) == 10
    for p in produced:
        sidecar = json.loads(Path(str(p) + ".json").read_text())
        sparse = read_pgm(p) * sidecar["scale"] + sidecar["offset"]
        source = read_pgm(tmp_path / "in" / p.name)
        # a well-fit rank-1 map leaves only a small residual
        assert np.abs(sparse).sum() <= 0.05 * np.abs(source).sum() + 1e-6


def test_denoise_rejects_empty_glob(tmp_path, capsys):
    rc = main(["denoise", "--train-glob", str(tmp_path / "none*.pgm"),
               "--apply-glob", str(tmp_path / "none*.pgm"),
               "--rank", "1", "--out", str(tmp_path)])
    assert rc == 2
    assert "no files match" in capsys.readouterr().err


def test_denoise_rejects_bad_rank(tmp_path):
    rank1_pgms(tmp_path / "in", n=2)
    rc = main(["denoise", "--train-glob", str(tmp_path / "in" / "*.pgm"),
               "--apply-glob", str(tmp_path / "in" / "*.pgm"),
               "--rank", "0", "--out", str(tmp_path)])
    assert rc == 1


# ---------------------------------------------------------------------------
# train-backbone + extract

def test_backbone_and_extract_roundtrip(tmp_path):
    ds = tmp_path / "ds"
    assert main(["synth", "--kind", "blobs", "--classes", "2", "--train", "3",
                 "--test", "2", "--size", "32", "--out", str(ds)]) == 0
    ckpt = tmp_path / "cnn.bin"
    rc = main(["train-backbone", "--manifest", str(ds / "manifest.csv"),
               "--out", str(ckpt), "--epochs", "1", "--d-cnn", "8"])
    assert rc == 0 and ckpt.exists()
    feats = tmp_path / "feats.csv"
    rc = main(["extract", "--manifest", str(ds / "manifest.csv"), "--model", str(ckpt),
               "--split", "test", "--out", str(feats)])
    assert rc == 0
    fm = ingest_features(feats)
    assert fm.rows.shape == (4, 8)
    assert sorted(set(fm.labels)) == ["c00", "c01"]


def test_extract_missing_model_is_runtime_error(tmp_path):
    ds = tmp_path / "ds"
    assert main(["synth", "--kind", "blobs", "--classes", "2", "--train", "1",
                 "--test", "1", "--size", "32", "--out", str(ds)]) == 0
    rc = main(["extract", "--manifest", str(ds / "manifest.csv"),
               "--model", str(tmp_path / "nope.bin"), "--out", str(tmp_path / "f.csv")])
    assert rc == 2


# ---------------------------------------------------------------------------
# run + eval

def test_run_bundled_config(tmp_path, capsys):
    out = tmp_path / "report"
    rc = main(["run", "--config", str(CONFIG_PATH), "--out", str(out)])
    assert rc == 0
    body = json.loads((out / "metrics.json").read_text())
    assert len(body["task_accuracies"]) == 5
    assert body["avg_accuracy"] >= 95.0
    assert "tasks: 5" in capsys.readouterr().out


def test_run_missing_config_is_usage_error(tmp_path, capsys):
    rc = main(["run", "--config", str(tmp_path / "nope.json")])
    assert rc == 1
    assert "not found" in capsys.readouterr().err


def test_run_invalid_json_is_usage_error(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    rc = main(["run", "--config", str(bad)])
    assert rc == 1
    assert "not valid JSON" in capsys.readouterr().err


def test_run_unknown_config_key_is_usage_error(tmp_path, capsys):
    cfg = json.loads(CONFIG_PATH.read_text())
    cfg["mystery"] = True
    p = tmp_path / "cfg.json"
    p.write_text(json.dumps(cfg))
    rc = main(["run", "--config", str(p)])
    assert rc == 1
    assert "unknown" in capsys.readouterr().err


def test_run_seed_override_changes_fingerprint(tmp_path):
    out1, out2 = tmp_path / "r1", tmp_path / "r2"
    assert main(["run", "--config", str(CONFIG_PATH), "--out", str(out1)]) == 0
    assert main(["run", "--config", str(CONFIG_PATH), "--out", str(out2),
                 "--seed", "99"]) == 0
    f1 = json.loads((out1 / "metrics.json").read_text())["config_fingerprint"]
    f2 = json.loads((out2 / "metrics.json").read_text())["config_fingerprint"]
    assert f1 != f2


def test_eval_prints_table(tmp_path, capsys):
    out = tmp_path / "report"
    assert main(["run", "--config", str(CONFIG_PATH), "--out", str(out)]) == 0
    capsys.readouterr()
    rc = main(["eval", str(out)])
    assert rc == 0
    printed = capsys.readouterr().out
    assert "PD" in printed and "Aavg" in printed
    assert str(out) in printed


def test_eval_unreadable_dir_is_runtime_error(tmp_path, capsys):
    rc = main(["eval", str(tmp_path / "missing")])
    assert rc == 2
    assert "cannot read report" in capsys.readouterr().err


def test_eval_corrupt_metrics_is_runtime_error(tmp_path, capsys):
    d = tmp_path / "r"
    d.mkdir()
    (d / "metrics.json").write_text("{broken")
    rc = main(["eval", str(d)])
    assert rc == 2
