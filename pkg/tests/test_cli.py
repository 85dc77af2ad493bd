import csv
import json

import numpy as np
import pytest

from rffspoof.cli import exit_code_for, main
from rffspoof.dataio import PRESETS, capture_num_samples, load_features
from rffspoof.errors import CrcError, DataError, NumericError, ValidationError
from rffspoof.sigmodel import ChannelSpec, FingerprintSpec, Role, SceneSpec, TransmitterSpec, scene_to_dict


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


def manifest(run_dir):
    return json.loads((run_dir / "manifest.json").read_text())


@pytest.fixture(scope="module")
def bench(tmp_path_factory):
    d = tmp_path_factory.mktemp("bench")
    assert main(["benchmark", "--out", str(d / "b"), "--segments", "12", "--run-dir", str(d / "r")]) == 0
    return d / "b" / "registry.json"


@pytest.fixture(scope="module")
def trained(bench, tmp_path_factory):
    run = tmp_path_factory.mktemp("train")
    argv = ["train", "--registry", str(bench), "--combo", "fam1+fam2", "--combo", "fam3",
            "--set", "query_size=10", "--feature-mode", "prepost", "--seed", "1", "--run-dir", str(run)]
    assert main(argv) == 0
    return run


def scene_file(tmp_path, duration=0.032, spoofers=True):
    g = TransmitterSpec(3, code_phase=10.0)
    s = TransmitterSpec(3, FingerprintSpec(carrier_freq_offset=50.0), ChannelSpec(((1.5, 0.0),)),
                        role=Role.SPOOFER, code_phase=10.3)
    scene = SceneSpec((g,), (s,) if spoofers else (), 1.0, 2.046e6, duration, 7)
    p = tmp_path / "scene.json"
    p.write_text(json.dumps(scene_to_dict(scene)))
    return p


# --- train / crosstest ---------------------------------------------------------------

def test_train_writes_eight_row_loss_csv(trained):
    r = rows(trained / "loss_history.csv")
    assert r[0] == ["epoch", "mean_meta_loss"] and len(r) == 9
    assert [int(x[0]) for x in r[1:]] == list(range(1, 9))
    assert len(list((trained / "checkpoints").iterdir())) == 8
    m = manifest(trained)
    assert m["status"] == "ok" and m["exit_code"] == 0 and m["seed"] == 1
    assert m["inputs"] == ["fam1", "fam2", "fam3"]
    assert m["config"]["meta"]["query_size"] == 10


def test_train_rerun_from_manifest_bit_exact(trained):
    before = (trained / "loss_history.csv").read_bytes(), (trained / "model.spl").read_bytes()
    assert main(manifest(trained)["argv"]) == 0
    assert ((trained / "loss_history.csv").read_bytes(), (trained / "model.spl").read_bytes()) == before


def test_crosstest_outputs(trained, bench, tmp_path):
    argv = ["crosstest", "--checkpoint", str(trained / "model.spl"), "--registry", str(bench),
            "--target", "fam5", "--run-dir", str(tmp_path), "--export-embeddings", "--seed", "3"]
    assert main(argv) == 0
    cm = rows(tmp_path / "confusion.csv")
    assert cm[0] == ["true\\predicted", "clean", "spoofed"]
    counts = np.array([[int(v) for v in r[1:]] for r in cm[1:]])
    assert counts.sum() == 24 - 10
    metrics = {k: float(v) for k, v in rows(tmp_path / "metrics.csv")[1:]}
    assert set(metrics) == {"accuracy", "precision", "recall", "f1", "query_loss"}
    assert metrics["accuracy"] == pytest.approx(np.trace(counts) / counts.sum())
    emb = rows(tmp_path / "embeddings.csv")
    assert len(emb) == 15 and emb[0][:2] == ["label", "predicted"]
    first = (tmp_path / "confusion.csv").read_bytes()
    assert main(argv) == 0 and (tmp_path / "confusion.csv").read_bytes() == first


def test_unknown_combo_is_validation_error(bench, tmp_path):
    assert main(["train", "--registry", str(bench), "--combo", "C9", "--run-dir", str(tmp_path)]) == 2
    m = manifest(tmp_path)
    assert m["status"] == "error" and m["exit_code"] == 2 and "C9" in m["error"]
    assert main(["train", "--registry", str(bench), "--combo", "fam1+zz", "--run-dir", str(tmp_path)]) == 2


def test_unfeaturised_dataset_is_data_error(tmp_path):
    scene = scene_file(tmp_path)
    assert main(["generate", "--config", str(scene), "--out", str(tmp_path / "s"), "--registry",
                 str(tmp_path / "reg.json"), "--tag", "d1", "--run-dir", str(tmp_path / "g")]) == 0
    assert main(["train", "--registry", str(tmp_path / "reg.json"), "--combo", "d1",
                 "--run-dir", str(tmp_path / "t")]) == 3


def test_bad_set_override(bench, tmp_path):
    assert main(["train", "--registry", str(bench), "--combo", "fam1", "--set", "inner_lr=-1",
                 "--run-dir", str(tmp_path)]) == 2
    assert main(["train", "--registry", str(bench), "--combo", "fam1", "--set", "nonsense",
                 "--run-dir", str(tmp_path)]) == 2


# --- generate / track / featurize ----------------------------------------------------

def test_generate_track_featurize(tmp_path, capsys):
    scene = scene_file(tmp_path)
    reg = tmp_path / "reg.json"
    assert main(["generate", "--config", str(scene), "--out", str(tmp_path / "caps" / "s"),
                 "--registry", str(reg), "--tag", "d1", "--run-dir", str(tmp_path / "g")]) == 0
    for lab in ("clean", "spoofed"):
        assert capture_num_samples(tmp_path / "caps" / f"s_{lab}.bin", PRESETS["float32"]) == round(0.032 * 2.046e6)
    assert main(["track", "--registry", str(reg), "--tag", "d1", "--run-dir", str(tmp_path / "t")]) == 0
    csvs = sorted((tmp_path / "postcorr").iterdir())
    assert [p.name for p in csvs] == ["d1_clean_postcorr.csv", "d1_spoofed_postcorr.csv"]
    assert rows(csvs[0])[0] == ["time", "codePhase", "dllDiscr", "doppler", "fllLock", "pllLock"]
    assert len(rows(csvs[0])) == 33
    argv = ["featurize", "--registry", str(reg), "--tag", "d1", "--fft-size", "64", "--hop", "64",
            "--run-dir", str(tmp_path / "f")]
    assert main(argv) == 0
    assert "featurised" in capsys.readouterr().out
    cache = tmp_path / "cache" / "d1.splc"
    fs = load_features(cache)
    assert len(fs) == 16 and fs.count("spoofed") == 8 and fs.post_shape == (4, 5)
    stamp = cache.stat().st_mtime_ns
    assert main(argv) == 0
    assert "cache hit" in capsys.readouterr().out
    assert cache.stat().st_mtime_ns == stamp
    assert manifest(tmp_path / "f")["cache"]["d1"]["hit"] is True


def test_generate_empty_scene_is_noise(tmp_path):
    p = tmp_path / "scene.json"
    p.write_text(json.dumps({"noise_std": 1.0, "sample_rate_hz": 1e5, "duration_s": 0.01, "rng_seed": 2}))
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "n"), "--run-dir", str(tmp_path)]) == 0
    assert (tmp_path / "n_clean.bin").exists() and not (tmp_path / "n_spoofed.bin").exists()
    from rffspoof.dataio import read_iq_capture
    x = read_iq_capture(tmp_path / "n_clean.bin", PRESETS["float32"])
    assert len(x) == 1000 and 0.8 < np.var(x) < 1.2


def test_generate_bad_config_names_field(tmp_path, capsys):
    p = tmp_path / "scene.json"
    p.write_text(json.dumps({"noise_std": -1.0}))
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "n"), "--run-dir", str(tmp_path)]) == 2
    assert "noise_std" in capsys.readouterr().err
    assert manifest(tmp_path)["status"] == "error"


def test_generate_60s_segment_count(tmp_path):
    # low-rate surrogate of the 60 s capture pair; the 25 MHz arithmetic is covered in the acceptance suite
    p = tmp_path / "scene.json"
    p.write_text(json.dumps({"noise_std": 1.0, "sample_rate_hz": 1e4, "duration_s": 60.0, "rng_seed": 2,
                             "genuine": [{"prn_id": 1}], "spoofers": [{"prn_id": 1}]}))
    reg = tmp_path / "reg.json"
    assert main(["generate", "--config", str(p), "--out", str(tmp_path / "c"), "--registry", str(reg),
                 "--tag", "d", "--run-dir", str(tmp_path)]) == 0
    assert main(["featurize", "--registry", str(reg), "--tag", "d", "--fft-size", "8", "--hop", "8",
                 "--run-dir", str(tmp_path / "f")]) == 0
    fs = load_features(tmp_path / "cache" / "d.splc")
    assert fs.count("clean") == fs.count("spoofed") == 15000


def test_missing_capture_is_data_error(tmp_path):
    (tmp_path / "reg.json").write_text(json.dumps({"datasets": [{"tag": "x", "captures": {"clean": "gone.bin"}}]}))
    assert main(["featurize", "--registry", str(tmp_path / "reg.json"), "--tag", "x",
                 "--run-dir", str(tmp_path)]) == 3


# --- exit codes ----------------------------------------------------------------------

@pytest.mark.parametrize("exc, code", [(ValidationError("v"), 2), (DataError("d"), 3), (CrcError("c"), 3),
                                       (NumericError("n"), 4), (FileNotFoundError(), 3), (ValueError(), 2),
                                       (RuntimeError(), 1)])
def test_exit_code_mapping(exc, code):
    assert exit_code_for(exc) == code


def test_threads_must_be_positive(tmp_path):
    assert main(["benchmark", "--out", str(tmp_path), "--threads", "0"]) == 2
