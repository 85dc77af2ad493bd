"""Acceptance suite: one test and one PASS/FAIL summary line per criterion.

Criteria 6 and 7 train on the synthetic fingerprint-family benchmark for
five seeds each (about 15 minutes on one core). Criterion 10 needs real
captures and runs only when RFFSPOOF_REAL_REGISTRY names a registry file
with datasets ds2, ds3 and ds7 (captures plus post-correlation CSVs).
"""
import json
import os
from pathlib import Path

import numpy as np
import pytest

import literal_oracle
from helpers import ACCEPTANCE_LINES, ToyLearner, report, toy_registry
from test_tensor import CASES, SHAPES_PER_OP, gradcheck, make_case
from rffspoof import tensor as T
from rffspoof.benchmark import BenchmarkConfig, build_benchmark
from rffspoof.cli import main
from rffspoof.dataio import load_features
from rffspoof.embedder import EncoderConfig, ProtoLearner
from rffspoof.features import StftConfig, expected_segment_count, segment_bounds, stft
from rffspoof.metalearn import (AdmmState, MetaConfig, admm_update, crosstest, meta_train, soft_threshold,
                                zero_fraction)
from rffspoof.sigmodel import FingerprintSpec, IqSegment, SceneSpec, TransmitterSpec, synthesize_scene
from rffspoof.tracking import (CHIP_RATE_HZ, early_late_discriminator, gold_code, postcorr_vector_length,
                               sample_code, track_segment)

SEEDS = range(5)
# benchmark training schedule for criteria 6 to 8
BENCH = BenchmarkConfig(cfo_hz=(20.0, 100.0), phase_noise=(0.003, 0.005))
TRAIN_COMBOS = ["fam1+fam2", "fam3+fam4"]
HELD_OUT = "fam5"
SCHEDULE = dict(steps_per_epoch=25, outer_lr=0.002)


# --- 1 ----------------------------------------------------------------------------

def test_criterion_01_autodiff():
    worst = {}
    for name in sorted(CASES):
        r = np.random.default_rng(1000 + sum(map(ord, name)))
        errs = []
        for _ in range(SHAPES_PER_OP):
            op, args, kw = make_case(name, r)
            errs.append(gradcheck(op, tuple(np.array(a, dtype=float) for a in args), r, **kw))
        worst[name] = max(errs)
    covered = {n.split("_axis")[0].split("_bias")[0] for n in worst}
    ok = covered >= set(T.OPS) and max(worst.values()) < 1e-4
    assert report(1, ok, f"{len(T.OPS)} ops x {SHAPES_PER_OP} shapes, worst rel err {max(worst.values()):.2e}")


# --- 2 ----------------------------------------------------------------------------

def test_criterion_02_stft():
    rng = np.random.default_rng(2)
    x = rng.normal(size=1024) + 1j * rng.normal(size=1024)
    cfg = StftConfig(256, 128, "hann")
    w = cfg.window.coefficients(256)
    q = np.arange(256)
    dft = np.exp(-2j * np.pi * np.outer(q, q) / 256)
    ref = np.stack([[np.sum(x[f * 128: f * 128 + 256] * w * dft[m]) for m in range(256)] for f in range(7)], 1)
    err_dft = np.max(np.abs(stft(x, cfg) - ref) / np.abs(ref))
    err_pars = 0.0
    for n in (8, 64, 256):
        y = rng.normal(size=4 * n) + 1j * rng.normal(size=4 * n)
        s = stft(y, StftConfig(n, n, "rect"))
        e = np.sum(np.abs(y) ** 2)
        err_pars = max(err_pars, abs(np.sum(np.abs(s) ** 2) / n - e) / e)
    ok = err_dft < 1e-9 and err_pars < 1e-9
    assert report(2, ok, f"DFT oracle rel err {err_dft:.1e}, Parseval rel err {err_pars:.1e}")


# --- 3 ----------------------------------------------------------------------------

def test_criterion_03_prox_and_lasso():
    X, Tt = np.meshgrid(np.linspace(-5, 5, 40), np.linspace(0, 3, 25))
    want = np.array([np.sign(x) * max(abs(x) - t, 0.0) for x, t in zip(X.ravel(), Tt.ravel())])
    exact = np.array_equal(soft_threshold(X, Tt).ravel(), want)
    # lasso 0.5 (theta - a)^2 + lam |theta| with the scaled-form augmented gradient
    a, lam, rho, eta = 2.0, 0.5, 1.0, 0.1
    theta, st = np.array(0.0), AdmmState({"t": np.array(0.0)}, {"t": np.array(0.0)}, rho, lam)
    for _ in range(3000):
        theta = theta - eta * ((theta - a) + rho * (theta - st.z["t"] + st.u["t"]))
        out, st = admm_update({"t": theta}, st, reassign_theta=False)
        theta = out["t"]
    err = abs(float(st.z["t"]) - float(soft_threshold(a, lam)))
    assert report(3, exact and err < 1e-4, f"grid of {X.size} exact={exact}, lasso |z - 1.5| = {err:.1e}")


# --- 4 ----------------------------------------------------------------------------

def test_criterion_04_literal_fidelity():
    reg = toy_registry()
    learner = ToyLearner()
    mismatches = []
    for epochs in (1, 3):
        cfg = MetaConfig(query_size=10, shots_per_class=3, tasks_per_batch=3, epochs=epochs, inner_steps=2,
                         inner_lr=0.05, outer_lr=0.01, lam=0.05)
        got = meta_train(cfg, reg, ["a+b", ["c"]], learner, keep_trace=True).trace
        want = literal_oracle.run(cfg, reg, ["a+b", ["c"]], learner)
        for i, (g, w) in enumerate(zip(got, want)):
            for key in ("theta_in", "grads", "theta_adam", "z", "u", "theta_out"):
                if not all(np.array_equal(g[key][k], w[key][k]) for k in w[key]):
                    mismatches.append(f"E={epochs} epoch {i} {key}")
            if g["loss"] != w["loss"]:
                mismatches.append(f"E={epochs} epoch {i} loss")
    # admm_update alone on random states
    rng = np.random.default_rng(4)
    for lam in (0.0, 0.1, 10.0):
        th, z, u = ({"W": rng.normal(size=(5, 2))} for _ in range(3))
        out, st = admm_update(th, AdmmState(z, u, 1.5, lam))
        o_th, o_z, o_u = literal_oracle.admm_literal(th, z, u, lam, 1.5)
        if not (np.array_equal(out["W"], o_th["W"]) and np.array_equal(st.z["W"], o_z["W"])
                and np.array_equal(st.u["W"], o_u["W"])):
            mismatches.append(f"admm_update lam={lam}")
    assert report(4, not mismatches, "bit-exact on 10-parameter toy model" if not mismatches
                  else "mismatch: " + ", ".join(mismatches))


# --- 5 ----------------------------------------------------------------------------

def test_criterion_05_segmentation(tmp_path):
    bounds = segment_bounds(60 * 25_000_000, 25e6, 0.004)
    arith = len(bounds) == 15000 == expected_segment_count(60.0) and bounds[-1][1] == 60 * 25_000_000
    # real files: a 60 s pair generated at a decimated rate and featurised through the CLI
    scene = {"noise_std": 1.0, "sample_rate_hz": 1e4, "duration_s": 60.0, "rng_seed": 5,
             "genuine": [{"prn_id": 1}], "spoofers": [{"prn_id": 1, "code_phase": 0.4}]}
    (tmp_path / "scene.json").write_text(json.dumps(scene))
    reg = str(tmp_path / "reg.json")
    rc = main(["generate", "--config", str(tmp_path / "scene.json"), "--out", str(tmp_path / "c"),
               "--registry", reg, "--tag", "d", "--run-dir", str(tmp_path / "g")])
    rc += main(["featurize", "--registry", reg, "--tag", "d", "--fft-size", "8", "--hop", "8",
                "--run-dir", str(tmp_path / "f")])
    fs = load_features(tmp_path / "cache" / "d.splc")
    counts = (fs.count("clean"), fs.count("spoofed"))
    ok = arith and rc == 0 and counts == (15000, 15000)
    assert report(5, ok, f"25 MHz bounds {len(bounds)}, 10 kHz capture pair {counts}")


# --- 6 and 7 ----------------------------------------------------------------------

@pytest.fixture(scope="module")
def benchmark_runs():
    reg = build_benchmark(BENCH)
    target = reg[HELD_OUT]
    out = {"pre": [], "prepost": []}
    for mode in out:
        post_dim = postcorr_vector_length(target.post_shape[0]) if mode == "prepost" else 0
        learner = ProtoLearner(EncoderConfig(target.spec_shape, post_dim))
        for seed in SEEDS:
            cfg = MetaConfig(seed=seed, feature_mode=mode, **SCHEDULE)
            res = meta_train(cfg, reg, TRAIN_COMBOS, learner)
            row = {"final_loss": res.loss_history[-1]}
            if mode == "prepost":
                ev = crosstest(res.params, target, 5, cfg, learner, rng=100 + seed)
                rnd = crosstest(learner.init_params(np.random.default_rng(999 + seed)), target, 5, cfg,
                                learner, rng=100 + seed)
                row.update(acc=ev.accuracy, qloss=ev.query_loss, rand_acc=rnd.accuracy)
            out[mode].append(row)
    return out


@pytest.mark.slow
def test_criterion_06_few_shot(benchmark_runs):
    rows = benchmark_runs["prepost"]
    acc, qloss, rand = (float(np.median([r[k] for r in rows])) for k in ("acc", "qloss", "rand_acc"))
    ok = qloss < 0.1 and acc >= 0.95 and rand <= 0.80
    assert report(6, ok, f"median of 5 seeds: query loss {qloss:.3f} (< 0.1), accuracy {acc:.3f} (>= 0.95), "
                         f"random-init accuracy {rand:.3f} (<= 0.80)")


@pytest.mark.slow
def test_criterion_07_fusion(benchmark_runs):
    pre = float(np.median([r["final_loss"] for r in benchmark_runs["pre"]]))
    both = float(np.median([r["final_loss"] for r in benchmark_runs["prepost"]]))
    assert report(7, both < pre, f"median final meta loss pre+post {both:.4f} vs pre {pre:.4f}")


# --- 8 ----------------------------------------------------------------------------

def test_criterion_08_sparsity():
    reg = build_benchmark(BENCH.replace(segments_per_class=30))
    target = reg[HELD_OUT]
    learner = ProtoLearner(EncoderConfig(target.spec_shape, postcorr_vector_length(target.post_shape[0])))
    frac = {}
    for lam in (10.0, 0.0):
        cfg = MetaConfig(feature_mode="prepost", lam=lam, query_size=20, steps_per_epoch=2)
        frac[lam] = zero_fraction(meta_train(cfg, reg, TRAIN_COMBOS, learner).admm)
    ok = frac[10.0] >= 0.5 and frac[0.0] < 0.01
    assert report(8, ok, f"fusion weights exactly zero: {frac[10.0]:.1%} at lambda 10, {frac[0.0]:.1%} at lambda 0")


# --- 9 ----------------------------------------------------------------------------

def test_criterion_09_tracking():
    fs = 4 * CHIP_RATE_HZ      # early/late replicas fall on whole samples
    worst_odd = 0.0
    rng = np.random.default_rng(9)
    for prn in (1, 7, 19, 32):
        start = float(rng.integers(0, 1023))
        code = gold_code(prn)
        for delta in (0.0, 0.25, 0.5, 1.0):
            d = []
            for s in (delta, -delta):
                cap = synthesize_scene(SceneSpec((TransmitterSpec(prn, code_phase=start + s),), (), 0.0, fs, 0.002))
                d.append(early_late_discriminator(IqSegment(cap.samples, fs), code, start, 0.0))
            worst_odd = max(worst_odd, abs(d[0] + d[1]))
    tx = TransmitterSpec(11, FingerprintSpec(carrier_freq_offset=100.0), code_phase=40.0)
    seg = IqSegment(synthesize_scene(SceneSpec((tx,), (), 0.5, fs, 0.2, 4)).samples, fs)
    f = track_segment(seg, gold_code(11), (40.0, 0.0))
    cfo_err = float(np.max(np.abs(f.doppler_hz[-50:] - 100.0)))
    codes = {p: gold_code(p).chips.astype(int) for p in range(1, 38)}
    balanced = all(abs(int(c.sum())) == 1 for c in codes.values())
    spectra = {p: np.fft.fft(c) for p, c in codes.items()}
    values = set()
    for a in range(1, 38):
        for b in range(a + 1, 38):
            if (a, b) == (34, 37):      # these two PRNs share one code
                continue
            values |= set(np.rint(np.fft.ifft(spectra[a] * np.conj(spectra[b])).real).astype(int).tolist())
    three = values <= {-1, -65, 63}
    ok = worst_odd < 1e-9 and cfo_err <= 5.0 and balanced and three
    assert report(9, ok, f"odd symmetry {worst_odd:.1e}, CFO error {cfo_err:.2f} Hz, balance {balanced}, "
                         f"cross-correlation values {sorted(values)}")


# --- 10 ---------------------------------------------------------------------------

REAL = os.environ.get("RFFSPOOF_REAL_REGISTRY")


def test_criterion_10_real_data(tmp_path):
    if not REAL:
        ACCEPTANCE_LINES.append("criterion 10: SKIP  conditional; set RFFSPOOF_REAL_REGISTRY to run it")
        pytest.skip("set RFFSPOOF_REAL_REGISTRY to a registry with ds2, ds3 and ds7")
    reg = str(Path(REAL))
    run = tmp_path / "train"
    rc = main(["featurize", "--registry", reg, "--tag", "ds2", "--tag", "ds3", "--tag", "ds7",
               "--run-dir", str(tmp_path / "f")])
    rc = rc or main(["train", "--registry", reg, "--combo", "C1", "--feature-mode", "prepost",
                     "--run-dir", str(run)])
    rc = rc or main(["crosstest", "--checkpoint", str(run / "model.spl"), "--registry", reg,
                     "--target", "ds7", "--run-dir", str(tmp_path / "ct")])
    acc = None
    if rc == 0:
        metrics = dict(line.split(",") for line in (tmp_path / "ct" / "metrics.csv").read_text().splitlines()[1:])
        acc = float(metrics["accuracy"])
    # accuracy is reported against the published figure of over 99 %, not gated on it
    assert report(10, rc == 0, f"exit {rc}, accuracy on ds7 {acc} (reference > 0.99, informational)")
