"""Command-line entry point: ``rffspoof <command> ...``.

Commands
    generate    synthesise a scene (clean/spoofed pair) into IQ capture files
    benchmark   write the synthetic fingerprint-family benchmark as feature caches
    track       run the tracking loops over registered captures -> post-correlation CSVs
    featurize   segment registered captures into spectrogram (+ post-correlation) caches
    train       meta-train on one or more dataset combos
    crosstest   few-shot adapt a checkpoint to an unseen dataset and score it

Every command writes ``manifest.json`` into ``--run-dir``, on failure too.
Exit codes: 0 ok, 2 validation error, 3 data error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .benchmark import BenchmarkConfig, write_benchmark
from .dataio import (DatasetRecord, Registry, load_features, load_registry_file, resolve_format,
                     write_iq_capture, write_registry_file)
from .embedder import EncoderConfig, ProtoLearner
from .errors import DataError, NumericError, RffSpoofError, ValidationError
from .features import Normalization, StftConfig, Window
from .metalearn import (MetaConfig, crosstest, load_training_checkpoint, meta_train,
                        metrics_from_confusion, resolve_combo, save_training_checkpoint)
from .pipeline import FeaturizeConfig, cache_settings, featurize_cached, track_record
from .sigmodel import Label, load_scene, synthesize_scene
from .tracking import FEATURE_ALIASES, TrackingConfig, postcorr_vector_length

log = logging.getLogger("rffspoof")

POSTCORR_CHOICES = sorted(set(FEATURE_ALIASES) - set(FEATURE_ALIASES.values())) + ["all"]


class Run:
    """Collects what goes into manifest.json."""

    def __init__(self, command: str, args: argparse.Namespace, argv):
        self.t0 = time.time()
        self.run_dir = Path(args.run_dir)
        self.doc = {"command": command, "argv": list(argv), "version": __version__,
                    "seed": getattr(args, "seed", None), "config": _jsonable(vars(args)),
                    "inputs": [], "outputs": []}

    def output(self, path):
        self.doc["outputs"].append(str(path))

    def write(self, status: str, exit_code: int, error: str | None = None):
        self.doc.update(status=status, exit_code=exit_code, error=error,
                        duration_s=round(time.time() - self.t0, 3))
        self.run_dir.mkdir(parents=True, exist_ok=True)
        (self.run_dir / "manifest.json").write_text(json.dumps(self.doc, indent=2, default=str))


def _jsonable(d: dict) -> dict:
    return {k: v for k, v in d.items() if k != "func"}


# --------------------------------------------------------------------------
# helpers


def _registry_records(path) -> tuple[Path, dict[str, DatasetRecord]]:
    path = Path(path)
    return path, load_registry_file(path)


def _cache_path(record: DatasetRecord, registry_path: Path) -> Path:
    return record.cache if record.cache is not None else registry_path.parent / "cache" / f"{record.tag}.splc"


def _record(records, tag) -> DatasetRecord:
    if tag not in records:
        raise ValidationError(f"unknown dataset tag {tag!r}; registry has {sorted(records)}")
    return records[tag]


def _load_sets(registry_path: Path, records, tags, spec_shape=None, post_shape=None, norm=None) -> Registry:
    sets = []
    for tag in sorted(set(tags)):
        rec = _record(records, tag)
        cache = _cache_path(rec, registry_path)
        if not cache.exists():
            raise DataError(f"dataset {tag!r} is not featurised (no cache at {cache}); run 'featurize' first")
        if norm is not None:
            settings = cache_settings(cache)
            if settings and settings.get("normalization") != norm:
                raise ValidationError(f"dataset {tag!r} was featurised with normalization "
                                      f"{settings.get('normalization')!r}, not {norm!r}")
        sets.append(load_features(cache, tag, spec_shape, post_shape))
    return Registry(sets)


def _model_meta_path(checkpoint: Path) -> Path:
    for d in (checkpoint.parent, checkpoint.parent.parent):
        if (d / "model.json").exists():
            return d / "model.json"
    raise DataError(f"no model.json next to checkpoint {checkpoint}")


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


# --------------------------------------------------------------------------
# commands


def cmd_generate(args, run: Run):
    scene = load_scene(args.config)
    overrides = {}
    if args.duration is not None:
        overrides["duration_s"] = args.duration
    if args.sample_rate is not None:
        overrides["sample_rate_hz"] = args.sample_rate
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if overrides:
        scene = dataclasses.replace(scene, **overrides)
    fmt = dataclasses.replace(resolve_format(_format_arg(args.format)), sample_rate_hz=scene.sample_rate_hz)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    captures = {Label.CLEAN: prefix.with_name(prefix.name + "_clean.bin")}
    clean_scene = dataclasses.replace(scene, spoofers=())
    write_iq_capture(captures[Label.CLEAN], synthesize_scene(clean_scene).samples, fmt)
    if scene.spoofers:
        captures[Label.SPOOFED] = prefix.with_name(prefix.name + "_spoofed.bin")
        write_iq_capture(captures[Label.SPOOFED], synthesize_scene(scene).samples, fmt)
    for p in captures.values():
        run.output(p)
        log.info("wrote %s (%d samples)", p, scene.num_samples)
    if args.registry:
        if not args.tag:
            raise ValidationError("--registry needs --tag")
        reg_path = Path(args.registry)
        records = load_registry_file(reg_path) if reg_path.exists() else {}
        track = None
        if scene.genuine:
            g = scene.genuine[0]
            track = {"prn_id": int(g.prn_id), "code_phase": g.code_phase,
                     "doppler_hz": g.fingerprint.carrier_freq_offset}
        records[args.tag] = DatasetRecord(args.tag, captures, fmt, track=track)
        write_registry_file(reg_path, list(records.values()))
        run.output(reg_path)


def _format_arg(value: str):
    if value.endswith(".json"):
        return json.loads(Path(value).read_text())
    return value


def cmd_benchmark(args, run: Run):
    cfg = BenchmarkConfig(segments_per_class=args.segments,
                          seed=args.seed if args.seed is not None else BenchmarkConfig.seed)
    reg_path = write_benchmark(Path(args.out), cfg)
    run.output(reg_path)
    log.info("benchmark registry at %s", reg_path)


def cmd_track(args, run: Run):
    reg_path, records = _registry_records(args.registry)
    tcfg = TrackingConfig(lock_threshold=args.lock_threshold)
    out_dir = Path(args.out_dir) if args.out_dir else reg_path.parent / "postcorr"
    for tag in args.tag:
        rec = _record(records, tag)
        run.doc["inputs"].append(tag)
        paths = track_record(rec, out_dir, args.segment_s, tcfg)
        rec.postcorr = paths
        for p in paths.values():
            run.output(p)
    write_registry_file(reg_path, list(records.values()))


def cmd_featurize(args, run: Run):
    reg_path, records = _registry_records(args.registry)
    stft = StftConfig(args.fft_size, args.hop, args.window, decimation=args.decimation)
    fcfg = FeaturizeConfig(stft, args.norm, args.segment_s)
    tags = sorted(records) if args.tag == ["all"] else args.tag
    for tag in tags:
        rec = _record(records, tag)
        run.doc["inputs"].append(tag)
        cache = _cache_path(rec, reg_path)
        fs, hit = featurize_cached(rec, fcfg, cache, args.force)
        run.doc.setdefault("cache", {})[tag] = {"path": str(cache), "count": len(fs), "hit": hit}
        run.output(cache)
        print(f"{tag}: {len(fs)} segments ({'cache hit' if hit else 'featurised'})")


def _meta_config(args) -> MetaConfig:
    cfg = MetaConfig.from_file(args.config) if args.config else MetaConfig()
    kv = {}
    for item in args.set or []:
        if "=" not in item:
            raise ValidationError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        kv[k.strip()] = v.strip()
    cfg = MetaConfig.from_mapping(kv, cfg)
    over = {"seed": args.seed, "feature_mode": args.feature_mode, "postcorr": args.postcorr,
            "shots_per_class": args.shots, "threads": args.threads, "epochs": getattr(args, "epochs", None)}
    return cfg.replace(**{k: v for k, v in over.items() if v is not None})


def cmd_train(args, run: Run):
    cfg = _meta_config(args)
    reg_path, records = _registry_records(args.registry)
    combos = [resolve_combo(c) for c in args.combo]
    tags = sorted({t for c in combos for t in c})
    run.doc["inputs"] = tags
    registry = _load_sets(reg_path, records, tags, norm=args.norm)
    shapes = {registry[t].spec_shape for t in tags}
    if len(shapes) != 1:
        raise ValidationError(f"datasets have different spectrogram shapes: {sorted(shapes)}")
    post_dim = 0
    if cfg.feature_mode == "prepost":
        epochs = {registry[t].post_shape[0] for t in tags}
        if 0 in epochs:
            raise DataError("feature mode prepost needs post-correlation features for every dataset")
        if len(epochs) != 1:
            raise ValidationError(f"datasets have different post-correlation epoch counts: {sorted(epochs)}")
        post_dim = postcorr_vector_length(epochs.pop(), cfg.feature_subset)
    enc = EncoderConfig(shapes.pop(), post_dim)
    learner = ProtoLearner(enc, regularize_all=cfg.admm_scope == "all")
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "train.cfg").write_text(cfg.to_text())
    model = {"encoder": dataclasses.asdict(enc), "meta": cfg.to_dict(),
             "combos": ["+".join(c) for c in combos], "features": cache_settings(_cache_path(records[tags[0]], reg_path))}
    (run_dir / "model.json").write_text(json.dumps(model, indent=2))
    run.doc["config"]["meta"] = cfg.to_dict()
    run.doc["seed"] = cfg.seed
    res = meta_train(cfg, registry, combos, learner, run_dir / "checkpoints")
    save_training_checkpoint(run_dir / "model.spl", res.params, res.admm)
    hist = run_dir / "loss_history.csv"
    _write_csv(hist, ["epoch", "mean_meta_loss"], [[i + 1, repr(l)] for i, l in enumerate(res.loss_history)])
    for p in [run_dir / "model.spl", run_dir / "model.json", hist, *res.checkpoints]:
        run.output(p)
    print(f"final mean meta loss {res.loss_history[-1]:.6g} after {cfg.epochs} epochs")


def cmd_crosstest(args, run: Run):
    ckpt = Path(args.checkpoint)
    model = json.loads(_model_meta_path(ckpt).read_text())
    enc = EncoderConfig(**{**model["encoder"], "spec_shape": tuple(model["encoder"]["spec_shape"])})
    cfg = MetaConfig.from_mapping(model["meta"])
    if args.shots is not None:
        cfg = cfg.replace(shots_per_class=args.shots)
    params, _, _ = load_training_checkpoint(ckpt)
    reg_path, records = _registry_records(args.registry)
    run.doc["inputs"] = [args.target]
    post_shape = None
    if cfg.feature_mode == "prepost":
        epochs = (enc.post_dim // len(cfg.feature_subset)) - 2
        post_shape = (epochs, 5)
    target = _load_sets(reg_path, records, [args.target], enc.spec_shape, post_shape)[args.target]
    learner = ProtoLearner(enc)
    seed = args.seed if args.seed is not None else cfg.seed
    run.doc["seed"] = seed
    ev = crosstest(params, target, cfg.shots_per_class, cfg, learner, np.random.default_rng(seed),
                   args.query_size)
    run_dir = Path(args.run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cm = ev.confusion
    _write_csv(run_dir / "confusion.csv", ["true\\predicted", "clean", "spoofed"],
               [["clean", int(cm[0, 0]), int(cm[0, 1])], ["spoofed", int(cm[1, 0]), int(cm[1, 1])]])
    metrics = metrics_from_confusion(cm)
    metrics["query_loss"] = ev.query_loss
    _write_csv(run_dir / "metrics.csv", ["metric", "value"], [[k, repr(v)] for k, v in metrics.items()])
    run.output(run_dir / "confusion.csv")
    run.output(run_dir / "metrics.csv")
    if args.export_embeddings:
        path = run_dir / "embeddings.csv"
        d = ev.query_embeddings.shape[1]
        _write_csv(path, ["label", "predicted"] + [f"e{i}" for i in range(d)],
                   [[int(l), int(p)] + [repr(float(v)) for v in e]
                    for l, p, e in zip(ev.query_labels, ev.predictions, ev.query_embeddings)])
        run.output(path)
    print(f"accuracy {metrics['accuracy']:.4f} on {int(cm.sum())} query segments of {args.target}")


# --------------------------------------------------------------------------
# parser


def _common(p: argparse.ArgumentParser):
    p.add_argument("--run-dir", default=".", help="where manifest.json and outputs go (default: .)")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--threads", type=int, default=1, help="worker threads; 1 gives bit-exact reruns")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="rffspoof", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="count", default=0)
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="synthesise a scene into capture files")
    _common(p)
    p.add_argument("--config", required=True, help="scene JSON")
    p.add_argument("--out", required=True, help="output prefix; writes PREFIX_clean.bin [and PREFIX_spoofed.bin]")
    p.add_argument("--format", default="float32", help="IQ format preset name or JSON file (default float32)")
    p.add_argument("--duration", type=float, help="override scene duration_s")
    p.add_argument("--sample-rate", type=float, help="override scene sample_rate_hz")
    p.add_argument("--registry", help="add the captures to this registry file")
    p.add_argument("--tag", help="dataset tag for --registry")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("benchmark", help="write the synthetic benchmark caches and registry")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--segments", type=int, default=120, help="segments per class and family")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("track", help="post-correlation features from registered captures")
    _common(p)
    p.add_argument("--registry", required=True)
    p.add_argument("--tag", action="append", required=True)
    p.add_argument("--out-dir", help="CSV directory (default: REGISTRY_DIR/postcorr)")
    p.add_argument("--segment-s", type=float, default=0.004)
    p.add_argument("--lock-threshold", type=float, default=TrackingConfig.lock_threshold)
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("featurize", help="build feature caches for registered datasets")
    _common(p)
    p.add_argument("--registry", required=True)
    p.add_argument("--tag", action="append", required=True, help="dataset tag (repeatable) or 'all'")
    p.add_argument("--norm", choices=[n.value for n in Normalization], default="logstd")
    p.add_argument("--fft-size", type=int, default=256)
    p.add_argument("--hop", type=int, default=128)
    p.add_argument("--window", choices=[w.value for w in Window], default="hann")
    p.add_argument("--decimation", type=int, default=1)
    p.add_argument("--segment-s", type=float, default=0.004)
    p.add_argument("--force", action="store_true", help="ignore an up-to-date cache")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="meta-train on dataset combos")
    _common(p)
    p.add_argument("--registry", required=True)
    p.add_argument("--combo", action="append", required=True, help="C1..C4 or tagA+tagB (repeatable)")
    p.add_argument("--config", help="training config file (key = value lines)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one training config key")
    p.add_argument("--feature-mode", choices=["pre", "prepost"])
    p.add_argument("--postcorr", choices=POSTCORR_CHOICES)
    p.add_argument("--shots", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--norm", choices=[n.value for n in Normalization],
                   help="require caches featurised with this normalisation")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("crosstest", help="few-shot adapt to an unseen dataset and score it")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--registry", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--shots", type=int)
    p.add_argument("--query-size", type=int, help="random query subset (default: every non-support segment)")
    p.add_argument("--export-embeddings", action="store_true")
    p.set_defaults(func=cmd_crosstest)
    return ap


EXIT_CODES = ((ValidationError, 2), (DataError, 3), (NumericError, 4))


def exit_code_for(exc: BaseException) -> int:
    for cls, code in EXIT_CODES:
        if isinstance(exc, cls):
            return code
    if isinstance(exc, RffSpoofError):
        return exc.exit_code
    if isinstance(exc, (FileNotFoundError, PermissionError, IsADirectoryError)):
        return 3
    if isinstance(exc, (ValueError, KeyError, TypeError, json.JSONDecodeError)):
        return 2
    return 1


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return 2
    run = Run(args.command, args, argv)
    try:
        with threadpool_limits(limits=args.threads):
            args.func(args, run)
    except Exception as exc:  # every failure still leaves a manifest
        code = exit_code_for(exc)
        run.write("error", code, f"{type(exc).__name__}: {exc}")
        if code == 1:
            raise
        print(f"error: {exc}", file=sys.stderr)
        return code
    run.write("ok", 0)
    return 0


if __name__ == "__main__":
    sys.exit(main())
