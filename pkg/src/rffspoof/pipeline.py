"""Capture-to-feature orchestration shared by the CLI and the demos."""
from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import DatasetRecord, FeatureSet, cache_features, iter_capture_segments, load_features
from .errors import DataError, ValidationError
from .features import Normalization, StftConfig, segment_spectrogram
from .sigmodel import Label
from .tracking import TrackingConfig, export_postcorr_csv, gold_code, ingest_postcorr_csv, track_segments

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FeaturizeConfig:
    stft: StftConfig = field(default_factory=StftConfig)
    normalization: Normalization = Normalization.LOGSTD
    segment_duration_s: float = 0.004

    def __post_init__(self):
        object.__setattr__(self, "normalization", Normalization(self.normalization))
        if not self.segment_duration_s > 0:
            raise ValidationError("segment_duration_s must be > 0")

    def to_dict(self) -> dict:
        st = self.stft
        return {"fft_size": st.fft_size, "hop": st.hop, "window": st.window.value,
                "decimation": st.decimation, "normalization": self.normalization.value,
                "segment_duration_s": self.segment_duration_s}

    @classmethod
    def from_dict(cls, d: dict) -> "FeaturizeConfig":
        st = StftConfig(d["fft_size"], d["hop"], d["window"], decimation=d["decimation"])
        return cls(st, d["normalization"], d["segment_duration_s"])


def _postcorr_windows(record: DatasetRecord, label: Label, duration: float):
    path = record.postcorr.get(label)
    if path is None:
        return None
    return ingest_postcorr_csv(path, record.column_map, duration)


def featurize_record(record: DatasetRecord, fcfg: FeaturizeConfig) -> FeatureSet:
    """Spectrogram (and post-correlation, if CSVs are registered) per segment.

    Segments whose post-correlation window is missing, or holds a different
    number of epochs than the most common one, are dropped with a warning.
    """
    if not record.captures:
        raise DataError(f"dataset {record.tag!r}: no captures registered")
    use_post = bool(record.postcorr)
    if use_post and set(record.postcorr) != set(record.captures):
        raise DataError(f"dataset {record.tag!r}: post-correlation CSVs must cover every capture label")
    specs, posts, labels, times = [], [], [], []
    for label in sorted(record.captures):
        windows = _postcorr_windows(record, label, fcfg.segment_duration_s) if use_post else None
        epochs = Counter(w.num_epochs for w in windows.values()).most_common(1)[0][0] if windows else None
        dropped = 0
        segs = iter_capture_segments(record.captures[label], record.fmt, fcfg.segment_duration_s,
                                     label, record.tag)
        for i, seg in enumerate(segs):
            if not np.all(np.isfinite(seg.samples)):
                raise DataError(f"{record.tag}/{label.name}: non-finite samples in segment {i}")
            if windows is not None:
                w = windows.get(i)
                if w is None or w.num_epochs != epochs:
                    dropped += 1
                    continue
                posts.append(w.as_array())
            specs.append(segment_spectrogram(seg, fcfg.stft, fcfg.normalization).magnitudes)
            labels.append(int(label))
            times.append(seg.start_time_s)
        if dropped:
            log.warning("%s/%s: dropped %d segments without a matching post-correlation window",
                        record.tag, label.name, dropped)
    if not specs:
        raise DataError(f"dataset {record.tag!r}: no usable segments")
    return FeatureSet(record.tag, np.stack(specs), np.array(labels),
                      np.stack(posts) if use_post else None, np.array(times))


def inputs_digest(record: DatasetRecord, fcfg: FeaturizeConfig) -> str:
    """Hash of everything a cache depends on: inputs' size/mtime, format and settings."""
    files = []
    for group in (record.captures, record.postcorr):
        for label in sorted(group):
            st = Path(group[label]).stat()
            files.append([label.name, str(Path(group[label]).resolve()), st.st_size, st.st_mtime_ns])
    blob = json.dumps({"files": files, "format": record.fmt.to_dict(), "features": fcfg.to_dict(),
                       "column_map": record.column_map}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def sidecar_path(cache: Path) -> Path:
    return cache.with_name(cache.name + ".json")


def featurize_cached(record: DatasetRecord, fcfg: FeaturizeConfig, cache: Path,
                     force: bool = False) -> tuple[FeatureSet, bool]:
    """Featurise unless ``cache`` already holds features for identical inputs.

    Returns ``(features, cache_hit)``.
    """
    cache = Path(cache)
    digest = inputs_digest(record, fcfg)
    side = sidecar_path(cache)
    if not force and cache.exists() and side.exists():
        meta = json.loads(side.read_text())
        if meta.get("digest") == digest:
            log.info("%s: cache hit (%s), featurisation skipped", record.tag, cache)
            return load_features(cache, record.tag), True
    fs = featurize_record(record, fcfg)
    cache_features(cache, fs)
    side.write_text(json.dumps({"digest": digest, "features": fcfg.to_dict(), "count": len(fs)}, indent=2))
    log.info("%s: wrote %d items to %s", record.tag, len(fs), cache)
    return fs, False


def cache_settings(cache: Path) -> dict | None:
    """Featurisation settings recorded next to a cache, if any."""
    side = sidecar_path(Path(cache))
    return json.loads(side.read_text()).get("features") if side.exists() else None


def track_record(record: DatasetRecord, out_dir: Path, segment_duration_s: float = 0.004,
                 cfg: TrackingConfig | None = None) -> dict[Label, Path]:
    """Track every capture of ``record`` and write one post-correlation CSV per label.

    ``record.track`` supplies ``prn_id`` and the acquisition estimate
    (``code_phase`` chips, ``doppler_hz``) at the start of the capture.
    """
    if not record.track:
        raise ValidationError(f"dataset {record.tag!r}: no 'track' entry (prn_id, code_phase, doppler_hz)")
    t = record.track
    try:
        code = gold_code(int(t["prn_id"]))
        init = (float(t.get("code_phase", 0.0)), float(t.get("doppler_hz", 0.0)))
    except KeyError as exc:
        raise ValidationError(f"dataset {record.tag!r}: track entry lacks {exc}") from None
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for label in sorted(record.captures):
        segs = iter_capture_segments(record.captures[label], record.fmt, segment_duration_s, label, record.tag)
        feats = list(track_segments(segs, code, init, cfg))
        path = out_dir / f"{record.tag}_{label.name.lower()}_postcorr.csv"
        export_postcorr_csv(path, feats, segment_duration_s)
        paths[label] = path
        log.info("%s/%s: tracked %d segments -> %s", record.tag, label.name, len(feats), path)
    return paths

