"""Raw IQ capture files, the binary feature cache and the dataset registry.

Feature cache layout (all integers little-endian)::

    b"SPLC"
    u32 version (=1)
    u64 item count
    u32 spectrogram rows, u32 spectrogram cols
    u32 post-correlation epochs, u32 post-correlation features  (0, 0 if absent)
    per item:
        u8 label, f64 segment start time (s)
        f64[rows * cols] spectrogram, C order
        f64[epochs * features] post-correlation matrix, C order
    u32 CRC32 of every preceding byte
"""
from __future__ import annotations

import enum
import json
import logging
import math
import os
import struct
import tempfile
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Mapping, Sequence

import numpy as np
from filelock import FileLock

from .errors import CrcError, DataError, ValidationError
from .sigmodel import IqSegment, Label
from .tracking import FEATURES, postcorr_vector

log = logging.getLogger(__name__)

CACHE_MAGIC = b"SPLC"
CACHE_VERSION = 1


class SampleType(str, enum.Enum):
    INT16 = "int16"
    INT8 = "int8"
    FLOAT32 = "float32"


@dataclass(frozen=True)
class IqFormat:
    sample_type: SampleType = SampleType.INT16
    interleave: str = "IQ"
    endianness: str = "little"
    sample_rate_hz: float = 25e6
    scale: float = 2.0 ** -15   # one count in unit amplitude

    def __post_init__(self):
        object.__setattr__(self, "sample_type", SampleType(self.sample_type))
        if self.interleave not in ("IQ", "QI"):
            raise ValidationError(f"interleave must be 'IQ' or 'QI', got {self.interleave!r}")
        if self.endianness not in ("little", "big"):
            raise ValidationError(f"endianness must be 'little' or 'big', got {self.endianness!r}")
        if not self.sample_rate_hz > 0:
            raise ValidationError("sample_rate_hz must be > 0")
        if not self.scale > 0:
            raise ValidationError("scale must be > 0")

    @property
    def dtype(self) -> np.dtype:
        base = {"int16": "i2", "int8": "i1", "float32": "f4"}[self.sample_type.value]
        return np.dtype(("<" if self.endianness == "little" else ">") + base)

    @property
    def bytes_per_sample(self) -> int:
        return 2 * self.dtype.itemsize

    def to_dict(self) -> dict:
        return {"sample_type": self.sample_type.value, "interleave": self.interleave,
                "endianness": self.endianness, "sample_rate_hz": self.sample_rate_hz,
                "scale": self.scale}


# "texbat" is an assumed layout; check it against the repository documentation before real runs.
PRESETS = {
    "texbat": IqFormat(SampleType.INT16, "IQ", "little", 25e6, 2.0 ** -15),
    "float32": IqFormat(SampleType.FLOAT32, "IQ", "little", 25e6, 1.0),
}


def resolve_format(spec) -> IqFormat:
    if isinstance(spec, IqFormat):
        return spec
    if isinstance(spec, str):
        if spec not in PRESETS:
            raise ValidationError(f"unknown IQ format preset {spec!r}")
        return PRESETS[spec]
    if isinstance(spec, Mapping):
        d = dict(spec)
        base = PRESETS[d.pop("preset")].to_dict() if "preset" in d else {}
        base.update(d)
        return IqFormat(**base)
    raise ValidationError(f"cannot interpret IQ format {spec!r}")


def _decode(raw: np.ndarray, fmt: IqFormat) -> np.ndarray:
    vals = raw.astype(np.float64) * fmt.scale
    a, b = vals[0::2], vals[1::2]
    return a + 1j * b if fmt.interleave == "IQ" else b + 1j * a


def capture_num_samples(path: str | Path, fmt: IqFormat) -> int:
    path = Path(path)
    if not path.exists():
        raise DataError(f"capture not found: {path}")
    return path.stat().st_size // fmt.bytes_per_sample


def read_iq_capture(path: str | Path, fmt: IqFormat, offset_s: float = 0.0,
                    duration_s: float | None = None) -> np.ndarray:
    """Decoded complex samples; ``duration_s=None`` reads to the end of file."""
    total = capture_num_samples(path, fmt)
    start = int(round(offset_s * fmt.sample_rate_hz))
    count = total - start if duration_s is None else int(round(duration_s * fmt.sample_rate_hz))
    if count <= 0:
        raise DataError("zero-length read window")
    return read_iq_samples(path, fmt, start, count, total)


def read_iq_samples(path, fmt: IqFormat, start: int, count: int, total: int | None = None) -> np.ndarray:
    total = capture_num_samples(path, fmt) if total is None else total
    if start < 0 or start + count > total:
        raise DataError(f"{path}: window [{start}, {start + count}) exceeds file length {total} samples")
    raw = np.fromfile(path, dtype=fmt.dtype, count=2 * count, offset=start * fmt.bytes_per_sample)
    return _decode(raw, fmt)


def write_iq_capture(path: str | Path, samples: np.ndarray, fmt: IqFormat) -> None:
    """Encode samples exactly per ``fmt``; out-of-range values raise instead of clipping."""
    x = np.asarray(samples, dtype=np.complex128).ravel()
    if not np.all(np.isfinite(x)):
        bad = int(np.argmin(np.isfinite(x)))
        raise ValidationError(f"sample {bad} is not finite")
    first, second = (x.real, x.imag) if fmt.interleave == "IQ" else (x.imag, x.real)
    inter = np.empty(2 * len(x))
    inter[0::2] = first / fmt.scale
    inter[1::2] = second / fmt.scale
    if fmt.sample_type is SampleType.FLOAT32:
        lim = np.finfo(np.float32).max
        out_of_range = np.abs(inter) > lim
    else:
        inter = np.rint(inter)
        info = np.iinfo(fmt.dtype)
        out_of_range = (inter < info.min) | (inter > info.max)
    if np.any(out_of_range):
        bad = int(np.argmax(out_of_range)) // 2
        raise ValidationError(f"sample {bad} ({x[bad]}) outside the representable range of {fmt.sample_type.value}")
    inter.astype(fmt.dtype).tofile(path)


def iter_capture_segments(path: str | Path, fmt: IqFormat, segment_duration_s: float = 0.004,
                          label=Label.CLEAN, source_tag: str = "",
                          chunk_segments: int = 256) -> Iterator[IqSegment]:
    """Stream consecutive segments from disk without loading the whole capture."""
    total = capture_num_samples(path, fmt)
    seg = int(round(segment_duration_s * fmt.sample_rate_hz))
    count = total // seg
    if count == 0:
        raise DataError(f"{path}: shorter than one segment")
    label = Label.parse(label)
    for first in range(0, count, chunk_segments):
        n = min(chunk_segments, count - first)
        block = read_iq_samples(path, fmt, first * seg, n * seg, total)
        for i in range(n):
            a = (first + i) * seg
            yield IqSegment(block[i * seg:(i + 1) * seg], fmt.sample_rate_hz,
                            a / fmt.sample_rate_hz, label, source_tag)


# --------------------------------------------------------------------------
# featurised datasets


@dataclass
class FeatureSet:
    """Featurised segments of one dataset (both labels)."""

    tag: str
    specs: np.ndarray                      # (n, rows, cols)
    labels: np.ndarray                     # (n,) int
    postcorr: np.ndarray | None = None     # (n, epochs, 5)
    start_times: np.ndarray | None = None
    _vectors: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.specs = np.asarray(self.specs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.specs.ndim != 3 or len(self.specs) != n:
            raise ValidationError(f"{self.tag}: specs must be (n, rows, cols) with n={n}")
        if self.postcorr is not None:
            self.postcorr = np.asarray(self.postcorr, dtype=np.float64)
            if self.postcorr.ndim != 3 or len(self.postcorr) != n or self.postcorr.shape[2] != len(FEATURES):
                raise ValidationError(f"{self.tag}: postcorr must be (n, epochs, {len(FEATURES)})")
        if self.start_times is None:
            self.start_times = np.zeros(n)

    def __len__(self):
        return len(self.labels)

    @property
    def spec_shape(self) -> tuple[int, int]:
        return tuple(self.specs.shape[1:])

    @property
    def post_shape(self) -> tuple[int, int]:
        return (0, 0) if self.postcorr is None else tuple(self.postcorr.shape[1:])

    def post_vectors(self, subset: Sequence[str] = FEATURES) -> np.ndarray:
        key = tuple(subset)
        if key not in self._vectors:
            if self.postcorr is None:
                raise DataError(f"{self.tag}: no post-correlation features")
            from .tracking import PostCorrFeatures
            self._vectors[key] = np.stack(
                [postcorr_vector(PostCorrFeatures.from_array(m), key) for m in self.postcorr])
        return self._vectors[key]

    def count(self, label) -> int:
        return int(np.sum(self.labels == int(Label.parse(label))))


class Registry:
    """Featurised datasets keyed by tag; iteration and sampling use sorted tags."""

    def __init__(self, sets: Sequence[FeatureSet] | Mapping[str, FeatureSet] = ()):
        items = sets.values() if isinstance(sets, Mapping) else sets
        self._sets: dict[str, FeatureSet] = {}
        for fs in items:
            self.add(fs)

    def add(self, fs: FeatureSet):
        if fs.tag in self._sets:
            raise ValidationError(f"duplicate dataset tag {fs.tag!r}")
        self._sets[fs.tag] = fs

    def __getitem__(self, tag: str) -> FeatureSet:
        if tag not in self._sets:
            raise ValidationError(f"unknown dataset tag {tag!r}; known: {self.tags}")
        return self._sets[tag]

    def __contains__(self, tag):
        return tag in self._sets

    @property
    def tags(self) -> list[str]:
        return sorted(self._sets)


def _cache_header(count, spec_shape, post_shape) -> bytes:
    return CACHE_MAGIC + struct.pack("<IQIIII", CACHE_VERSION, count, *spec_shape, *post_shape)


def encode_features(fs: FeatureSet) -> bytes:
    parts = [_cache_header(len(fs), fs.spec_shape, fs.post_shape)]
    for i in range(len(fs)):
        parts.append(struct.pack("<Bd", int(fs.labels[i]), float(fs.start_times[i])))
        parts.append(np.ascontiguousarray(fs.specs[i], dtype="<f8").tobytes())
        if fs.postcorr is not None:
            parts.append(np.ascontiguousarray(fs.postcorr[i], dtype="<f8").tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_features(blob: bytes, tag: str = "", expected_spec_shape=None,
                    expected_post_shape=None) -> FeatureSet:
    hdr = struct.calcsize("<IQIIII")
    if len(blob) < 4 + hdr + 4 or blob[:4] != CACHE_MAGIC:
        raise DataError("not an SPLC feature cache")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CrcError(f"feature cache {tag!r}: CRC mismatch")
    version, count, sr, sc, pe, pf = struct.unpack_from("<IQIIII", body, 4)
    if version != CACHE_VERSION:
        raise DataError(f"feature cache version {version} unsupported (expected {CACHE_VERSION})")
    if expected_spec_shape is not None and (sr, sc) != tuple(expected_spec_shape):
        raise ValidationError(
            f"feature cache {tag!r}: spectrogram dims {sr}x{sc} do not match the configured "
            f"{expected_spec_shape[0]}x{expected_spec_shape[1]}")
    if expected_post_shape is not None and (pe, pf) != tuple(expected_post_shape):
        raise ValidationError(
            f"feature cache {tag!r}: post-correlation dims {pe}x{pf} do not match the configured "
            f"{expected_post_shape[0]}x{expected_post_shape[1]}")
    rec = np.dtype([("label", "u1"), ("t", "<f8"), ("spec", "<f8", (sr, sc))]
                   + ([("post", "<f8", (pe, pf))] if pe * pf else []))
    start = 4 + hdr
    if len(body) - start != count * rec.itemsize:
        raise DataError(f"feature cache {tag!r}: size does not match header count {count}")
    arr = np.frombuffer(body, dtype=rec, count=count, offset=start)
    return FeatureSet(tag, arr["spec"].astype(np.float64), arr["label"].astype(np.int64),
                      arr["post"].astype(np.float64) if pe * pf else None,
                      arr["t"].astype(np.float64))


def cache_features(path: str | Path, fs: FeatureSet) -> None:
    """Write ``fs`` atomically under an exclusive per-file lock."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode_features(fs)
    with FileLock(str(path) + ".lock"):
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)


def load_features(path: str | Path, tag: str | None = None, expected_spec_shape=None,
                  expected_post_shape=None) -> FeatureSet:
    path = Path(path)
    if not path.exists():
        raise DataError(f"feature cache not found: {path}")
    return decode_features(path.read_bytes(), tag or path.stem, expected_spec_shape, expected_post_shape)


# --------------------------------------------------------------------------
# registry file


@dataclass
class DatasetRecord:
    tag: str
    captures: dict[Label, Path]
    fmt: IqFormat
    postcorr: dict[Label, Path] = field(default_factory=dict)
    track: dict | None = None          # {"prn_id", "code_phase", "doppler_hz"}
    cache: Path | None = None
    column_map: dict | None = None

    @property
    def cached(self) -> bool:
        return self.cache is not None and self.cache.exists()


def _labelled_paths(d: Mapping, base: Path, what: str, tag: str) -> dict[Label, Path]:
    out = {}
    for k, v in d.items():
        p = Path(v)
        p = p if p.is_absolute() else base / p
        if not p.exists():
            raise DataError(f"dataset {tag!r}: {what} path does not exist: {p}")
        out[Label.parse(k)] = p
    return out


def load_registry_file(path: str | Path) -> dict[str, DatasetRecord]:
    """Parse a JSON registry (schema in the README). Relative paths resolve
    against the registry file's directory."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"registry not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    base = path.parent
    out: dict[str, DatasetRecord] = {}
    for entry in doc.get("datasets", []):
        tag = entry.get("tag")
        if not tag:
            raise ValidationError(f"{path}: dataset entry without tag")
        if tag in out:
            raise ValidationError(f"{path}: duplicate dataset tag {tag!r}")
        caps = _labelled_paths(entry.get("captures", {}), base, "capture", tag)
        post = _labelled_paths(entry.get("postcorr", {}), base, "post-correlation", tag)
        cache = entry.get("cache")
        cache = None if cache is None else (Path(cache) if Path(cache).is_absolute() else base / cache)
        if not caps and (cache is None or not cache.exists()):
            raise DataError(f"dataset {tag!r}: no captures and no existing feature cache")
        out[tag] = DatasetRecord(tag, caps, resolve_format(entry.get("format", "texbat")), post,
                                 entry.get("track"), cache, entry.get("column_map"))
    return out


def write_registry_file(path: str | Path, records: Sequence[DatasetRecord]) -> None:
    base = Path(path).parent.resolve()

    def rel(p: Path) -> str:
        try:
            return str(Path(p).resolve().relative_to(base))
        except ValueError:
            return str(Path(p).resolve())

    doc = {"datasets": []}
    for r in records:
        e = {"tag": r.tag, "format": r.fmt.to_dict(),
             "captures": {lab.name.lower(): rel(p) for lab, p in r.captures.items()}}
        if r.postcorr:
            e["postcorr"] = {lab.name.lower(): rel(p) for lab, p in r.postcorr.items()}
        if r.track:
            e["track"] = r.track
        if r.cache:
            e["cache"] = rel(r.cache)
        if r.column_map:
            e["column_map"] = r.column_map
        doc["datasets"].append(e)
    Path(path).write_text(json.dumps(doc, indent=2))
