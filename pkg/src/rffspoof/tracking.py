"""Post-correlation features: C/A Gold codes, an early-late DLL, a Costas PLL
with FLL assist, and CSV ingestion of externally produced receiver logs.

Sign conventions
----------------
* ``code_phase`` is the fractional chip index of the code at the first sample
  of an epoch: sample ``n`` carries chip ``floor(code_phase + n * fc / fs)``.
  A signal delayed by ``d`` samples therefore has code phase ``-d * fc / fs``
  (mod 1023).
* The early replica sits at ``code_phase + spacing / 2``. The discriminator
  ``(|E|^2 - |L|^2) / (|E|^2 + |L|^2)`` is positive when the true code phase
  is larger than the estimate ("true code leads").
* Point sampling cannot resolve code phase finer than one sample. At 2
  samples per chip the +/-0.25 chip replicas fall half a sample from the
  prompt and the aligned discriminator is biased; from 4 samples per chip on
  they are whole-sample shifts and the discriminator is exactly odd.

Lock detectors
--------------
* ``pll_lock = (I^2 - Q^2) / (I^2 + Q^2)`` on the prompt, i.e. ``cos 2*phi``.
* ``fll_lock = Re(P2 * conj(P1)) / (|P1| |P2|)`` where P1, P2 are the prompt
  correlations over the two halves of the epoch, i.e. the cosine of the phase
  rotation across half a code period.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DataError, LossOfLock, ValidationError

log = logging.getLogger(__name__)

CHIP_RATE_HZ = 1.023e6
CODE_LENGTH = 1023
CODE_PERIOD_S = 1e-3
NUM_PRNS = 37

# G2 phase-selector taps (1-indexed register stages) per PRN, IS-GPS-200 table.
# PRN 34 and 37 share a code.
G2_TAPS = {
    1: (2, 6), 2: (3, 7), 3: (4, 8), 4: (5, 9), 5: (1, 9), 6: (2, 10),
    7: (1, 8), 8: (2, 9), 9: (3, 10), 10: (2, 3), 11: (3, 4), 12: (5, 6),
    13: (6, 7), 14: (7, 8), 15: (8, 9), 16: (9, 10), 17: (1, 4), 18: (2, 5),
    19: (3, 6), 20: (4, 7), 21: (5, 8), 22: (6, 9), 23: (1, 3), 24: (4, 6),
    25: (5, 7), 26: (6, 8), 27: (7, 9), 28: (8, 10), 29: (1, 6), 30: (2, 7),
    31: (3, 8), 32: (4, 9), 33: (5, 10), 34: (4, 10), 35: (1, 7), 36: (2, 8),
    37: (4, 10),
}

# attribute name -> column name used by common receiver logs
FEATURE_COLUMNS = {
    "code_phase": "codePhase",
    "dll_discr": "dllDiscr",
    "doppler_hz": "doppler",
    "fll_lock": "fllLock",
    "pll_lock": "pllLock",
}
FEATURES = tuple(FEATURE_COLUMNS)
DEFAULT_COLUMN_MAP = {"time": "time", **FEATURE_COLUMNS}

# CLI-facing short names
FEATURE_ALIASES = {
    "codephase": "code_phase",
    "dlldiscr": "dll_discr",
    "doppler": "doppler_hz",
    "flllock": "fll_lock",
    "plllock": "pll_lock",
}


@dataclass(frozen=True)
class PrnCode:
    prn_id: int
    chips: np.ndarray  # int8, values +/-1, length 1023

    def __post_init__(self):
        if self.chips.shape != (CODE_LENGTH,):
            raise ValidationError(f"PRN code must have {CODE_LENGTH} chips, got {self.chips.shape}")


@lru_cache(maxsize=None)
def _gold_chips(prn_id: int) -> np.ndarray:
    t1, t2 = G2_TAPS[prn_id]
    g1 = [1] * 10
    g2 = [1] * 10
    bits = np.empty(CODE_LENGTH, dtype=np.int8)
    for i in range(CODE_LENGTH):
        bits[i] = g1[9] ^ g2[t1 - 1] ^ g2[t2 - 1]
        fb1 = g1[2] ^ g1[9]
        fb2 = g2[1] ^ g2[2] ^ g2[5] ^ g2[7] ^ g2[8] ^ g2[9]
        g1 = [fb1] + g1[:9]
        g2 = [fb2] + g2[:9]
    chips = (1 - 2 * bits).astype(np.int8)  # bit 0 -> +1, bit 1 -> -1
    chips.setflags(write=False)
    return chips


def gold_code(prn_id: int) -> PrnCode:
    """GPS C/A code for ``prn_id`` (1..37) from the G1/G2 LFSR pair."""
    if not isinstance(prn_id, (int, np.integer)) or not 1 <= int(prn_id) <= NUM_PRNS:
        raise ValidationError(f"prn_id must be an integer in 1..{NUM_PRNS}, got {prn_id!r}")
    return PrnCode(int(prn_id), _gold_chips(int(prn_id)))


def chip_index(num_samples: int, sample_rate_hz: float, code_phase: float = 0.0,
               chip_rate_hz: float = CHIP_RATE_HZ) -> np.ndarray:
    """Code chip carried by each sample; generator and correlators share this rounding."""
    pos = code_phase + np.arange(num_samples) * (chip_rate_hz / sample_rate_hz)
    return np.floor(pos).astype(np.int64) % CODE_LENGTH


def sample_code(code: PrnCode, num_samples: int, sample_rate_hz: float,
                code_phase: float = 0.0, chip_rate_hz: float = CHIP_RATE_HZ) -> np.ndarray:
    """Chip values (+/-1, float) sampled at ``sample_rate_hz`` starting at ``code_phase``."""
    return code.chips[chip_index(num_samples, sample_rate_hz, code_phase, chip_rate_hz)].astype(np.float64)


@dataclass
class PostCorrFeatures:
    """Per-epoch tracking observables, one epoch per code period."""

    code_phase: np.ndarray
    dll_discr: np.ndarray
    doppler_hz: np.ndarray
    fll_lock: np.ndarray
    pll_lock: np.ndarray

    def __post_init__(self):
        for name in FEATURES:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).ravel())
        n = len(self.code_phase)
        if n < 1:
            raise ValidationError("PostCorrFeatures needs at least one epoch")
        for name in FEATURES:
            arr = getattr(self, name)
            if len(arr) != n:
                raise ValidationError(f"feature {name} has {len(arr)} epochs, expected {n}")
            if not np.all(np.isfinite(arr)):
                raise ValidationError(f"feature {name} contains non-finite values")
        for name in ("fll_lock", "pll_lock"):
            arr = getattr(self, name)
            if np.any(np.abs(arr) > 1.0 + 1e-12):
                raise ValidationError(f"lock metric {name} outside [-1, 1]")

    @property
    def num_epochs(self) -> int:
        return len(self.code_phase)

    def as_array(self) -> np.ndarray:
        """(epochs, 5) matrix in ``FEATURES`` order."""
        return np.stack([getattr(self, f) for f in FEATURES], axis=1)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "PostCorrFeatures":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(*(arr[:, i] for i in range(len(FEATURES))))


def resolve_feature_subset(subset: str | Iterable[str] | None) -> tuple[str, ...]:
    """Map CLI names (``codephase``, ..., ``all``) to attribute names."""
    if subset is None or subset == "all":
        return FEATURES
    if isinstance(subset, str):
        subset = [s for s in subset.split(",") if s]
    out = []
    for s in subset:
        if s == "all":
            return FEATURES
        name = FEATURE_ALIASES.get(s, s)
        if name not in FEATURES:
            raise ValidationError(f"unknown post-correlation feature {s!r}")
        out.append(name)
    # keep canonical order
    return tuple(f for f in FEATURES if f in out)


def postcorr_vector(feats: PostCorrFeatures, subset: Sequence[str] = FEATURES) -> np.ndarray:
    """Flatten one segment's features into a fixed-length vector.

    Per feature: the epoch values followed by their mean and std. Code phase is
    taken relative to the first epoch (wrapped to half a code length) and every
    value is compressed with ``sign(x) * log1p(|x|)`` so Hz-scale Doppler and
    unit-scale lock metrics share a range.
    """
    parts = []
    for name in subset:
        v = getattr(feats, name).copy()
        if name == "code_phase":
            v = (v - v[0] + CODE_LENGTH / 2) % CODE_LENGTH - CODE_LENGTH / 2
        parts.append(v)
        parts.append([v.mean(), v.std()])
    vec = np.concatenate([np.asarray(p, dtype=np.float64) for p in parts])
    return np.sign(vec) * np.log1p(np.abs(vec))


def postcorr_vector_length(num_epochs: int, subset: Sequence[str] = FEATURES) -> int:
    return len(subset) * (num_epochs + 2)


# --------------------------------------------------------------------------
# correlators and loops


def _correlate(xs, code, sample_rate_hz, code_phase, doppler_hz, carrier_phase, offsets):
    t = np.arange(len(xs)) / sample_rate_hz
    wiped = xs * np.exp(-1j * (carrier_phase + 2 * np.pi * doppler_hz * t))
    out = [np.dot(wiped, code.chips[chip_index(len(xs), sample_rate_hz, code_phase + off)])
           for off in offsets]
    return out, wiped


def _el_ratio(early: complex, late: complex) -> float:
    pe = abs(early) ** 2
    pl = abs(late) ** 2
    if pe + pl == 0.0:
        raise LossOfLock("early and late correlator powers are both zero")
    return (pe - pl) / (pe + pl)


def early_late_discriminator(segment, code: PrnCode, code_phase_hat: float,
                             doppler_hat: float, spacing: float = 0.5) -> float:
    """Normalised early-minus-late power over all whole code periods in ``segment``."""
    fs = segment.sample_rate_hz
    n = int(math.floor(len(segment.samples) / (fs * CODE_PERIOD_S) + 1e-9) * fs * CODE_PERIOD_S + 0.5)
    if n < 1 or len(segment.samples) < round(fs * CODE_PERIOD_S):
        raise ValidationError("segment shorter than one code period")
    (early, late), _ = _correlate(np.asarray(segment.samples[:n]), code, fs, code_phase_hat,
                                  doppler_hat, 0.0, (spacing / 2, -spacing / 2))
    return _el_ratio(early, late)


@dataclass
class TrackingConfig:
    spacing: float = 0.5            # early-late spacing, chips
    dll_bandwidth_hz: float = 2.0
    pll_bandwidth_hz: float = 15.0
    fll_bandwidth_hz: float = 25.0
    pll_damping: float = 0.707
    lock_threshold: float = 4.0     # |P|^2 / sum|x|^2; pure noise gives ~1
    lock_loss_epochs: int = 3

    def __post_init__(self):
        if not 0 < self.spacing < 1:
            raise ValidationError("spacing must lie in (0, 1) chips")
        for name in ("dll_bandwidth_hz", "pll_bandwidth_hz", "fll_bandwidth_hz"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")
        if self.lock_loss_epochs < 1:
            raise ValidationError("lock_loss_epochs must be >= 1")


def num_epochs(num_samples: int, sample_rate_hz: float) -> int:
    return int(math.floor(num_samples / (sample_rate_hz * CODE_PERIOD_S) + 1e-9))


def track_segment(segment, code: PrnCode, init: tuple[float, float] | Mapping[str, float],
                  cfg: TrackingConfig | None = None) -> PostCorrFeatures:
    """Run DLL + FLL-assisted Costas PLL over ``segment``, one epoch per code period.

    ``init`` is ``(code_phase_chips, doppler_hz)`` at the first sample of the
    segment, assumed to come from acquisition. Code Doppler is not aided.
    """
    cfg = cfg or TrackingConfig()
    if isinstance(init, Mapping):
        code_phase, doppler = float(init["code_phase"]), float(init["doppler_hz"])
    else:
        code_phase, doppler = (float(v) for v in init)
    fs = float(segment.sample_rate_hz)
    x = np.asarray(segment.samples)
    n_ep = num_epochs(len(x), fs)
    if n_ep < 1:
        raise ValidationError("segment shorter than one code period")

    T = CODE_PERIOD_S
    k_dll = 4.0 * cfg.dll_bandwidth_hz * T
    k_fll = 4.0 * cfg.fll_bandwidth_hz * T
    z = cfg.pll_damping
    wn = cfg.pll_bandwidth_hz * 8 * z / (4 * z * z + 1)
    k_phase = 2 * z * wn * T
    k_freq = wn * wn * T / (2 * np.pi)
    half = cfg.spacing / 2

    out = {name: np.empty(n_ep) for name in FEATURES}
    carrier_phase = 0.0
    weak = 0
    for k in range(n_ep):
        a = int(round(k * fs * T))
        b = int(round((k + 1) * fs * T))
        xs = x[a:b]
        m = b - a
        (prompt, early, late), wiped = _correlate(xs, code, fs, code_phase, doppler,
                                                  carrier_phase, (0.0, half, -half))
        # half-epoch prompts for the frequency discriminator and FLL lock
        mid = m // 2
        rep = code.chips[chip_index(m, fs, code_phase)]
        p1 = np.dot(wiped[:mid], rep[:mid])
        p2 = np.dot(wiped[mid:], rep[mid:])

        energy = float(np.vdot(xs, xs).real)
        q = abs(prompt) ** 2 / energy if energy > 0 else 0.0
        weak = weak + 1 if q < cfg.lock_threshold else 0
        if weak >= cfg.lock_loss_epochs:
            raise LossOfLock(f"prompt power below threshold for {weak} consecutive epochs "
                             f"(epoch {k})")

        dll = _el_ratio(early, late) if abs(early) + abs(late) > 0 else 0.0
        i_p, q_p = prompt.real, prompt.imag
        p_pow = i_p * i_p + q_p * q_p
        pll_lock = (i_p * i_p - q_p * q_p) / p_pow if p_pow > 0 else 0.0
        dot = (p2 * np.conj(p1))
        denom = abs(p1) * abs(p2)
        fll_lock = dot.real / denom if denom > 0 else 0.0

        out["code_phase"][k] = code_phase % CODE_LENGTH
        out["dll_discr"][k] = dll
        out["doppler_hz"][k] = doppler
        out["fll_lock"][k] = min(1.0, max(-1.0, fll_lock))
        out["pll_lock"][k] = min(1.0, max(-1.0, pll_lock))

        # loop updates
        phase_err = math.atan(q_p / i_p) if i_p != 0 else (math.copysign(math.pi / 2, q_p) if q_p else 0.0)
        freq_err = np.angle(dot) / (2 * np.pi * (m - mid) / fs) if denom > 0 else 0.0
        chip_err = dll * (1 - half) / 2
        carrier_phase = carrier_phase + 2 * np.pi * doppler * m / fs + k_phase * phase_err
        doppler = doppler + k_fll * freq_err + k_freq * phase_err
        code_phase = code_phase + m * CHIP_RATE_HZ / fs - CODE_LENGTH + k_dll * chip_err
    return PostCorrFeatures(**out)


def track_segments(segments: Iterable, code: PrnCode, init, cfg: TrackingConfig | None = None):
    """Track consecutive segments, seeding each from the previous one's last epoch.

    Yields one :class:`PostCorrFeatures` per segment.
    """
    state = init
    for seg in segments:
        feats = track_segment(seg, code, state, cfg)
        state = (float(feats.code_phase[-1]), float(feats.doppler_hz[-1]))
        yield feats


# --------------------------------------------------------------------------
# CSV ingestion / export


def _resolve_column_map(column_map, required):
    cmap = dict(DEFAULT_COLUMN_MAP)
    if column_map:
        cmap.update(column_map)
    missing = [k for k in ("time", *required) if k not in cmap]
    if missing:
        raise ValidationError(f"column_map does not bind {missing}")
    return cmap


def ingest_postcorr_csv(path: str | Path, column_map: Mapping[str, str] | None = None,
                        segment_duration_s: float = 0.004,
                        required: Sequence[str] = FEATURES) -> dict[int, PostCorrFeatures]:
    """Read a receiver log and bucket rows into ``segment_duration_s`` windows.

    Returns ``{segment_index: PostCorrFeatures}``; window ``i`` covers
    ``[i * segment_duration_s, (i + 1) * segment_duration_s)`` in log time,
    matching :func:`rffspoof.features.segment_capture`. A feature left out of
    ``required`` may be absent from the file; it is then zero-filled and a
    warning is logged.
    """
    cmap = _resolve_column_map(column_map, required)
    path = Path(path)
    if not path.exists():
        raise DataError(f"post-correlation CSV not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        cols = {}
        for key in ("time", *FEATURES):
            col = cmap.get(key)
            if col in header:
                cols[key] = header.index(col)
            elif key == "time" or key in required:
                raise DataError(f"{path}: required column {col!r} not found in header")
            else:
                log.warning("%s: optional column %r absent, zero-filled", path, col)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                rows.append([float(row[cols[k]]) if k in cols else 0.0 for k in ("time", *FEATURES)])
            except (ValueError, IndexError):
                raise DataError(f"{path}:{lineno}: unparseable row {row!r}") from None
    if not rows:
        raise DataError(f"{path}: no data rows")
    data = np.asarray(rows)
    if not np.all(np.isfinite(data)):
        raise DataError(f"{path}: non-finite values")
    t = data[:, 0]
    if np.any(np.diff(t) < 0):
        bad = int(np.argmax(np.diff(t) < 0)) + 3
        raise DataError(f"{path}:{bad}: timestamps are not monotonic")
    window = np.floor(t / segment_duration_s + 1e-9).astype(np.int64)
    out = {}
    for w in np.unique(window):
        sel = data[window == w, 1:]
        out[int(w)] = PostCorrFeatures.from_array(sel)
    return out


def export_postcorr_csv(path: str | Path, segments: Mapping[int, PostCorrFeatures] | Sequence[PostCorrFeatures],
                        segment_duration_s: float = 0.004, column_map: Mapping[str, str] | None = None):
    """Write features in the layout :func:`ingest_postcorr_csv` reads back.

    Epochs inside segment ``i`` are spread evenly over the window so they
    bucket back into the same segment.
    """
    cmap = _resolve_column_map(column_map, FEATURES)
    if not isinstance(segments, Mapping):
        segments = dict(enumerate(segments))
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([cmap[k] for k in ("time", *FEATURES)])
        for i in sorted(segments):
            feats = segments[i]
            n = feats.num_epochs
            arr = feats.as_array()
            for k in range(n):
                t = i * segment_duration_s + k * segment_duration_s / n
                w.writerow([repr(float(t))] + [repr(float(v)) for v in arr[k]])
