"""Synthetic GNSS-like scenes: BPSK C/A waveforms, transmitter RF fingerprints,
multipath channels and spoofer overlays.

Every transmitter contributes ``conv(fingerprint(waveform), impulse_response)``;
the receiver adds circular complex Gaussian noise. Delays are rounded to whole
samples and the convolution is the linear one truncated to the capture length
(no energy before ``t = 0``).
"""
from __future__ import annotations

import enum
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ValidationError
from .tracking import CHIP_RATE_HZ, NUM_PRNS, gold_code, sample_code


class Label(enum.IntEnum):
    CLEAN = 0
    SPOOFED = 1

    @classmethod
    def parse(cls, value) -> "Label":
        if isinstance(value, Label):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ValidationError(f"unknown label {value!r}") from None
        return cls(int(value))


class Role(enum.Enum):
    GENUINE = "genuine"
    SPOOFER = "spoofer"


@dataclass(frozen=True)
class ChannelSpec:
    """Tapped-delay-line channel: ``[(gain, delay_s), ...]``."""

    paths: tuple[tuple[float, float], ...] = ((1.0, 0.0),)

    def __post_init__(self):
        paths = tuple((float(g), float(d)) for g, d in self.paths)
        object.__setattr__(self, "paths", paths)
        if not paths:
            raise ValidationError("channel.paths: need at least one path")
        delays = [d for _, d in paths]
        if any(not math.isfinite(g) for g, _ in paths):
            raise ValidationError("channel.paths: gains must be finite")
        if any(not math.isfinite(d) or d < 0 for d in delays):
            raise ValidationError("channel.paths: delays must be finite and non-negative")
        if any(b <= a for a, b in zip(delays, delays[1:])):
            raise ValidationError("channel.paths: delays must be strictly increasing")

    def impulse_response(self, sample_rate_hz: float) -> np.ndarray:
        taps = [int(round(d * sample_rate_hz)) for _, d in self.paths]
        h = np.zeros(max(taps) + 1)
        for (g, _), k in zip(self.paths, taps):
            h[k] += g
        return h

    def scaled(self, c: float) -> "ChannelSpec":
        return ChannelSpec(tuple((g * c, d) for g, d in self.paths))


@dataclass(frozen=True)
class FingerprintSpec:
    """Transmitter hardware impairments; the defaults are the neutral element."""

    iq_gain_imbalance: float = 1.0
    iq_phase_imbalance: float = 0.0     # rad
    dc_offset: complex = 0j
    carrier_freq_offset: float = 0.0    # Hz
    phase_noise_std: float = 0.0        # rad per sample (Wiener increment std)
    cubic_nonlinearity: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "dc_offset", complex(self.dc_offset))
        for name in ("iq_gain_imbalance", "iq_phase_imbalance", "carrier_freq_offset",
                     "phase_noise_std", "cubic_nonlinearity"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"fingerprint.{name} must be finite")
        if not (math.isfinite(self.dc_offset.real) and math.isfinite(self.dc_offset.imag)):
            raise ValidationError("fingerprint.dc_offset must be finite")
        if self.iq_gain_imbalance <= 0:
            raise ValidationError("fingerprint.iq_gain_imbalance must be > 0")
        if self.phase_noise_std < 0:
            raise ValidationError("fingerprint.phase_noise_std must be >= 0")

    @property
    def is_identity(self) -> bool:
        return self == FingerprintSpec()


@dataclass(frozen=True)
class TransmitterSpec:
    prn_id: int
    fingerprint: FingerprintSpec = field(default_factory=FingerprintSpec)
    channel: ChannelSpec = field(default_factory=ChannelSpec)
    carrier_to_noise_density_dbhz: float | None = None
    role: Role = Role.GENUINE
    code_phase: float = 0.0   # chips at t = 0, before channel delay

    def __post_init__(self):
        if not isinstance(self.prn_id, (int, np.integer)) or not 1 <= self.prn_id <= NUM_PRNS:
            raise ValidationError(f"transmitter.prn_id must be in 1..{NUM_PRNS}, got {self.prn_id!r}")
        object.__setattr__(self, "role", Role(self.role))

    def noise_key(self, scene_seed: int) -> int:
        """Seed for this transmitter's phase noise.

        Depends on the transmitter's content and the scene seed but not on its
        role or list position, so synthesising genuine and spoofer lists
        separately reproduces the combined scene exactly.
        """
        blob = repr((scene_seed, self.prn_id, self.fingerprint, self.channel, self.code_phase))
        return int.from_bytes(hashlib.sha256(blob.encode()).digest()[:8], "little")


@dataclass(frozen=True)
class SceneSpec:
    genuine: tuple[TransmitterSpec, ...] = ()
    spoofers: tuple[TransmitterSpec, ...] = ()
    noise_std: float = 0.0
    sample_rate_hz: float = 2.046e6
    duration_s: float = 0.004
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "genuine", tuple(self.genuine))
        object.__setattr__(self, "spoofers", tuple(self.spoofers))
        if not (self.sample_rate_hz > 0 and math.isfinite(self.sample_rate_hz)):
            raise ValidationError("scene.sample_rate_hz must be > 0")
        if not (self.duration_s > 0 and math.isfinite(self.duration_s)):
            raise ValidationError("scene.duration_s must be > 0")
        if not (self.noise_std >= 0 and math.isfinite(self.noise_std)):
            raise ValidationError("scene.noise_std must be >= 0")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ValidationError("scene.rng_seed must fit in 64 bits")

    @property
    def num_samples(self) -> int:
        return int(round(self.duration_s * self.sample_rate_hz))

    @property
    def label(self) -> Label:
        return Label.SPOOFED if self.spoofers else Label.CLEAN


@dataclass
class IqSegment:
    samples: np.ndarray
    sample_rate_hz: float
    start_time_s: float = 0.0
    label: Label = Label.CLEAN
    source_tag: str = ""

    def __post_init__(self):
        self.label = Label.parse(self.label)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz


@dataclass
class Capture:
    samples: np.ndarray
    sample_rate_hz: float
    label: Label
    source_tag: str = ""


# --------------------------------------------------------------------------


def gain_for_cn0(cn0_dbhz: float, noise_std: float, sample_rate_hz: float) -> float:
    """Amplitude giving carrier-to-noise density ``cn0_dbhz`` over noise of std ``noise_std``.

    Noise density is ``noise_std**2 / sample_rate_hz`` per Hz and the waveform
    has unit power, so ``A**2 / N0 = 10**(cn0 / 10)``.
    """
    n0 = noise_std ** 2 / sample_rate_hz
    return math.sqrt(10 ** (cn0_dbhz / 10) * n0)


def prn_waveform(prn_id: int, num_samples: int, sample_rate_hz: float,
                 code_phase: float = 0.0) -> np.ndarray:
    """Unit-power complex BPSK chips of the C/A code, no data bits."""
    chips = sample_code(gold_code(prn_id), num_samples, sample_rate_hz, code_phase, CHIP_RATE_HZ)
    return chips.astype(np.complex128)


def apply_fingerprint(samples: np.ndarray, fp: FingerprintSpec, sample_rate_hz: float = 1.0,
                      seed: int | np.random.Generator | None = None) -> np.ndarray:
    """Apply ``fp`` in the fixed order: cubic, IQ imbalance, DC, CFO, phase noise.

    IQ imbalance uses ``y = mu * x + nu * conj(x)`` with
    ``mu = (1 + g e^{-j phi}) / 2`` and ``nu = (1 - g e^{j phi}) / 2``, which for
    a tone leaves an image at the mirrored frequency with amplitude ratio
    ``|1 - g e^{j phi}| / |1 + g e^{-j phi}|``. Neutral stages are skipped so the
    identity spec returns the input unchanged.
    """
    y = np.asarray(samples, dtype=np.complex128)
    if not np.all(np.isfinite(y)):
        raise ValidationError("samples must be finite")
    y = y.copy()
    if fp.cubic_nonlinearity != 0.0:
        y = y + fp.cubic_nonlinearity * y * (y.real ** 2 + y.imag ** 2)
    if fp.iq_gain_imbalance != 1.0 or fp.iq_phase_imbalance != 0.0:
        g, phi = fp.iq_gain_imbalance, fp.iq_phase_imbalance
        mu = (1 + g * np.exp(-1j * phi)) / 2
        nu = (1 - g * np.exp(1j * phi)) / 2
        y = mu * y + nu * np.conj(y)
    if fp.dc_offset != 0:
        y = y + fp.dc_offset
    if fp.carrier_freq_offset != 0.0:
        n = np.arange(len(y))
        y = y * np.exp(2j * np.pi * fp.carrier_freq_offset * n / sample_rate_hz)
    if fp.phase_noise_std > 0.0:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        phase = np.cumsum(rng.normal(0.0, fp.phase_noise_std, len(y)))
        y = y * np.exp(1j * phase)
    return y


def apply_channel(x: np.ndarray, channel: ChannelSpec, sample_rate_hz: float) -> np.ndarray:
    """Linear convolution with the channel taps, truncated to ``len(x)``."""
    n = len(x)
    out = np.zeros(n, dtype=np.complex128)
    for g, d in channel.paths:
        k = int(round(d * sample_rate_hz))
        if k < n:
            out[k:] += g * x[: n - k]
    return out


def _transmitter_signal(tx: TransmitterSpec, scene: SceneSpec) -> np.ndarray:
    n = scene.num_samples
    wave = prn_waveform(tx.prn_id, n, scene.sample_rate_hz, tx.code_phase)
    if not tx.fingerprint.is_identity:
        wave = apply_fingerprint(wave, tx.fingerprint, scene.sample_rate_hz,
                                 seed=tx.noise_key(scene.rng_seed))
    return apply_channel(wave, tx.channel, scene.sample_rate_hz)


def _sum_signals(txs: Sequence[TransmitterSpec], scene: SceneSpec) -> np.ndarray:
    acc = np.zeros(scene.num_samples, dtype=np.complex128)
    for tx in txs:
        acc += _transmitter_signal(tx, scene)
    return acc


def _noise(scene: SceneSpec) -> np.ndarray:
    rng = np.random.default_rng(int(scene.rng_seed))
    s = scene.noise_std / math.sqrt(2)
    n = scene.num_samples
    return rng.normal(0.0, s, n) + 1j * rng.normal(0.0, s, n)


def synthesize_clean(scene: SceneSpec) -> np.ndarray:
    """Genuine transmitters plus receiver noise; ``scene.spoofers`` must be empty."""
    if scene.spoofers:
        raise ValidationError("synthesize_clean: scene.spoofers must be empty")
    out = _sum_signals(scene.genuine, scene)
    if scene.noise_std > 0:
        out = out + _noise(scene)
    return out


def synthesize_scene(scene: SceneSpec) -> Capture:
    """Genuine and spoofer contributions plus noise, labelled by spoofer presence."""
    out = _sum_signals(scene.genuine, scene)
    if scene.spoofers:
        out = out + _sum_signals(scene.spoofers, scene)
    if scene.noise_std > 0:
        out = out + _noise(scene)
    return Capture(out, scene.sample_rate_hz, scene.label)


# --------------------------------------------------------------------------
# scene config files (JSON)


def _fingerprint_from_dict(d: dict) -> FingerprintSpec:
    d = dict(d)
    dc = d.get("dc_offset", 0)
    if isinstance(dc, (list, tuple)):
        d["dc_offset"] = complex(dc[0], dc[1])
    unknown = set(d) - set(FingerprintSpec.__dataclass_fields__)
    if unknown:
        raise ValidationError(f"fingerprint: unknown fields {sorted(unknown)}")
    return FingerprintSpec(**d)


def _transmitter_from_dict(d: dict, role: Role) -> TransmitterSpec:
    d = dict(d)
    if "prn_id" not in d:
        raise ValidationError("transmitter.prn_id is required")
    fp = _fingerprint_from_dict(d.pop("fingerprint", {}))
    ch = d.pop("channel", {"paths": [[1.0, 0.0]]})
    paths = ch["paths"] if isinstance(ch, dict) else ch
    channel = ChannelSpec(tuple(tuple(p) for p in paths))
    d.pop("role", None)
    unknown = set(d) - {"prn_id", "carrier_to_noise_density_dbhz", "code_phase"}
    if unknown:
        raise ValidationError(f"transmitter: unknown fields {sorted(unknown)}")
    return TransmitterSpec(fingerprint=fp, channel=channel, role=role, **d)


def scene_from_dict(d: dict) -> SceneSpec:
    """Build a scene from the JSON schema documented in the README."""
    d = dict(d)
    genuine = tuple(_transmitter_from_dict(t, Role.GENUINE) for t in d.pop("genuine", []))
    spoofers = tuple(_transmitter_from_dict(t, Role.SPOOFER) for t in d.pop("spoofers", []))
    unknown = set(d) - {"noise_std", "sample_rate_hz", "duration_s", "rng_seed", "tag"}
    if unknown:
        raise ValidationError(f"scene: unknown fields {sorted(unknown)}")
    d.pop("tag", None)
    return SceneSpec(genuine=genuine, spoofers=spoofers, **d)


def scene_to_dict(scene: SceneSpec) -> dict:
    def tx(t: TransmitterSpec):
        fp = asdict(t.fingerprint)
        fp["dc_offset"] = [t.fingerprint.dc_offset.real, t.fingerprint.dc_offset.imag]
        return {
            "prn_id": t.prn_id,
            "code_phase": t.code_phase,
            "carrier_to_noise_density_dbhz": t.carrier_to_noise_density_dbhz,
            "fingerprint": fp,
            "channel": {"paths": [list(p) for p in t.channel.paths]},
        }
    return {
        "genuine": [tx(t) for t in scene.genuine],
        "spoofers": [tx(t) for t in scene.spoofers],
        "noise_std": scene.noise_std,
        "sample_rate_hz": scene.sample_rate_hz,
        "duration_s": scene.duration_s,
        "rng_seed": int(scene.rng_seed),
    }


def load_scene(path: str | Path) -> SceneSpec:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc})") from None
    return scene_from_dict(d)


def spoofers_as_genuine(scene: SceneSpec) -> SceneSpec:
    """The spoofer list re-labelled as genuine transmitters (superposition checks)."""
    return replace(scene, genuine=tuple(replace(t, role=Role.GENUINE) for t in scene.spoofers),
                   spoofers=())
