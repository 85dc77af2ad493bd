"""Synthetic fingerprint-family benchmark.

Each family is one "dataset": clean segments hold a genuine C/A signal in
noise, spoofed segments add a spoofer on the same PRN whose hardware
fingerprint (DC offset, IQ imbalance, CFO, phase noise), power ratio and
code offset are drawn per family. Families differ in those parameters, so a
held-out family plays the role of an unseen spoofing scenario.

Every segment gets a random overall gain and a random genuine signal level,
nuisances that the encoder has to learn to ignore.
"""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (DatasetRecord, FeatureSet, PRESETS, Registry, cache_features, load_features,
                     write_registry_file)
from .errors import DataError
from .features import StftConfig, segment_spectrogram
from .sigmodel import (ChannelSpec, FingerprintSpec, IqSegment, Label, Role, SceneSpec,
                       TransmitterSpec, synthesize_scene)
from .tracking import TrackingConfig, gold_code, track_segment


@dataclass(frozen=True)
class FamilySpec:
    """Spoofer hardware and geometry shared by one family."""

    name: str
    dc_offset: complex
    iq_gain: float
    iq_phase: float
    cfo_hz: float
    phase_noise: float
    power_ratio: float        # spoofer / genuine amplitude
    code_offset: float        # chips


@dataclass(frozen=True)
class BenchmarkConfig:
    families: tuple[str, ...] = ("fam1", "fam2", "fam3", "fam4", "fam5")
    segments_per_class: int = 120
    sample_rate_hz: float = 2.046e6
    segment_duration_s: float = 0.004
    noise_std: float = 1.0
    genuine_snr_db: tuple[float, float] = (-12.0, -6.0)   # per-sample, uniform
    gain_db: tuple[float, float] = (-6.0, 6.0)            # overall nuisance gain
    doppler_hz: tuple[float, float] = (-500.0, 500.0)
    fingerprint_scale: float = 1.0
    cfo_hz: tuple[float, float] = (20.0, 100.0)           # |spoofer - genuine| carrier offset
    power_ratio: tuple[float, float] = (1.3, 2.5)
    code_offset: tuple[float, float] = (0.2, 0.5)         # |offset| in chips
    phase_noise: tuple[float, float] = (0.003, 0.005)     # rad per sample
    jitter: float = 0.0       # per-segment relative spread of CFO, power ratio and code offset
    prns: tuple[int, ...] = (1, 3, 7, 11, 19, 23)
    stft: StftConfig = field(default_factory=lambda: StftConfig(32, 32, "hann", decimation=8))
    normalization: str = "raw"
    seed: int = 2024

    def replace(self, **kw) -> "BenchmarkConfig":
        return dataclasses.replace(self, **kw)


def family_spec(cfg: BenchmarkConfig, index: int, name: str) -> FamilySpec:
    rng = np.random.default_rng([cfg.seed, index, 17])
    s = cfg.fingerprint_scale
    dc = s * rng.uniform(0.05, 0.15) * np.exp(2j * np.pi * rng.uniform())
    return FamilySpec(
        name=name,
        dc_offset=complex(dc),
        iq_gain=1.0 + s * rng.uniform(0.05, 0.2) * rng.choice([-1, 1]),
        iq_phase=s * rng.uniform(0.05, 0.2) * rng.choice([-1, 1]),
        cfo_hz=float(rng.uniform(*cfg.cfo_hz) * rng.choice([-1, 1])),
        phase_noise=s * rng.uniform(*cfg.phase_noise),
        power_ratio=float(rng.uniform(*cfg.power_ratio)),
        code_offset=float(rng.uniform(*cfg.code_offset) * rng.choice([-1, 1])),
    )


def _segment_scene(cfg: BenchmarkConfig, fam: FamilySpec, label: Label, rng: np.random.Generator):
    prn = int(rng.choice(cfg.prns))
    snr = rng.uniform(*cfg.genuine_snr_db)
    amp = cfg.noise_std * 10 ** (snr / 20)
    gain = 10 ** (rng.uniform(*cfg.gain_db) / 20)
    code_phase = float(rng.uniform(0, 1023))
    doppler = float(rng.uniform(*cfg.doppler_hz))
    genuine = TransmitterSpec(prn, FingerprintSpec(carrier_freq_offset=doppler),
                              ChannelSpec(((gain * amp, 0.0),)), code_phase=code_phase)
    spoofers = ()
    if label is Label.SPOOFED:
        cfo, ratio, offset = (v * (1 + cfg.jitter * rng.uniform(-1, 1))
                              for v in (fam.cfo_hz, fam.power_ratio, fam.code_offset))
        fp = FingerprintSpec(iq_gain_imbalance=fam.iq_gain, iq_phase_imbalance=fam.iq_phase,
                             dc_offset=fam.dc_offset / max(ratio * amp, 1e-12),
                             carrier_freq_offset=doppler + cfo,
                             phase_noise_std=fam.phase_noise)
        spoofers = (TransmitterSpec(prn, fp, ChannelSpec(((gain * amp * ratio, 0.0),)),
                                    role=Role.SPOOFER, code_phase=(code_phase + offset) % 1023),)
    scene = SceneSpec((genuine,), spoofers, gain * cfg.noise_std, cfg.sample_rate_hz,
                      cfg.segment_duration_s, int(rng.integers(2**63)))
    return scene, prn, code_phase, doppler


def build_family(cfg: BenchmarkConfig, index: int, name: str) -> FeatureSet:
    fam = family_spec(cfg, index, name)
    rng = np.random.default_rng([cfg.seed, index, 29])
    specs, posts, labels, times = [], [], [], []
    tcfg = TrackingConfig(lock_threshold=0.0)
    for i in range(2 * cfg.segments_per_class):
        label = Label(i % 2)
        scene, prn, cp, dop = _segment_scene(cfg, fam, label, rng)
        cap = synthesize_scene(scene)
        seg = IqSegment(cap.samples, cfg.sample_rate_hz, i * cfg.segment_duration_s, label, name)
        specs.append(segment_spectrogram(seg, cfg.stft, cfg.normalization).magnitudes)
        posts.append(track_segment(seg, gold_code(prn), (cp, dop), tcfg).as_array())
        labels.append(int(label))
        times.append(seg.start_time_s)
    return FeatureSet(name, np.stack(specs), np.array(labels), np.stack(posts), np.array(times))


def build_benchmark(cfg: BenchmarkConfig | None = None, cache_dir: str | Path | None = None) -> Registry:
    """Featurised registry with one FeatureSet per family; optionally cached on disk."""
    cfg = cfg or BenchmarkConfig()
    sets = []
    for i, name in enumerate(cfg.families):
        path = None
        if cache_dir is not None:
            key = hashlib.sha256(repr((cfg, i)).encode()).hexdigest()[:12]
            path = Path(cache_dir) / f"{name}-{key}.splc"
            if path.exists():
                try:
                    sets.append(load_features(path, name))
                    continue
                except DataError:
                    pass
        fs = build_family(cfg, i, name)
        if path is not None:
            cache_features(path, fs)
        sets.append(fs)
    return Registry(sets)


def write_benchmark(out_dir: str | Path, cfg: BenchmarkConfig | None = None) -> Path:
    """Write each family as a feature cache plus ``registry.json``; returns the registry path."""
    cfg = cfg or BenchmarkConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for i, name in enumerate(cfg.families):
        path = out_dir / "cache" / f"{name}.splc"
        cache_features(path, build_family(cfg, i, name))
        records.append(DatasetRecord(name, {}, PRESETS["float32"], cache=path))
    reg = out_dir / "registry.json"
    write_registry_file(reg, records)
    return reg
