"""Synthesise a clean/spoofed pair and print what each feature stage sees.

    python3 demos/scene_features.py
"""
import numpy as np

from rffspoof.features import StftConfig, segment_spectrogram
from rffspoof.sigmodel import (ChannelSpec, FingerprintSpec, IqSegment, Role, SceneSpec, TransmitterSpec,
                               synthesize_scene)
from rffspoof.tracking import gold_code, track_segment

FS = 2.046e6


def main():
    genuine = TransmitterSpec(7, FingerprintSpec(), ChannelSpec(((0.5, 0.0),)),
                              code_phase=300.0)
    spoofer = TransmitterSpec(7, FingerprintSpec(iq_gain_imbalance=1.1, iq_phase_imbalance=0.1,
                                                 dc_offset=0.1 + 0.05j, carrier_freq_offset=60.0,
                                                 phase_noise_std=0.004),
                              ChannelSpec(((0.9, 0.0),)), role=Role.SPOOFER, code_phase=300.3)
    cfg = StftConfig(32, 32, "hann", decimation=8)
    for name, spoofers in (("clean", ()), ("spoofed", (spoofer,))):
        cap = synthesize_scene(SceneSpec((genuine,), spoofers, 1.0, FS, 0.02, 11))
        seg = IqSegment(cap.samples, FS)
        spec = segment_spectrogram(IqSegment(cap.samples[:8184], FS), cfg, "raw")
        post = track_segment(seg, gold_code(7), (300.0, 0.0))
        print(f"{name:8s} spectrogram {spec.shape}, mean magnitude {spec.magnitudes.mean():.3f}")
        print(f"         mean |DLL discriminator| {np.mean(np.abs(post.dll_discr)):.3f}, "
              f"mean PLL lock {np.mean(post.pll_lock):.3f}, "
              f"Doppler spread {np.ptp(post.doppler_hz):.1f} Hz")


if __name__ == "__main__":
    main()
