import json
import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, strategies as st

from rffspoof.dataio import (CACHE_MAGIC, DatasetRecord, FeatureSet, IqFormat, PRESETS, Registry,
                             cache_features, capture_num_samples, decode_features, encode_features,
                             iter_capture_segments, load_features, load_registry_file, read_iq_capture,
                             resolve_format, write_iq_capture, write_registry_file)
from rffspoof.errors import CrcError, DataError, ValidationError
from rffspoof.sigmodel import Label
from rffspoof.tracking import postcorr_vector_length


def feature_set(rng, n=6, post=True, tag="t"):
    return FeatureSet(tag, rng.normal(size=(n, 4, 3)), np.arange(n) % 2,
                      rng.uniform(-1, 1, size=(n, 2, 5)) if post else None, np.arange(n) * 0.004)


# --- IQ files -----------------------------------------------------------------------

@pytest.mark.parametrize("spec", [dict(sample_type="int16"), dict(sample_type="int8", scale=1 / 127),
                                  dict(sample_type="int16", interleave="QI", endianness="big"),
                                  dict(sample_type="float32", scale=1.0)])
def test_iq_roundtrip(tmp_path, rng, spec):
    fmt = IqFormat(sample_rate_hz=1e5, **spec)
    counts = rng.integers(-100, 100, size=(50, 2))
    x = (counts[:, 0] + 1j * counts[:, 1]) * fmt.scale
    p = tmp_path / "c.bin"
    write_iq_capture(p, x, fmt)
    assert p.stat().st_size == 50 * fmt.bytes_per_sample
    assert capture_num_samples(p, fmt) == 50
    assert np.array_equal(read_iq_capture(p, fmt), x)


def test_int16_layout(tmp_path):
    fmt = IqFormat("int16", "IQ", "little", 1e5, 1.0)
    write_iq_capture(tmp_path / "c.bin", np.array([1 - 2j, -3 + 4j]), fmt)
    assert (tmp_path / "c.bin").read_bytes() == struct.pack("<4h", 1, -2, -3, 4)
    qi = IqFormat("int16", "QI", "big", 1e5, 1.0)
    write_iq_capture(tmp_path / "d.bin", np.array([1 - 2j]), qi)
    assert (tmp_path / "d.bin").read_bytes() == struct.pack(">2h", -2, 1)


def test_write_out_of_range_raises(tmp_path):
    fmt = IqFormat("int8", scale=1.0)
    with pytest.raises(ValidationError, match="sample 1"):
        write_iq_capture(tmp_path / "c.bin", np.array([0, 200j]), fmt)
    with pytest.raises(ValidationError, match="not finite"):
        write_iq_capture(tmp_path / "c.bin", np.array([np.nan]), fmt)


def test_read_windows(tmp_path):
    fmt = IqFormat("float32", sample_rate_hz=1000.0, scale=1.0)
    x = np.arange(100) + 0j
    write_iq_capture(tmp_path / "c.bin", x, fmt)
    assert np.array_equal(read_iq_capture(tmp_path / "c.bin", fmt, 0.01, 0.02), x[10:30])
    with pytest.raises(DataError, match="exceeds"):
        read_iq_capture(tmp_path / "c.bin", fmt, 0.09, 0.02)
    with pytest.raises(DataError):
        read_iq_capture(tmp_path / "missing.bin", fmt)


def test_iter_segments_streams_consecutive(tmp_path, rng):
    fmt = IqFormat("float32", sample_rate_hz=1e4, scale=1.0)
    x = (rng.normal(size=170) + 1j * rng.normal(size=170)).astype(np.complex64).astype(complex)
    write_iq_capture(tmp_path / "c.bin", x, fmt)
    segs = list(iter_capture_segments(tmp_path / "c.bin", fmt, 0.004, "spoofed", "s", chunk_segments=3))
    assert len(segs) == 4
    assert np.array_equal(np.concatenate([s.samples for s in segs]), x[:160])
    assert [s.start_time_s for s in segs] == [0.0, 0.004, 0.008, 0.012]
    assert all(s.label is Label.SPOOFED and s.source_tag == "s" for s in segs)


def test_format_resolution():
    assert resolve_format("texbat") is PRESETS["texbat"]
    f = resolve_format({"preset": "texbat", "sample_rate_hz": 5e6})
    assert f.sample_rate_hz == 5e6 and f.sample_type.value == "int16"
    for bad in ("nope", 3, {"interleave": "II"}, {"sample_type": "int4"}):
        with pytest.raises((ValidationError, ValueError)):
            resolve_format(bad)


# --- feature cache --------------------------------------------------------------

@pytest.mark.parametrize("post", [True, False])
def test_cache_roundtrip_bit_exact(tmp_path, rng, post):
    fs = feature_set(rng, post=post)
    cache_features(tmp_path / "x.splc", fs)
    back = load_features(tmp_path / "x.splc", "x")
    assert np.array_equal(back.specs, fs.specs) and np.array_equal(back.labels, fs.labels)
    assert np.array_equal(back.start_times, fs.start_times)
    assert (back.postcorr is None) == (not post)
    if post:
        assert np.array_equal(back.postcorr, fs.postcorr)


def test_cache_header_layout(rng):
    blob = encode_features(feature_set(rng, n=2))
    assert blob[:4] == CACHE_MAGIC
    assert struct.unpack_from("<IQIIII", blob, 4) == (1, 2, 4, 3, 2, 5)
    item = 1 + 8 + 8 * 12 + 8 * 10
    assert len(blob) == 4 + 28 + 2 * item + 4
    assert struct.unpack("<I", blob[-4:])[0] == zlib.crc32(blob[:-4])


def test_cache_corruption_detected(rng):
    blob = bytearray(encode_features(feature_set(rng)))
    blob[50] ^= 0x01
    with pytest.raises(CrcError):
        decode_features(bytes(blob))
    with pytest.raises(DataError):
        decode_features(b"XXXX" + bytes(blob[4:]))


def test_cache_dimension_mismatch_named(rng):
    blob = encode_features(feature_set(rng))
    with pytest.raises(ValidationError, match="4x3.*5x3"):
        decode_features(blob, "t", expected_spec_shape=(5, 3))
    with pytest.raises(ValidationError, match="post-correlation"):
        decode_features(blob, "t", expected_post_shape=(4, 5))


@given(st.integers(0, 2**32), st.integers(1, 5), st.booleans())
def test_cache_roundtrip_property(seed, n, post):
    fs = feature_set(np.random.default_rng(seed), n=n, post=post)
    back = decode_features(encode_features(fs))
    assert encode_features(back) == encode_features(fs)


# --- feature sets and registry ------------------------------------------------------

def test_featureset_validation(rng):
    with pytest.raises(ValidationError):
        FeatureSet("x", rng.normal(size=(3, 2, 2)), [0, 1])
    with pytest.raises(ValidationError):
        FeatureSet("x", rng.normal(size=(2, 2, 2)), [0, 1], rng.normal(size=(2, 3, 4)))
    fs = feature_set(rng)
    assert fs.count("clean") == 3 and fs.spec_shape == (4, 3) and fs.post_shape == (2, 5)
    assert fs.post_vectors().shape == (6, postcorr_vector_length(2))
    with pytest.raises(DataError):
        feature_set(rng, post=False).post_vectors()


def test_registry(rng):
    reg = Registry([feature_set(rng, tag="b"), feature_set(rng, tag="a")])
    assert reg.tags == ["a", "b"] and "a" in reg
    with pytest.raises(ValidationError, match="duplicate"):
        reg.add(feature_set(rng, tag="a"))
    with pytest.raises(ValidationError, match="known"):
        reg["zz"]


def test_registry_file_roundtrip(tmp_path, rng):
    fmt = IqFormat("float32", sample_rate_hz=1e4, scale=1.0)
    for name in ("clean.bin", "spoof.bin"):
        write_iq_capture(tmp_path / name, np.zeros(80, complex), fmt)
    rec = DatasetRecord("ds1", {Label.CLEAN: tmp_path / "clean.bin", Label.SPOOFED: tmp_path / "spoof.bin"},
                        fmt, track={"prn_id": 3}, cache=tmp_path / "cache" / "ds1.splc")
    write_registry_file(tmp_path / "reg.json", [rec])
    doc = json.loads((tmp_path / "reg.json").read_text())
    assert doc["datasets"][0]["captures"] == {"clean": "clean.bin", "spoofed": "spoof.bin"}
    back = load_registry_file(tmp_path / "reg.json")["ds1"]
    assert back.captures == rec.captures and back.fmt == fmt and back.track == {"prn_id": 3}
    assert not back.cached


def test_registry_file_errors(tmp_path):
    p = tmp_path / "reg.json"
    with pytest.raises(DataError):
        load_registry_file(p)
    p.write_text("{")
    with pytest.raises(ValidationError, match="JSON"):
        load_registry_file(p)
    p.write_text(json.dumps({"datasets": [{"tag": "x", "captures": {"clean": "nope.bin"}}]}))
    with pytest.raises(DataError, match="nope.bin"):
        load_registry_file(p)
    p.write_text(json.dumps({"datasets": [{"tag": "x"}]}))
    with pytest.raises(DataError, match="no captures"):
        load_registry_file(p)
