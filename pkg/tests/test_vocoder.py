import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unitstream import vocoder as V


def test_one_unit_sample_count():
    wave = V.synthesize([3])
    assert len(wave.samples) == 320  # 16000 Hz * 20 ms
    assert wave.sample_rate_hz == 16000


def test_empty_units():
    wave = V.synthesize([])
    assert len(wave.samples) == 0


def test_duration_exact():
    cfg = V.MockVocoderConfig()
    wave = V.synthesize([1, 2, 3, 4, 5], cfg)
    assert wave.duration_ms == 5 * cfg.unit_duration_ms


def test_determinism():
    a = V.synthesize([1, 9, 4])
    b = V.synthesize([1, 9, 4])
    assert np.array_equal(a.samples, b.samples)


@given(st.lists(st.integers(0, 15), max_size=12), st.integers(0, 12))
@settings(max_examples=100)
def test_segment_additivity(units, cut):
    cut = min(cut, len(units))
    whole = V.synthesize(units).samples
    left = V.synthesize(units[:cut]).samples
    right = V.synthesize(units[cut:]).samples
    assert np.array_equal(np.concatenate([left, right]), whole)


def test_amplitude_bounds():
    wave = V.synthesize(list(range(10)), V.MockVocoderConfig(amplitude=1.0))
    assert np.abs(wave.samples.astype(np.int32)).max() <= 32767


def test_config_validation():
    with pytest.raises(ValueError):
        V.MockVocoderConfig(unit_duration_ms=0)
    with pytest.raises(ValueError):
        V.MockVocoderConfig(amplitude=1.5)


# ------------------------------------------------------------------ wav i/o


def test_wav_round_trip_bit_exact(tmp_path, rng):
    samples = rng.integers(-32768, 32767, size=320, dtype=np.int16)
    wave = V.Waveform(samples, 16000)
    path = tmp_path / "x.wav"
    V.write_wav(wave, path)
    back = V.read_wav(path)
    assert back.sample_rate_hz == 16000
    assert np.array_equal(back.samples, samples)


def test_wav_canonical_size(tmp_path):
    n = 123
    V.write_wav(V.Waveform(np.zeros(n, dtype=np.int16), 8000), tmp_path / "s.wav")
    assert (tmp_path / "s.wav").stat().st_size == 44 + 2 * n


def test_wav_header_fields(tmp_path):
    V.write_wav(V.Waveform(np.zeros(10, dtype=np.int16), 22050), tmp_path / "h.wav")
    raw = (tmp_path / "h.wav").read_bytes()
    assert raw[:4] == b"RIFF" and raw[8:12] == b"WAVE"
    import struct

    size, pcm, channels, rate, byte_rate, block, bits = struct.unpack_from("<IHHIIHH", raw, 16)
    assert (size, pcm, channels, rate, bits) == (16, 1, 1, 22050, 16)
    assert byte_rate == 22050 * 2 and block == 2
    back = V.read_wav(tmp_path / "h.wav")
    assert back.sample_rate_hz == 22050 and len(back.samples) == 10


def test_wav_parse_errors_carry_offsets(tmp_path):
    bad = tmp_path / "bad.wav"
    bad.write_bytes(b"RIFX" + b"\x00" * 40)
    with pytest.raises(V.WavFormatError) as err:
        V.read_wav(bad)
    assert err.value.offset == 0

    bad.write_bytes(b"RIFF\x24\x00\x00\x00WOVE" + b"\x00" * 32)
    with pytest.raises(V.WavFormatError) as err:
        V.read_wav(bad)
    assert err.value.offset == 8

    # data chunk claiming more bytes than the file holds
    good = tmp_path / "trunc.wav"
    V.write_wav(V.Waveform(np.zeros(4, dtype=np.int16), 16000), good)
    raw = bytearray(good.read_bytes())
    raw[40:44] = (9999).to_bytes(4, "little")
    bad.write_bytes(bytes(raw))
    with pytest.raises(V.WavFormatError):
        V.read_wav(bad)


def test_external_vocoder_wire_format(tmp_path):
    seen = {}

    def transport(request):
        seen.update(request)
        wave = V.synthesize(request["units"])
        path = tmp_path / "t.wav"
        V.write_wav(wave, path)
        return path.read_bytes()

    ext = V.ExternalVocoder(transport)
    wave = ext.synthesize([1, 2, 3], 16000)
    assert seen == {"units": [1, 2, 3], "sample_rate": 16000}
    assert np.array_equal(wave.samples, V.synthesize([1, 2, 3]).samples)
