"""Unit-to-waveform synthesis plus WAV (RIFF PCM16 mono) serialization.

The mock vocoder maps each unit to a fixed-duration sine segment whose
frequency encodes the unit id, with the phase reset at every segment. The
phase reset is what makes chunked synthesis concatenate sample-exactly to
full-sequence synthesis — the property the streaming pipeline is tested
against. A real neural vocoder lacks it, which is exactly why small chunk
sizes cost naturalness there; that penalty is documented, not modeled.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class WavFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class Waveform:
    samples: np.ndarray  # int16
    sample_rate_hz: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.int16)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    @property
    def duration_ms(self) -> float:
        return 1000.0 * len(self.samples) / self.sample_rate_hz


@dataclass(frozen=True)
class MockVocoderConfig:
    unit_duration_ms: float = 20.0
    base_freq_hz: float = 100.0
    freq_step_hz: float = 5.0
    amplitude: float = 0.3
    sample_rate_hz: int = 16000

    def __post_init__(self):
        if self.unit_duration_ms <= 0:
            raise ValueError("unit_duration_ms must be positive")
        if not 0.0 < self.amplitude <= 1.0:
            raise ValueError("amplitude must be in (0, 1]")


def samples_per_unit(cfg: MockVocoderConfig) -> int:
    return int(round(cfg.sample_rate_hz * cfg.unit_duration_ms / 1000.0))


def synthesize(units, cfg: MockVocoderConfig = MockVocoderConfig()) -> Waveform:
    """One sine segment per unit at base + unit * step Hz, phase reset each segment."""
    n = samples_per_unit(cfg)
    t = np.arange(n) / cfg.sample_rate_hz
    peak = cfg.amplitude * 32767.0
    segments = []
    for u in units:
        freq = cfg.base_freq_hz + int(u) * cfg.freq_step_hz
        segments.append(np.round(peak * np.sin(2.0 * np.pi * freq * t)).astype(np.int16))
    if not segments:
        return Waveform(np.zeros(0, dtype=np.int16), cfg.sample_rate_hz)
    return Waveform(np.concatenate(segments), cfg.sample_rate_hz)


def write_wav(wave: Waveform, path) -> None:
    """Canonical 44-byte RIFF/WAVE header, PCM 16-bit little-endian mono."""
    data = wave.samples.astype("<i2").tobytes()
    rate = wave.sample_rate_hz
    header = (
        b"RIFF"
        + struct.pack("<I", 36 + len(data))
        + b"WAVE"
        + b"fmt "
        + struct.pack("<IHHIIHH", 16, 1, 1, rate, rate * 2, 2, 16)
        + b"data"
        + struct.pack("<I", len(data))
    )
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data)


def read_wav(path) -> Waveform:
    with open(path, "rb") as fh:
        return parse_wav_bytes(fh.read())


def parse_wav_bytes(raw: bytes) -> Waveform:
    if len(raw) < 12:
        raise WavFormatError("file shorter than RIFF header", len(raw))
    if raw[0:4] != b"RIFF":
        raise WavFormatError(f"expected RIFF, found {raw[0:4]!r}", 0)
    if raw[8:12] != b"WAVE":
        raise WavFormatError(f"expected WAVE, found {raw[8:12]!r}", 8)

    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body_start = pos + 8
        if body_start + size > len(raw):
            raise WavFormatError(f"chunk {chunk_id!r} overruns file", pos + 4)
        if chunk_id == b"fmt ":
            if size < 16:
                raise WavFormatError("fmt chunk too small", pos + 4)
            fmt = struct.unpack_from("<HHIIHH", raw, body_start)
        elif chunk_id == b"data":
            data = raw[body_start : body_start + size]
        pos = body_start + size + (size & 1)  # chunks are word-aligned
    if fmt is None:
        raise WavFormatError("missing fmt chunk", pos)
    if data is None:
        raise WavFormatError("missing data chunk", pos)

    audio_format, channels, rate, _byte_rate, _block_align, bits = fmt
    if audio_format != 1 or channels != 1 or bits != 16:
        raise WavFormatError(
            f"unsupported format (pcm={audio_format}, ch={channels}, bits={bits})", 20
        )
    if len(data) % 2 != 0:
        raise WavFormatError("data chunk has odd byte length", len(raw))
    return Waveform(np.frombuffer(data, dtype="<i2").astype(np.int16), rate)


class ExternalVocoder:
    """Wire-format adapter for a real unit vocoder behind a callable transport.

    The transport takes a JSON-serializable request {"units": [...],
    "sample_rate": int} and must return WAV bytes; tests exercise the framing
    with an in-process fake, real deployments supply a subprocess or socket
    call.
    """

    def __init__(self, transport):
        self._transport = transport

    def synthesize(self, units, sample_rate_hz: int = 16000) -> Waveform:
        request = {"units": [int(u) for u in units], "sample_rate": int(sample_rate_hz)}
        return parse_wav_bytes(self._transport(request))
