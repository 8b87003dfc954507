"""Streaming inference: interleave text generation, incremental unit
decoding, and chunk-dispatched vocoder synthesis, with event accounting.

The loop, per generated token (EOS included): extend the unit decoder by
one upsampled block, recompute the collapsed best-path units, and whenever
at least `omega` units are pending, hand everything pending to the vocoder
and advance the dispatch cursor. After EOS, any remainder is flushed. The
encode+adapt step is a pure function of the fixed instruction, so it runs
once before the loop rather than every iteration.

Two clocks: a deterministic simulated clock driven by TimingModel (token
steps advance it by the scripted per-token delay when present, else by
t_token_ms; synthesis occupies a single ordered vocoder worker that runs
alongside the token loop), and wall-clock instrumentation for real-backend
runs. Sweeps and tests use the simulated clock; its runs are
bit-reproducible.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .ctc import best_path, collapse
from .llm import TextResponse, Tokenizer
from .vocoder import MockVocoderConfig, Waveform, synthesize

TOKEN_EMITTED = "TOKEN_EMITTED"
CHUNK_DISPATCHED = "CHUNK_DISPATCHED"
AUDIO_PLAYABLE = "AUDIO_PLAYABLE"
EOS = "EOS"

INFINITY = math.inf


class EventLogError(ValueError):
    pass


class DispatchError(RuntimeError):
    """Vocoder failed mid-stream; .partial carries what completed."""

    def __init__(self, message: str, partial: "StreamResult | None" = None):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class TimingModel:
    t_encode_ms: float = 0.0
    t_prefill_ms: float = 0.0
    t_token_ms: float = 0.0  # per LLM step, decoder block included
    t_voc_fixed_ms: float = 0.0
    t_voc_per_unit_ms: float = 0.0

    def __post_init__(self):
        for name in (
            "t_encode_ms",
            "t_prefill_ms",
            "t_token_ms",
            "t_voc_fixed_ms",
            "t_voc_per_unit_ms",
        ):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass(frozen=True)
class StreamConfig:
    omega: float = INFINITY  # minimum pending units per vocoder dispatch
    timing: TimingModel = field(default_factory=TimingModel)
    play_immediately: bool = True
    clock: str = "simulated"  # or "wall"
    threaded_vocoder: bool = False  # wall clock only

    def __post_init__(self):
        if self.omega != INFINITY and (self.omega < 1 or int(self.omega) != self.omega):
            raise ValueError("omega must be a positive integer or INFINITY")
        if self.clock not in ("simulated", "wall"):
            raise ValueError("clock must be 'simulated' or 'wall'")


@dataclass
class StreamEvent:
    kind: str
    t_ms: float
    payload: dict

    def to_json(self) -> dict:
        return {"kind": self.kind, "t_ms": self.t_ms, "payload": self.payload}


@dataclass
class StreamResult:
    text: TextResponse
    units: list[int]
    waveform: Waveform
    events: list[StreamEvent]
    latency_ms: float | None
    lagging_words: int | None
    chunks: list[tuple[int, int]]  # dispatched [start, end) unit spans


@dataclass
class StreamBackend:
    """Everything run_stream needs, regardless of scripted or trained parts."""

    token_stream_factory: Callable  # adapted features -> stream with .next()
    decoder_session_factory: Callable  # () -> session with .extend/.units
    detokenize: Callable  # token ids -> text
    prepare: Callable = lambda features: None  # encode+adapt, run once
    synthesize_chunk: Callable | None = None  # unit list -> Waveform
    vocoder_cfg: MockVocoderConfig = field(default_factory=MockVocoderConfig)
    eos_id: int = Tokenizer.EOS

    def synth(self, units) -> Waveform:
        if self.synthesize_chunk is not None:
            return self.synthesize_chunk(units)
        return synthesize(units, self.vocoder_cfg)


def run_stream(instruction_features, backend: StreamBackend, cfg: StreamConfig) -> StreamResult:
    if cfg.clock == "simulated":
        return _run_simulated(instruction_features, backend, cfg)
    return _run_wall(instruction_features, backend, cfg)


def _finalize(backend, cfg, tokens, units, events, chunks, wave_parts, end_t):
    if not cfg.play_immediately:
        for ev in events:
            if ev.kind == AUDIO_PLAYABLE:
                ev.t_ms = max(ev.t_ms, end_t)
    events = sorted(events, key=lambda e: e.t_ms)  # stable: ties keep causal order
    samples = (
        np.concatenate([w.samples for w in wave_parts])
        if wave_parts
        else np.zeros(0, dtype=np.int16)
    )
    eos_seen = bool(tokens) and tokens[-1] == backend.eos_id  # False on aborted streams
    text = TextResponse(tokens=list(tokens), text=backend.detokenize(tokens), eos_seen=eos_seen)
    return StreamResult(
        text=text,
        units=list(units),
        waveform=Waveform(samples, backend.vocoder_cfg.sample_rate_hz),
        events=events,
        latency_ms=latency_of(events),
        lagging_words=lagging_words_of(events),
        chunks=chunks,
    )


def _run_simulated(instruction_features, backend, cfg) -> StreamResult:
    timing = cfg.timing
    t = 0.0
    t += timing.t_encode_ms
    adapted = backend.prepare(instruction_features)
    t += timing.t_prefill_ms

    stream = backend.token_stream_factory(adapted)
    session = backend.decoder_session_factory()
    events: list[StreamEvent] = []
    tokens: list[int] = []
    units: list[int] = []
    chunks: list[tuple[int, int]] = []
    wave_parts: list[Waveform] = []
    j = 0
    sample_pos = 0
    voc_free_at = 0.0

    def dispatch(now: float):
        nonlocal j, sample_pos, voc_free_at
        chunk = units[j:]
        events.append(
            StreamEvent(
                CHUNK_DISPATCHED, now, {"start": j, "end": len(units), "units": list(chunk)}
            )
        )
        try:
            wave = backend.synth(chunk)
        except Exception as exc:
            partial = _finalize(backend, cfg, tokens, units, events, chunks, wave_parts, now)
            raise DispatchError(f"vocoder failed on chunk {len(chunks)}: {exc}", partial) from exc
        synth_start = max(now, voc_free_at)  # one ordered vocoder worker
        done = synth_start + (
            timing.t_voc_fixed_ms + len(chunk) * timing.t_voc_per_unit_ms
        )
        voc_free_at = done
        wave_parts.append(wave)
        events.append(
            StreamEvent(
                AUDIO_PLAYABLE,
                done,
                {"sample_start": sample_pos, "sample_end": sample_pos + len(wave.samples)},
            )
        )
        chunks.append((j, len(units)))
        sample_pos += len(wave.samples)
        j = len(units)

    while True:
        token, hidden, delay = stream.next()
        t += delay if delay is not None else timing.t_token_ms
        tokens.append(token)
        words_so_far = len(backend.detokenize(tokens).split())
        events.append(
            StreamEvent(TOKEN_EMITTED, t, {"token": token, "words_so_far": words_so_far})
        )
        session.extend(hidden)
        units = session.units()
        if cfg.omega != INFINITY and len(units) - j >= cfg.omega:
            dispatch(t)
        if token == backend.eos_id:
            break

    events.append(StreamEvent(EOS, t, {}))
    if j < len(units):
        dispatch(t)
    return _finalize(backend, cfg, tokens, units, events, chunks, wave_parts, t)


def _run_wall(instruction_features, backend, cfg) -> StreamResult:
    t0 = time.monotonic()

    def now() -> float:
        return (time.monotonic() - t0) * 1000.0

    adapted = backend.prepare(instruction_features)
    stream = backend.token_stream_factory(adapted)
    session = backend.decoder_session_factory()
    events: list[StreamEvent] = []
    tokens: list[int] = []
    units: list[int] = []
    chunks: list[tuple[int, int]] = []
    wave_parts: list[Waveform] = []
    j = 0

    worker = _VocoderWorker(backend) if cfg.threaded_vocoder else None

    def dispatch():
        nonlocal j
        chunk = units[j:]
        span = (j, len(units))
        events.append(
            StreamEvent(
                CHUNK_DISPATCHED, now(), {"start": j, "end": len(units), "units": list(chunk)}
            )
        )
        if worker is not None:
            worker.submit(chunk, span, len(chunks))
        else:
            try:
                wave = backend.synth(chunk)
            except Exception as exc:
                partial = _finalize(
                    backend, cfg, tokens, units, events, chunks, wave_parts, now()
                )
                raise DispatchError(f"vocoder failed: {exc}", partial) from exc
            sample_pos = sum(len(w.samples) for w in wave_parts)
            wave_parts.append(wave)
            events.append(
                StreamEvent(
                    AUDIO_PLAYABLE,
                    now(),
                    {
                        "sample_start": sample_pos,
                        "sample_end": sample_pos + len(wave.samples),
                    },
                )
            )
        chunks.append(span)
        j = len(units)

    while True:
        token, hidden, _delay = stream.next()
        tokens.append(token)
        words_so_far = len(backend.detokenize(tokens).split())
        events.append(
            StreamEvent(TOKEN_EMITTED, now(), {"token": token, "words_so_far": words_so_far})
        )
        session.extend(hidden)
        units = session.units()
        if cfg.omega != INFINITY and len(units) - j >= cfg.omega:
            dispatch()
        if token == backend.eos_id:
            break

    events.append(StreamEvent(EOS, now(), {}))
    if j < len(units):
        dispatch()
    if worker is not None:
        results = worker.drain()
        sample_pos = 0
        for wave, _span in results:
            wave_parts.append(wave)
            events.append(
                StreamEvent(
                    AUDIO_PLAYABLE,
                    now(),
                    {"sample_start": sample_pos, "sample_end": sample_pos + len(wave.samples)},
                )
            )
            sample_pos += len(wave.samples)
    return _finalize(backend, cfg, tokens, units, events, chunks, wave_parts, now())


class _VocoderWorker:
    """Ordered producer/consumer hand-off; chunks synthesize in dispatch order."""

    def __init__(self, backend: StreamBackend):
        import queue
        import threading

        self._backend = backend
        self._q: "queue.Queue" = queue.Queue()
        self._results: list = []
        self._error: Exception | None = None
        self._thread = threading.Thread(target=self._loop, daemon=True)
        self._thread.start()

    def _loop(self):
        while True:
            item = self._q.get()
            if item is None:
                return
            chunk, span, idx = item
            try:
                self._results.append((self._backend.synth(chunk), span))
            except Exception as exc:  # surfaced on drain
                self._error = exc
                return

    def submit(self, chunk, span, idx):
        self._q.put((list(chunk), span, idx))

    def drain(self):
        self._q.put(None)
        self._thread.join()
        if self._error is not None:
            raise DispatchError(f"vocoder worker failed: {self._error}")
        return self._results


# ----------------------------------------------------------------- metrics


def latency_of(events) -> float | None:
    """First AUDIO_PLAYABLE timestamp relative to stream start (t=0)."""
    if not events:
        raise EventLogError("empty event log")
    for ev in events:
        if ev.kind == AUDIO_PLAYABLE:
            return ev.t_ms
    if any(ev.kind == EOS for ev in events):
        return None  # stream produced no audio
    raise EventLogError("log has neither AUDIO_PLAYABLE nor EOS")


def lagging_words_of(events, text: TextResponse | None = None) -> int | None:
    """Words already emitted strictly before the first playable audio."""
    if not events:
        raise EventLogError("empty event log")
    first_audio = latency_of(events)
    if first_audio is None:
        return None
    words = 0
    for ev in events:
        if ev.kind == TOKEN_EMITTED and ev.t_ms < first_audio:
            words = ev.payload["words_so_far"]
    if text is not None:
        words = min(words, len(text.text.split()))
    return words


def analytic_latency(
    cfg: StreamConfig, alignment_blocks, blank: int, token_delays=None
) -> float | None:
    """Closed-form first-audio time for a known alignment trace.

    Finds the first token index whose collapsed alignment prefix holds at
    least omega units; the first dispatch then carries every pending unit.
    Matches the simulated clock exactly (same accumulation order) under
    play_immediately.
    """
    timing = cfg.timing
    t = 0.0
    t += timing.t_encode_ms
    t += timing.t_prefill_ms
    frames: list[int] = []
    for i, block in enumerate(alignment_blocks):
        d = token_delays[i] if token_delays is not None else timing.t_token_ms
        t += d
        frames.extend(int(a) for a in block)
        n_units = len(collapse(frames, blank))
        if cfg.omega != INFINITY and n_units >= cfg.omega:
            return t + (timing.t_voc_fixed_ms + n_units * timing.t_voc_per_unit_ms)
    n_units = len(collapse(frames, blank))
    if n_units > 0:  # flush after the final token
        return t + (timing.t_voc_fixed_ms + n_units * timing.t_voc_per_unit_ms)
    return None


# ------------------------------------------------------------ test doubles


class ScriptedAlignmentDecoder:
    """Decoder double whose sessions emit predetermined per-token alignments.

    Each extend() produces one lambda-row block of one-hot logits realizing
    the scripted alignment (blank encoded as -1 in the script), so
    best_path recovers the script exactly and hand-traced runs stay exact.
    """

    def __init__(self, blocks, unit_vocab_k: int):
        self.blocks = [[int(a) for a in block] for block in blocks]
        self.k = unit_vocab_k
        lengths = {len(b) for b in self.blocks}
        if len(lengths) > 1:
            raise ValueError("all alignment blocks must share one lambda")

    def start_session(self):
        return _ScriptedAlignmentSession(self)


class _ScriptedAlignmentSession:
    def __init__(self, parent: ScriptedAlignmentDecoder):
        self._parent = parent
        self._i = 0
        self._rows: list[np.ndarray] = []

    def extend(self, hidden_row) -> np.ndarray:
        parent = self._parent
        if self._i >= len(parent.blocks):
            raise IndexError("scripted alignment exhausted; script shorter than token stream")
        block = parent.blocks[self._i]
        self._i += 1
        logits = np.zeros((len(block), parent.k + 1))
        for r, sym in enumerate(block):
            col = parent.k if sym < 0 else sym
            logits[r, col] = 10.0
        self._rows.append(logits)
        return logits

    def logits(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, self._parent.k + 1))
        return np.concatenate(self._rows, axis=0)

    def units(self) -> list[int]:
        rows = self.logits()
        if rows.shape[0] == 0:
            return []
        return collapse(best_path(rows), blank=self._parent.k)
