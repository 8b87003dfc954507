"""Speech-instruction dataset construction scaffolding.

The three-step pipeline (rewrite the instruction for spoken delivery,
generate a concise spoken-style response, synthesize speech) runs against
client interfaces. Stub clients keep everything offline and deterministic;
HTTP adapters exist for real services but are exercised only through an
injected transport in tests. Records land in an append-only JSONL store
with a manifest checkpoint, so builds deduplicate and resume.
"""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .fmat import read_fmat, write_fmat
from .units import Codebook, merge_consecutive, quantize, validate_unit_sequence

log = logging.getLogger(__name__)


class ValidationError(ValueError):
    """Model output failed schema validation; .raw carries the original text."""

    def __init__(self, message: str, raw: str = ""):
        super().__init__(message)
        self.raw = raw


# ------------------------------------------------------------------ templates

REWRITE_PROMPT_TEMPLATE = """\
Below is an instruction data containing the user's instruction. I would like \
to generate a speech version of this instruction for training a large \
language model that supports speech input. Therefore, please rewrite my \
instruction data according to the following requirements:

1. Modify the instruction to simulate human speech, adding fillers as \
appropriate (but not too many 'you know', 'like', etc.).

2. The question should not contain content that cannot be synthesized by the \
TTS model. Numbers should be written in English words rather than Arabic \
numerals.

3. The question should be relatively brief without excessive verbiage.

[instruction]: {instruction}

Please output in JSON format as follows: {{"question": {{question}}}}.
"""

RESPONSE_PROMPT_TEMPLATE = """\
Below is the transcribed text of a user's speech query. Please provide a \
response to this question, which will be converted to speech using TTS. \
Please follow these requirements for your response:

1. Your response should not contain content that cannot be synthesized by \
the TTS model, such as parentheses, ordered lists, etc. Numbers should be \
written in English words rather than Arabic numerals.

2. Your response should be very concise and to the point, avoiding lengthy \
explanations.

[instruction]: {instruction}

Please output in JSON format as follows: {{"response": {{response}}}}.
"""

# Shipped as documentation only; scoring against a judge model is out of scope.
SCORING_PROMPT_TEMPLATE = """\
I need your help to evaluate the performance of several models in the speech \
interaction scenario. The models will receive a speech input from the user, \
which they need to understand and respond to with a speech output. Your task \
is to rate the model's responses based on the provided user input \
transcription [Instruction] and the model's output transcription [Response]. \
Please evaluate the response from two perspectives: content and style, and \
provide a score for each on a scale of 1 to 5.

### [Instruction]: {instruction}

### [Response]: {response}

After evaluating, please output the scores in JSON format: \
{{"content": content score, "style": style score}}. You don't need to \
provide any explanations.
"""


def render_rewrite_prompt(instruction: str) -> str:
    if not instruction:
        raise ValidationError("instruction must be non-empty")
    return REWRITE_PROMPT_TEMPLATE.format(instruction=instruction)


def render_response_prompt(instruction: str) -> str:
    if not instruction:
        raise ValidationError("instruction must be non-empty")
    return RESPONSE_PROMPT_TEMPLATE.format(instruction=instruction)


def parse_model_json(raw: str, key: str) -> str:
    """Extract the single expected key from a model reply.

    Tolerates prose around the JSON by scanning for the first parseable
    object; the object must contain exactly `key` mapping to a string.
    """
    decoder = json.JSONDecoder()
    for start, ch in enumerate(raw):
        if ch != "{":
            continue
        try:
            obj, _end = decoder.raw_decode(raw[start:])
        except json.JSONDecodeError:
            continue
        if not isinstance(obj, dict):
            continue
        if set(obj.keys()) != {key}:
            raise ValidationError(
                f"expected exactly one key {key!r}, got {sorted(obj.keys())}", raw
            )
        value = obj[key]
        if not isinstance(value, str):
            raise ValidationError(f"{key!r} must map to a string", raw)
        return value
    raise ValidationError("no JSON object found in model output", raw)


# ------------------------------------------------------------------- records


@dataclass
class TripletRecord:
    id: str
    instruction_text: str
    instruction_features_path: str
    response_text: str
    response_units: list[int]
    provenance: dict = field(default_factory=dict)
    features: np.ndarray | None = None  # in-memory raw frames; not serialized

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "instruction_text": self.instruction_text,
            "instruction_features_path": self.instruction_features_path,
            "response_text": self.response_text,
            "response_units": [int(u) for u in self.response_units],
            "provenance": self.provenance,
        }

    @classmethod
    def from_json(cls, rec: dict) -> "TripletRecord":
        return cls(
            id=rec["id"],
            instruction_text=rec["instruction_text"],
            instruction_features_path=rec["instruction_features_path"],
            response_text=rec["response_text"],
            response_units=[int(u) for u in rec["response_units"]],
            provenance=rec.get("provenance", {}),
        )

    def load_features(self, root=".") -> np.ndarray:
        if self.features is not None:
            return self.features
        return read_fmat(Path(root) / self.instruction_features_path)


def record_id(instruction: str) -> str:
    return hashlib.sha1(instruction.encode("utf-8")).hexdigest()[:16]


def save_records_jsonl(records, path) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r.to_json(), sort_keys=True) + "\n")


def load_records_jsonl(path) -> list[TripletRecord]:
    records = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            records.append(TripletRecord.from_json(json.loads(line)))
    return records


# ------------------------------------------------------------------- clients


class RewriteClient(Protocol):
    name: str

    def rewrite_instruction(self, instruction: str) -> str: ...


class ResponseClient(Protocol):
    name: str

    def respond(self, instruction: str) -> str: ...


class TtsClient(Protocol):
    name: str

    def synthesize_features(self, text: str) -> tuple[np.ndarray, str]:
        """Returns (feature frames, voice name)."""
        ...


@dataclass
class DatasetClients:
    rewrite: RewriteClient
    respond: ResponseClient
    tts: TtsClient


class StubRewriteClient:
    """Identity rewrite; offline stand-in for the rewriting model."""

    name = "stub-rewrite"

    def rewrite_instruction(self, instruction: str) -> str:
        return instruction


class StubResponseClient:
    name = "stub-response"

    def respond(self, instruction: str) -> str:
        tail = instruction.split()[-1] if instruction.split() else "that"
        return f"the short answer is {tail}"


class StubTtsClient:
    """Deterministic per-word feature rows repeated a few frames each."""

    name = "stub-tts"

    def __init__(self, seed: int = 0, dim: int = 8, frames_per_word: int = 3):
        self._seed = seed
        self.dim = dim
        self.frames_per_word = frames_per_word

    def _word_row(self, word: str) -> np.ndarray:
        digest = hashlib.sha256(f"{self._seed}:{word}".encode()).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        return rng.normal(0, 1.0, self.dim)

    def synthesize_features(self, text: str) -> tuple[np.ndarray, str]:
        words = text.split() or ["silence"]
        rows = [self._word_row(w) for w in words for _ in range(self.frames_per_word)]
        voice = "female" if hashlib.sha256(text.encode()).digest()[0] % 2 else "male"
        return np.stack(rows), voice


class HttpCompletionClient:
    """Thin urllib adapter for an HTTP completion endpoint.

    Posts {"prompt": ...} with a bearer token from `api_key_env` and expects
    {"text": ...} back. Real services are not called in tests; a transport
    callable can be injected for exercising the framing.
    """

    def __init__(self, endpoint: str, api_key_env: str = "LLM_API_KEY", transport=None):
        self.endpoint = endpoint
        self.api_key_env = api_key_env
        self._transport = transport

    def complete(self, prompt: str) -> str:
        if self._transport is not None:
            return self._transport(prompt)
        import os
        import urllib.request

        req = urllib.request.Request(
            self.endpoint,
            data=json.dumps({"prompt": prompt}).encode(),
            headers={
                "Content-Type": "application/json",
                "Authorization": f"Bearer {os.environ.get(self.api_key_env, '')}",
            },
        )
        with urllib.request.urlopen(req, timeout=60) as resp:
            return json.loads(resp.read())["text"]


class HttpRewriteClient(HttpCompletionClient):
    name = "llm-rewrite"

    def rewrite_instruction(self, instruction: str) -> str:
        return parse_model_json(self.complete(render_rewrite_prompt(instruction)), "question")


class HttpResponseClient(HttpCompletionClient):
    name = "llm-response"

    def respond(self, instruction: str) -> str:
        return parse_model_json(self.complete(render_response_prompt(instruction)), "response")


# ------------------------------------------------------------- dataset build


def build_dataset(
    instructions,
    clients: DatasetClients,
    out_dir,
    codebook: Codebook,
    source_name: str = "unknown",
    retries: int = 1,
    max_workers: int = 1,
) -> dict:
    """Run rewrite -> respond -> synthesize -> quantize per instruction.

    Appends TripletRecords to out_dir/triplets.jsonl. Client failures retry,
    then skip with a log line; sink failures abort. Reruns are idempotent
    via the manifest's processed-id set.
    """
    out_dir = Path(out_dir)
    features_dir = out_dir / "features"
    features_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = out_dir / "manifest.json"
    sink_path = out_dir / "triplets.jsonl"

    done_ids: set[str] = set()
    if manifest_path.exists():
        done_ids = set(json.loads(manifest_path.read_text()).get("ids", []))

    instructions = [i for i in instructions if i and i.strip()]
    skipped = 0

    def process(instruction: str):
        rid = record_id(instruction)
        if rid in done_ids:
            return None
        last_err = None
        for _attempt in range(retries + 1):
            try:
                question = clients.rewrite.rewrite_instruction(instruction)
                response = clients.respond.respond(question)
                instr_feats, voice = clients.tts.synthesize_features(question)
                resp_feats, _resp_voice = clients.tts.synthesize_features(response)
                units = merge_consecutive(quantize(resp_feats, codebook))
                validate_unit_sequence(units, codebook.k)
                feats_rel = f"features/{rid}.fmat"
                return TripletRecord(
                    id=rid,
                    instruction_text=question,
                    instruction_features_path=feats_rel,
                    response_text=response,
                    response_units=units,
                    provenance={
                        "source_dataset": source_name,
                        "rewrite_model": clients.rewrite.name,
                        "tts_voice": voice,
                    },
                    features=instr_feats,
                )
            except Exception as exc:  # client fault: retry, then skip
                last_err = exc
        log.warning("skipping instruction %s: %s", rid, last_err)
        return last_err

    if max_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            outcomes = list(pool.map(process, instructions))
    else:
        outcomes = [process(i) for i in instructions]

    new_records = []
    with open(sink_path, "a") as sink:  # single appender
        for outcome in outcomes:
            if outcome is None:
                continue
            if isinstance(outcome, Exception):
                skipped += 1
                continue
            write_fmat(out_dir / outcome.instruction_features_path, outcome.features)
            sink.write(json.dumps(outcome.to_json(), sort_keys=True) + "\n")
            sink.flush()
            done_ids.add(outcome.id)
            new_records.append(outcome)
            _write_manifest(manifest_path, done_ids, skipped, codebook)
    _write_manifest(manifest_path, done_ids, skipped, codebook)
    return {
        "count": len(done_ids),
        "new_records": len(new_records),
        "skipped": skipped,
        "manifest": str(manifest_path),
    }


def _write_manifest(path, done_ids, skipped, codebook):
    ids = sorted(done_ids)
    manifest = {
        "count": len(ids),
        "ids": ids,
        "content_hash": hashlib.sha256("".join(ids).encode()).hexdigest(),
        "skipped": skipped,
        "config": {"codebook_k": codebook.k, "codebook_dim": codebook.dim},
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------ source loaders


def load_alpaca(path, limit: int | None = None) -> list[str]:
    """Instructions from the alpaca-style JSON list of {instruction, input, output}."""
    entries = json.loads(Path(path).read_text())
    out = []
    for e in entries[: limit if limit else None]:
        instruction = e["instruction"].strip()
        extra = e.get("input", "").strip()
        out.append(f"{instruction}\n{extra}" if extra else instruction)
    return out


def load_ultrachat(path, limit: int | None = None) -> list[str]:
    """First-round instruction from ultrachat-style JSONL {"data": [turns...]}."""
    out = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("data"):
            out.append(str(rec["data"][0]).strip())
        if limit and len(out) >= limit:
            break
    return out


# -------------------------------------------------------------- toy datasets


WORDLIST = [
    "time", "water", "light", "sound", "earth", "music", "green", "stone",
    "river", "cloud", "paper", "glass", "north", "seven", "house", "round",
    "small", "quick", "plain", "sharp", "early", "field", "night", "dream",
]


@dataclass
class ToyLexicon:
    """Deterministic word -> unit pattern and word -> raw-feature-row maps."""

    words: list[str]
    patterns: dict[str, list[int]]
    raw_rows: dict[str, np.ndarray]
    unit_vocab_k: int
    raw_dim: int

    def units_for_text(self, text: str) -> list[int]:
        seq: list[int] = []
        for w in text.split():
            seq.extend(self.patterns[w])
        return merge_consecutive(seq)

    def raw_features_for_text(self, text: str, frames_per_word: int) -> np.ndarray:
        rows = [self.raw_rows[w] for w in text.split() for _ in range(frames_per_word)]
        return np.stack(rows)

    def decode_units(self, units) -> list[str] | None:
        """Exact mock transcriber: invert concatenation-with-merge, or None."""
        units = [int(u) for u in units]
        from functools import lru_cache

        words = self.words
        patterns = self.patterns

        @lru_cache(maxsize=None)
        def solve(i: int) -> tuple[str, ...] | None:
            if i == len(units):
                return ()
            for w in words:
                p = patterns[w]
                cand = None
                if units[i : i + len(p)] == p:
                    cand = solve(i + len(p))
                elif (
                    len(p) >= 2  # a merged 1-unit pattern would consume nothing
                    and i > 0
                    and units[i - 1] == p[0]
                    and units[i : i + len(p) - 1] == p[1:]
                ):
                    cand = solve(i + len(p) - 1)  # first unit merged into predecessor
                if cand is not None:
                    return (w, *cand)
            return None

        result = solve(0)
        return list(result) if result is not None else None


INTRO_WORD = "so"


def toy_lexicon(seed: int, vocab: int | list[str], unit_vocab_k: int, raw_dim: int = 8) -> ToyLexicon:
    """Deterministic patterns built for exact decodability and CTC learnability.

    The first word is a filler that opens every synthetic response and owns
    the reserved top unit as a single-unit pattern; every other word gets a
    distinct (low-half, high-half) unit pair. Consequences: patterns never
    merge across word boundaries, unit sequences invert to words exactly,
    and the first upsampled block only ever has to emit one unit. That last
    point matters: causal attention over a block of identical rows yields
    identical outputs for every position (attention returns the shared
    value vector no matter the weights), so the first text token's block is
    architecturally limited to one distinct greedy unit.
    """
    if isinstance(vocab, int):
        if vocab > len(WORDLIST):
            content = WORDLIST + [f"word{i:02d}" for i in range(vocab - len(WORDLIST))]
        else:
            content = WORDLIST[:vocab]
        words = [INTRO_WORD] + content[: max(0, vocab - 1)]
    else:
        words = list(vocab)
    reserved = unit_vocab_k - 1
    lows = unit_vocab_k // 2
    if lows * (reserved - lows) < len(words) - 1 or unit_vocab_k < 4:
        raise ValueError(
            f"unit vocab {unit_vocab_k} too small for {len(words)} distinct word patterns"
        )
    rng = np.random.default_rng(seed)
    patterns: dict[str, list[int]] = {words[0]: [reserved]}
    used: set[tuple[int, int]] = set()
    for w in words[1:]:
        while True:
            a = int(rng.integers(0, lows))
            b = int(rng.integers(lows, reserved))
            if (a, b) not in used:
                used.add((a, b))
                patterns[w] = [a, b]
                break
    raw_rows = {w: rng.normal(0, 1.0, raw_dim) for w in words}
    return ToyLexicon(
        words=words,
        patterns=patterns,
        raw_rows=raw_rows,
        unit_vocab_k=unit_vocab_k,
        raw_dim=raw_dim,
    )


def synth_toy_dataset(
    seed: int,
    n: int,
    vocab: int | list[str],
    unit_vocab_k: int,
    frames_per_word: int = 2,
    min_words: int = 2,
    max_words: int = 6,
    raw_dim: int = 8,
    out_dir=None,
) -> tuple[list[TripletRecord], ToyLexicon]:
    """Deterministic echo-task triplets: features spell out the response words."""
    lex = toy_lexicon(seed, vocab, unit_vocab_k, raw_dim=raw_dim)
    rng = np.random.default_rng(seed + 1)
    records: list[TripletRecord] = []
    for i in range(n):
        m = int(rng.integers(min_words, max_words + 1))
        words = [lex.words[0]]  # filler opener; see toy_lexicon
        while len(words) < m + 1:  # consecutive words distinct, as in natural text
            w = lex.words[int(rng.integers(1, len(lex.words)))]
            if w != words[-1]:
                words.append(w)
        text = " ".join(words)
        feats = lex.raw_features_for_text(text, frames_per_word)
        rid = f"toy-{seed}-{i:05d}"
        records.append(
            TripletRecord(
                id=rid,
                instruction_text=text,
                instruction_features_path=f"features/{rid}.fmat",
                response_text=text,
                response_units=lex.units_for_text(text),
                provenance={"source_dataset": "synthetic", "rewrite_model": "none",
                            "tts_voice": "none"},
                features=feats,
            )
        )
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "features").mkdir(parents=True, exist_ok=True)
        for r in records:
            write_fmat(out_dir / r.instruction_features_path, r.features)
        save_records_jsonl(records, out_dir / "triplets.jsonl")
    return records, lex
