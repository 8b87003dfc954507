"""Text-response generation behind one interface.

Two token sources exist: a toy trained transformer LM (word-level tokenizer
with byte fallback, greedy decoding) and a scripted replay source for
deterministic pipeline and timing tests. Both yield, per step, the token id
plus the hidden-state row the unit decoder consumes.

The hidden row handed out is the state actually fed to the LM head (after
the final norm) at the position that predicts the emitted token.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tz
from .nn import ConfigError, TransformerCache, TransformerConfig, init_transformer_params
from .tensor import Tensor


class StreamExhausted(RuntimeError):
    """generate_next called after EOS was already emitted."""


# Prompt template: system header, user header, speech slot, closing
# instruction, assistant header.
PROMPT_PREFIX = (
    "<|begin_of_text|><|start_header_id|>system<|end_header_id|>\n"
    "\n"
    "You are a helpful language and speech assistant. You are able to\n"
    "understand the speech content that the user provides, and assist the\n"
    "user with a variety of tasks using natural language.<|eot_id|>\n"
    "<|start_header_id|>user<|end_header_id|>\n"
    "\n"
)
SPEECH_SLOT = "<speech>"
PROMPT_SUFFIX = (
    "\n"
    "Please answer the questions in the user's input speech.<|eot_id|>\n"
    "<|start_header_id|>assistant<|end_header_id|>\n"
)


def render_prompt_text() -> str:
    """Template with the literal slot marker still in place."""
    return PROMPT_PREFIX + SPEECH_SLOT + PROMPT_SUFFIX


class Tokenizer:
    """Whitespace words with byte fallback; ids 0/1 reserved for BOS/EOS.

    Bytes occupy ids 2..257; known words follow in first-seen order. A word
    is either a single id or a run of byte ids, so detokenize(tokenize(s))
    round-trips any single-space-separated text.
    """

    BOS = 0
    EOS = 1
    _BYTE0 = 2
    _WORD0 = 258

    def __init__(self, words=()):
        self._words: list[str] = []
        self._index: dict[str, int] = {}
        for w in words:
            self.add_word(w)

    @classmethod
    def from_corpus(cls, texts) -> "Tokenizer":
        tok = cls()
        for text in texts:
            for w in text.split():
                tok.add_word(w)
        return tok

    def add_word(self, word: str) -> int:
        if " " in word or not word:
            raise ConfigError(f"not a single word: {word!r}")
        if word not in self._index:
            self._index[word] = self._WORD0 + len(self._words)
            self._words.append(word)
        return self._index[word]

    @property
    def vocab_size(self) -> int:
        return self._WORD0 + len(self._words)

    def tokenize(self, text: str) -> list[int]:
        ids: list[int] = []
        prev_fallback = False
        for w in text.split():
            if w in self._index:
                ids.append(self._index[w])
                prev_fallback = False
            else:
                if prev_fallback:  # keep the boundary between adjacent byte runs
                    ids.append(self._BYTE0 + ord(" "))
                ids.extend(self._BYTE0 + b for b in w.encode("utf-8"))
                prev_fallback = True
        return ids

    def detokenize(self, ids) -> str:
        words: list[str] = []
        byte_run: list[int] = []

        def flush():
            if byte_run:
                words.append(bytes(byte_run).decode("utf-8", errors="replace"))
                byte_run.clear()

        for i in ids:
            i = int(i)
            if self._BYTE0 <= i < self._WORD0:
                byte_run.append(i - self._BYTE0)
            else:
                flush()
                if i >= self._WORD0:
                    words.append(self._words[i - self._WORD0])
                # BOS/EOS render as nothing
        flush()
        return " ".join(words)


@dataclass
class TextResponse:
    tokens: list[int]
    text: str
    eos_seen: bool

    def __post_init__(self):
        if self.eos_seen and (not self.tokens or self.tokens[-1] != Tokenizer.EOS):
            raise ConfigError("eos_seen implies the last token is EOS")


# ---------------------------------------------------------------- toy model


class ToyLM:
    """Word-level transformer LM sharing the decoder's block architecture."""

    def __init__(
        self,
        tokenizer: Tokenizer,
        cfg: TransformerConfig,
        params: dict | None = None,
        seed: int = 0,
        max_tokens: int = 64,
    ):
        self.tokenizer = tokenizer
        self.cfg = cfg
        self.max_tokens = max_tokens
        for w in (PROMPT_PREFIX + " " + PROMPT_SUFFIX).split():
            tokenizer.add_word(w)
        if params is None:
            rng = np.random.default_rng(seed)
            params = init_transformer_params(cfg, rng)
            params["embed.table"] = Tensor(
                rng.normal(0, 0.02, (tokenizer.vocab_size, cfg.model_dim)), requires_grad=True
            )
            params["final_norm.gamma"] = Tensor(np.ones(cfg.model_dim), requires_grad=True)
            params["lm_head.weight"] = Tensor(
                rng.normal(0, 0.02, (tokenizer.vocab_size, cfg.model_dim)), requires_grad=True
            )
        self.params = params
        self._prefix_ids = tokenizer.tokenize(PROMPT_PREFIX)
        self._suffix_ids = tokenizer.tokenize(PROMPT_SUFFIX)

    def trainable_params(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def assemble_prompt(self, speech_rows: np.ndarray | Tensor | None) -> Tensor:
        """Template token embeddings with the adapted rows spliced at the slot."""
        table = self.params["embed.table"]
        parts = [tz.embedding_lookup(table, self._prefix_ids)]
        if speech_rows is not None:
            s = speech_rows if isinstance(speech_rows, Tensor) else Tensor(speech_rows)
            if s.data.ndim != 2 or s.data.shape[1] != self.cfg.model_dim:
                raise ConfigError(
                    f"speech rows must be (n, {self.cfg.model_dim}), got {s.data.shape}"
                )
            if s.data.shape[0]:
                parts.append(s)
        parts.append(tz.embedding_lookup(table, self._suffix_ids))
        return tz.concat_rows(parts)

    def response_loss(self, speech_rows, response_ids) -> Tensor:
        """Teacher-forced mean cross-entropy over the response (EOS included)."""
        response_ids = [int(t) for t in response_ids]
        if not response_ids or response_ids[-1] != Tokenizer.EOS:
            response_ids = response_ids + [Tokenizer.EOS]
        prompt = self.assemble_prompt(speech_rows)
        gold_in = tz.embedding_lookup(self.params["embed.table"], response_ids[:-1])
        x = tz.concat_rows([prompt, gold_in]) if response_ids[:-1] else prompt
        h = self._forward(x)
        n_prompt = prompt.data.shape[0]
        logits = tz.matmul(
            tz.slice_rows(h, n_prompt - 1, x.data.shape[0]),
            tz.transpose(self.params["lm_head.weight"]),
        )
        return tz.cross_entropy(logits, response_ids)

    def _forward(self, x: Tensor) -> Tensor:
        from .nn import transformer_forward

        h = transformer_forward(x, self.cfg, self.params)
        return tz.rms_norm(h, self.params["final_norm.gamma"])

    def start_generation(self, speech_rows) -> "GenerationState":
        return GenerationState(self, speech_rows)

    def hidden_states_for(self, speech_rows, response_ids) -> np.ndarray:
        """Teacher-forced hidden rows c_1..c_M' (the states that predict each
        response token, EOS included), via the full forward pass."""
        response_ids = [int(t) for t in response_ids]
        if not response_ids or response_ids[-1] != Tokenizer.EOS:
            response_ids = response_ids + [Tokenizer.EOS]
        prompt = self.assemble_prompt(speech_rows)
        gold_in = tz.embedding_lookup(self.params["embed.table"], response_ids[:-1])
        x = tz.concat_rows([prompt, gold_in]) if response_ids[:-1] else prompt
        h = self._forward(x)
        return h.data[prompt.data.shape[0] - 1 :]


class GenerationState:
    """Greedy autoregressive generation over a prefilled KV cache."""

    def __init__(self, lm: ToyLM, speech_rows):
        self._lm = lm
        self._cache = TransformerCache(lm.cfg, lm.params)
        prompt = lm.assemble_prompt(speech_rows)
        h = self._cache.extend(prompt.data)
        self._next_hidden = self._norm(h[-1])
        self._emitted = 0
        self.exhausted = False

    def _norm(self, row: np.ndarray) -> np.ndarray:
        g = self._lm.params["final_norm.gamma"].data
        return tz.np_rms_norm(row[None, :], g)[0]

    def next(self) -> tuple[int, np.ndarray]:
        """Emit (token id, the hidden row that produced it)."""
        if self.exhausted:
            raise StreamExhausted("generation already emitted EOS")
        hidden = self._next_hidden
        logits = self._lm.params["lm_head.weight"].data @ hidden
        token = int(np.argmax(logits))
        self._emitted += 1
        if self._emitted >= self._lm.max_tokens:
            token = Tokenizer.EOS  # hard cap so untrained models cannot loop
        if token == Tokenizer.EOS:
            self.exhausted = True
        else:
            emb = self._lm.params["embed.table"].data[token]
            h = self._cache.extend(emb[None, :])
            self._next_hidden = self._norm(h[-1])
        return token, hidden


# ------------------------------------------------------------ token sources


@dataclass
class ScriptedSource:
    """Replays a fixed token/hidden stream, optionally with per-token delays."""

    tokens: list[int]
    hidden_rows: np.ndarray
    delays_ms: list[float] | None = None

    def __post_init__(self):
        self.tokens = [int(t) for t in self.tokens]
        self.hidden_rows = np.asarray(self.hidden_rows, dtype=np.float64)
        if not self.tokens or self.tokens[-1] != Tokenizer.EOS:
            raise ConfigError("scripted token stream must end with EOS")
        if len(self.hidden_rows) != len(self.tokens):
            raise ConfigError(
                f"{len(self.tokens)} tokens but {len(self.hidden_rows)} hidden rows"
            )
        if self.delays_ms is not None and len(self.delays_ms) != len(self.tokens):
            raise ConfigError("delays_ms length must match tokens")

    def start(self) -> "ScriptedStream":
        return ScriptedStream(self)


class ScriptedStream:
    def __init__(self, src: ScriptedSource):
        self._src = src
        self._i = 0

    def next(self) -> tuple[int, np.ndarray, float | None]:
        src = self._src
        if self._i >= len(src.tokens):
            raise StreamExhausted("scripted stream exhausted")
        i = self._i
        self._i += 1
        delay = None if src.delays_ms is None else float(src.delays_ms[i])
        return src.tokens[i], src.hidden_rows[i], delay


def token_hidden_map(vocab_size: int, dim: int, seed: int = 0) -> np.ndarray:
    """Deterministic per-token hidden rows: the idealized final-layer states
    a perfectly trained LM would hand the unit decoder."""
    rng = np.random.default_rng(seed)
    return rng.normal(0, 1.0, (vocab_size, dim))


def load_scripted_jsonl(path, dim: int, tokenizer: Tokenizer | None = None, hidden_seed: int = 0):
    """Scripted sources from JSONL lines {"tokens": [...], "delays_ms": [...]}.

    Tokens may be ids or word strings (words need a tokenizer; unknown words
    are added to it). Hidden rows are derived deterministically per token id
    unless the line carries explicit "hidden_rows".
    """
    sources = []
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line:
            continue
        rec = json.loads(line)
        raw = rec["tokens"]
        ids: list[int] = []
        for t in raw:
            if isinstance(t, str):
                if tokenizer is None:
                    raise ConfigError("word tokens in script require a tokenizer")
                ids.append(
                    Tokenizer.EOS if t == "<eos>" else tokenizer.add_word(t)
                )
            else:
                ids.append(int(t))
        if not ids or ids[-1] != Tokenizer.EOS:
            ids.append(Tokenizer.EOS)
        if "hidden_rows" in rec:
            hidden = np.asarray(rec["hidden_rows"], dtype=np.float64)
        else:
            table = token_hidden_map(max(ids) + 1, dim, seed=hidden_seed)
            hidden = table[ids]
        delays = rec.get("delays_ms")
        if delays is not None:
            delays = [float(d) for d in delays]
            if len(delays) < len(ids):  # EOS appended above gets a zero-cost step
                delays = delays + [0.0] * (len(ids) - len(delays))
        sources.append(
            ScriptedSource(tokens=ids, hidden_rows=hidden, delays_ms=delays)
        )
    return sources
