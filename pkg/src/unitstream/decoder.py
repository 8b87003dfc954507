"""Streaming non-autoregressive unit decoder.

Each LM hidden state is upsampled into a block of `upsample_lambda`
positions, the blocks run through causal transformer layers, and an affine
head over K+1 classes (blank last) produces per-position unit logits. The
alignment for token i lives in rows lambda*(i-1)..lambda*i-1 and, because
attention is causal, depends only on hidden states up to i.

Upsampled row i (1-indexed) copies input row ceil(i/lambda). The source
formulation floors instead, which maps i=1 to a nonexistent row 0 under
1-indexing; repeating each state lambda times is the evident intent.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tz
from .ctc import best_path, collapse
from .nn import (
    SequenceTooLongError,
    TransformerCache,
    TransformerConfig,
    init_transformer_params,
    transformer_forward,
)
from .tensor import Tensor


class StateError(ValueError):
    """Decoder session used with mismatched parameters."""


@dataclass(frozen=True)
class DecoderConfig:
    unit_vocab_k: int
    transformer: TransformerConfig
    upsample_lambda: int = 25

    def __post_init__(self):
        if self.upsample_lambda < 1:
            raise ValueError("upsample_lambda must be >= 1")
        if not self.transformer.causal:
            raise ValueError("the unit decoder requires causal attention")


def upsample(hidden: np.ndarray, lam: int) -> np.ndarray:
    """Repeat every hidden state lam consecutive times."""
    hidden = np.asarray(hidden, dtype=np.float64)
    return np.repeat(hidden, lam, axis=0)


def init_decoder_params(cfg: DecoderConfig, rng: np.random.Generator, scale: float = 0.02):
    d = cfg.transformer.model_dim
    params = init_transformer_params(cfg.transformer, rng, scale=scale)
    params["final_norm.gamma"] = Tensor(np.ones(d), requires_grad=True)
    params["ctc_head.weight"] = Tensor(
        rng.normal(0, scale, (cfg.unit_vocab_k + 1, d)), requires_grad=True
    )
    params["ctc_head.bias"] = Tensor(np.zeros(cfg.unit_vocab_k + 1), requires_grad=True)
    return params


class Decoder:
    # init_scale 0.05 (not the LM's 0.02): CTC training has to break the
    # within-block timing symmetry, which stalls from a too-quiet start.
    def __init__(
        self, cfg: DecoderConfig, params: dict | None = None, seed: int = 0,
        init_scale: float = 0.05,
    ):
        self.cfg = cfg
        self.params = (
            params
            if params is not None
            else init_decoder_params(cfg, np.random.default_rng(seed), scale=init_scale)
        )

    def trainable_params(self) -> list[Tensor]:
        return [self.params[k] for k in sorted(self.params)]

    def decode_full(self, hidden: np.ndarray | Tensor) -> Tensor:
        """upsample -> causal transformer -> affine CTC head, full sequence."""
        lam = self.cfg.upsample_lambda
        if isinstance(hidden, Tensor):
            m = hidden.data.shape[0]
            x = tz.repeat_rows(hidden, lam) if m else hidden
        else:
            hidden = np.asarray(hidden, dtype=np.float64)
            m = hidden.shape[0]
            x = Tensor(upsample(hidden, lam))
        if lam * m > self.cfg.transformer.max_seq_len:
            raise SequenceTooLongError(
                f"{lam * m} decoder positions exceed max_seq_len "
                f"{self.cfg.transformer.max_seq_len}"
            )
        if m == 0:
            return Tensor(np.zeros((0, self.cfg.unit_vocab_k + 1)))
        h = transformer_forward(x, self.cfg.transformer, self.params)
        h = tz.rms_norm(h, self.params["final_norm.gamma"])
        logits = tz.matmul(h, tz.transpose(self.params["ctc_head.weight"]))
        return tz.add(logits, self.params["ctc_head.bias"])

    def start_session(self) -> "DecoderSession":
        return DecoderSession(self)


class DecoderSession:
    """Single-owner incremental decoding state for one stream."""

    def __init__(self, decoder: Decoder):
        self._decoder = decoder
        self._cache = TransformerCache(decoder.cfg.transformer, decoder.params)
        self._logits: list[np.ndarray] = []

    @property
    def n_tokens(self) -> int:
        return len(self._logits)

    def extend(self, hidden_row: np.ndarray) -> np.ndarray:
        """Feed one new LM hidden state; returns its lambda new logit rows."""
        dec = self._decoder
        row = np.asarray(hidden_row, dtype=np.float64)
        if row.ndim == 1:
            row = row[None, :]
        if row.shape != (1, dec.cfg.transformer.model_dim):
            raise StateError(
                f"expected one hidden row of width {dec.cfg.transformer.model_dim}, "
                f"got {row.shape}"
            )
        block = upsample(row, dec.cfg.upsample_lambda)
        h = self._cache.extend(block)
        h = tz.np_rms_norm(h, dec.params["final_norm.gamma"].data)
        logits = h @ dec.params["ctc_head.weight"].data.T + dec.params["ctc_head.bias"].data
        self._logits.append(logits)
        return logits

    def logits(self) -> np.ndarray:
        k = self._decoder.cfg.unit_vocab_k
        if not self._logits:
            return np.zeros((0, k + 1))
        return np.concatenate(self._logits, axis=0)

    def units(self) -> list[int]:
        """Collapsed best-path units over everything decoded so far."""
        return units_for_prefix(self.logits(), self._decoder.cfg.unit_vocab_k)


def units_for_prefix(logit_rows: np.ndarray, unit_vocab_k: int) -> list[int]:
    logit_rows = np.asarray(logit_rows, dtype=np.float64)
    if logit_rows.shape[0] == 0:
        return []
    return collapse(best_path(logit_rows), blank=unit_vocab_k)
