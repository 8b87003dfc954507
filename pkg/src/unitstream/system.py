"""Wiring: the full speech-chat model bundle and stream-backend builders."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decoder import Decoder, DecoderConfig
from .llm import ScriptedSource, Tokenizer, ToyLM
from .nn import AdaptorConfig, ToyEncoder, TransformerConfig, adapt, init_adaptor_params
from .pipeline import StreamBackend
from .tensor import Tensor
from .vocoder import MockVocoderConfig


@dataclass
class SpeechChatModel:
    """Encoder -> adaptor -> LM -> unit decoder, dimensionally agreed."""

    encoder: ToyEncoder
    adaptor_cfg: AdaptorConfig
    adaptor_params: dict[str, Tensor]
    lm: ToyLM
    decoder: Decoder

    def adapt_features(self, raw_frames: np.ndarray) -> np.ndarray:
        """Frozen-path S = adapt(encode(X)); plain arrays, no graph kept."""
        return adapt(self.encoder.provide(raw_frames), self.adaptor_cfg, self.adaptor_params).data

    def adapt_features_tensor(self, raw_frames: np.ndarray) -> Tensor:
        """Training path: same computation with gradients into the adaptor."""
        h = self.encoder.provide(raw_frames)
        return adapt(Tensor(h), self.adaptor_cfg, self.adaptor_params)


def toy_system(
    seed: int = 0,
    vocab_words=(),
    unit_vocab_k: int = 16,
    upsample_lambda: int = 4,
    model_dim: int = 64,
    heads: int = 4,
    lm_layers: int = 2,
    decoder_layers: int = 2,
    ffn_dim: int = 176,
    raw_dim: int = 8,
    enc_dim: int = 16,
    downsample_k: int = 2,
    max_seq_len: int = 2048,
) -> SpeechChatModel:
    """A dimensionally consistent desk-scale model with random parameters."""
    rng = np.random.default_rng(seed)
    tokenizer = Tokenizer(vocab_words)
    lm_cfg = TransformerConfig(
        layers=lm_layers, model_dim=model_dim, heads=heads, ffn_dim=ffn_dim,
        max_seq_len=max_seq_len, causal=True,
    )
    dec_cfg = DecoderConfig(
        unit_vocab_k=unit_vocab_k,
        transformer=TransformerConfig(
            layers=decoder_layers, model_dim=model_dim, heads=heads, ffn_dim=ffn_dim,
            max_seq_len=max_seq_len, causal=True,
        ),
        upsample_lambda=upsample_lambda,
    )
    adaptor_cfg = AdaptorConfig(out_dim=model_dim, downsample_k=downsample_k)
    return SpeechChatModel(
        encoder=ToyEncoder(seed=seed, in_dim=raw_dim, out_dim=enc_dim),
        adaptor_cfg=adaptor_cfg,
        adaptor_params=init_adaptor_params(adaptor_cfg, enc_dim, rng),
        lm=ToyLM(tokenizer, lm_cfg, seed=seed + 1),
        decoder=Decoder(dec_cfg, seed=seed + 2),
    )


def trained_backend(
    model: SpeechChatModel, vocoder_cfg: MockVocoderConfig = MockVocoderConfig()
) -> StreamBackend:
    def stream_factory(adapted):
        state = model.lm.start_generation(adapted)

        class _Stream:
            def next(self):
                token, hidden = state.next()
                return token, hidden, None

        return _Stream()

    return StreamBackend(
        token_stream_factory=stream_factory,
        decoder_session_factory=model.decoder.start_session,
        detokenize=model.lm.tokenizer.detokenize,
        prepare=lambda feats: model.adapt_features(np.asarray(feats, dtype=np.float64)),
        vocoder_cfg=vocoder_cfg,
    )


def scripted_backend(
    source: ScriptedSource,
    decoder,
    tokenizer: Tokenizer,
    vocoder_cfg: MockVocoderConfig = MockVocoderConfig(),
) -> StreamBackend:
    """Backend over a replayed token stream; decoder may be real or scripted."""
    return StreamBackend(
        token_stream_factory=lambda s: source.start(),
        decoder_session_factory=decoder.start_session,
        detokenize=tokenizer.detokenize,
        vocoder_cfg=vocoder_cfg,
    )
