"""Desk-scale streaming speech interaction.

A non-autoregressive CTC unit decoder rides on a (toy) language model;
chunked streaming inference dispatches unit chunks to a deterministic
vocoder while text generation continues. Includes unit quantization, a
two-stage trainer, latency metrics, and dataset-construction scaffolding,
all behind pluggable model backends.
"""

__version__ = "0.1.0"

from .ctc import best_path, brute_force_ctc, collapse, ctc_loss
from .decoder import Decoder, DecoderConfig, upsample
from .llm import ScriptedSource, Tokenizer, ToyLM
from .metrics import aggregate, cer, wer
from .nn import AdaptorConfig, TransformerConfig, adapt, downsample, transformer_forward
from .pipeline import INFINITY, StreamConfig, TimingModel, analytic_latency, run_stream
from .system import SpeechChatModel, toy_system
from .tensor import Adam, SGD, Tensor
from .units import Codebook, kmeans_fit, merge_consecutive, quantize
from .vocoder import MockVocoderConfig, Waveform, read_wav, synthesize, write_wav

__all__ = [
    "Adam",
    "AdaptorConfig",
    "Codebook",
    "Decoder",
    "DecoderConfig",
    "INFINITY",
    "MockVocoderConfig",
    "SGD",
    "ScriptedSource",
    "SpeechChatModel",
    "StreamConfig",
    "Tensor",
    "TimingModel",
    "Tokenizer",
    "ToyLM",
    "TransformerConfig",
    "Waveform",
    "adapt",
    "aggregate",
    "analytic_latency",
    "best_path",
    "brute_force_ctc",
    "cer",
    "collapse",
    "ctc_loss",
    "downsample",
    "kmeans_fit",
    "merge_consecutive",
    "quantize",
    "read_wav",
    "run_stream",
    "synthesize",
    "toy_system",
    "transformer_forward",
    "upsample",
    "wer",
    "write_wav",
]
