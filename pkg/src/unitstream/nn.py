"""Transformer blocks (pre-RMSNorm, RoPE, SwiGLU, no attention biases),
the downsample-and-project speech adaptor, feature providers, and parameter
checkpoints.

Two forward paths exist on purpose. `transformer_forward` runs over the
whole sequence through the autodiff graph and is what training uses.
`TransformerCache.extend` is a plain-numpy incremental path with per-layer
key/value memory for streaming inference; its contract is agreement with
the full pass to 1e-9, enforced by tests. Keep the two in lockstep when
touching either.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import numpy as np

from . import tensor as tz
from .fmat import read_fmat, write_fmat
from .tensor import Tensor


class ConfigError(ValueError):
    pass


class SequenceTooLongError(ValueError):
    pass


class DownsampleError(ValueError):
    """Fewer frames than the downsampling factor: output would be empty."""


@dataclass(frozen=True)
class AdaptorConfig:
    out_dim: int
    downsample_k: int = 5
    hidden_dim: int | None = None  # defaults to out_dim

    def __post_init__(self):
        if self.downsample_k < 1:
            raise ConfigError("downsample_k must be >= 1")
        if self.out_dim < 1 or (self.hidden_dim is not None and self.hidden_dim < 1):
            raise ConfigError("adaptor dims must be positive")

    @property
    def hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim is not None else self.out_dim


@dataclass(frozen=True)
class TransformerConfig:
    layers: int
    model_dim: int
    heads: int
    ffn_dim: int
    max_seq_len: int = 2048
    causal: bool = True

    def __post_init__(self):
        if self.model_dim % self.heads != 0:
            raise ConfigError(f"model_dim {self.model_dim} not divisible by heads {self.heads}")
        if (self.model_dim // self.heads) % 2 != 0:
            raise ConfigError("head dim must be even for rotary embeddings")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads


@dataclass
class SpeechFeatures:
    frames: np.ndarray  # (N, D_enc)
    source_id: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ConfigError("SpeechFeatures needs at least one frame")


# ------------------------------------------------------------- speech adaptor


def downsample(frames: np.ndarray, k: int) -> np.ndarray:
    """Concatenate every k consecutive frames along the feature axis.

    Output row i is frames ki..k(i+1)-1 joined; the trailing N mod k frames
    are dropped.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n, d = frames.shape
    if n < k:
        raise DownsampleError(f"{n} frames cannot be downsampled by {k}")
    m = n // k
    return frames[: m * k].reshape(m, k * d)


def init_adaptor_params(cfg: AdaptorConfig, enc_dim: int, rng: np.random.Generator):
    in_dim = cfg.downsample_k * enc_dim
    scale = 0.02
    return {
        "adaptor.w1": Tensor(rng.normal(0, scale, (in_dim, cfg.hidden)), requires_grad=True),
        "adaptor.b1": Tensor(np.zeros(cfg.hidden), requires_grad=True),
        "adaptor.w2": Tensor(rng.normal(0, scale, (cfg.hidden, cfg.out_dim)), requires_grad=True),
        "adaptor.b2": Tensor(np.zeros(cfg.out_dim), requires_grad=True),
    }


def adapt(features: np.ndarray | Tensor, cfg: AdaptorConfig, params) -> Tensor:
    """Linear(ReLU(Linear(DownSample(features)))) -> rows in the LM width."""
    if isinstance(features, Tensor):
        x = features
        if x.data.shape[0] < cfg.downsample_k:
            raise DownsampleError("too few frames for the downsampling factor")
        n = x.data.shape[0] // cfg.downsample_k
        x = tz.slice_rows(x, 0, n * cfg.downsample_k)
        # Row-major reshape equals per-row concatenation of k frames.
        x = _reshape_rows(x, n, cfg.downsample_k * features.data.shape[1])
    else:
        x = Tensor(downsample(features, cfg.downsample_k))
    h = tz.relu(tz.linear(x, params["adaptor.w1"], params["adaptor.b1"]))
    return tz.linear(h, params["adaptor.w2"], params["adaptor.b2"])


def _reshape_rows(x: Tensor, rows: int, cols: int) -> Tensor:
    data = x.data.reshape(rows, cols)
    return tz._from_op(data, (x,), lambda g: (g.reshape(x.data.shape),))


# --------------------------------------------------------- transformer stack


def init_transformer_params(
    cfg: TransformerConfig, rng: np.random.Generator, prefix: str = "", scale: float = 0.02
) -> dict[str, Tensor]:
    d, f = cfg.model_dim, cfg.ffn_dim
    params: dict[str, Tensor] = {}
    for i in range(cfg.layers):
        base = f"{prefix}layers.{i}"
        params[f"{base}.attn_norm.gamma"] = Tensor(np.ones(d), requires_grad=True)
        for name in ("wq", "wk", "wv", "wo"):
            params[f"{base}.attn.{name}"] = Tensor(
                rng.normal(0, scale, (d, d)), requires_grad=True
            )
        params[f"{base}.ffn_norm.gamma"] = Tensor(np.ones(d), requires_grad=True)
        params[f"{base}.ffn.w_gate"] = Tensor(rng.normal(0, scale, (d, f)), requires_grad=True)
        params[f"{base}.ffn.w_up"] = Tensor(rng.normal(0, scale, (d, f)), requires_grad=True)
        params[f"{base}.ffn.w_down"] = Tensor(rng.normal(0, scale, (f, d)), requires_grad=True)
    return params


def _causal_mask(t: int) -> Tensor:
    return Tensor(np.triu(np.full((t, t), -np.inf), k=1))


def _attention(a: Tensor, cfg: TransformerConfig, p: dict, base: str) -> Tensor:
    t = a.data.shape[0]
    q = tz.matmul(a, p[f"{base}.attn.wq"])
    k = tz.matmul(a, p[f"{base}.attn.wk"])
    v = tz.matmul(a, p[f"{base}.attn.wv"])
    scale = 1.0 / np.sqrt(cfg.head_dim)
    mask = _causal_mask(t) if cfg.causal else None
    heads = []
    for h in range(cfg.heads):
        lo, hi = h * cfg.head_dim, (h + 1) * cfg.head_dim
        qh = tz.rope(tz.slice_cols(q, lo, hi))
        kh = tz.rope(tz.slice_cols(k, lo, hi))
        vh = tz.slice_cols(v, lo, hi)
        scores = tz.mul(tz.matmul(qh, tz.transpose(kh)), scale)
        if mask is not None:
            scores = tz.add(scores, mask)
        heads.append(tz.matmul(tz.softmax(scores, axis=-1), vh))
    return tz.matmul(tz.concat_last_dim(heads), p[f"{base}.attn.wo"])


def _swiglu(f: Tensor, p: dict, base: str) -> Tensor:
    gate = tz.silu(tz.matmul(f, p[f"{base}.ffn.w_gate"]))
    up = tz.matmul(f, p[f"{base}.ffn.w_up"])
    return tz.matmul(tz.mul(gate, up), p[f"{base}.ffn.w_down"])


def transformer_forward(
    x: np.ndarray | Tensor, cfg: TransformerConfig, params: dict, prefix: str = ""
) -> Tensor:
    """Stack of pre-norm blocks; the final norm belongs to whoever owns the head."""
    h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
    if h.data.ndim != 2 or h.data.shape[1] != cfg.model_dim:
        raise ConfigError(f"input must be (T, {cfg.model_dim}), got {h.data.shape}")
    if h.data.shape[0] > cfg.max_seq_len:
        raise SequenceTooLongError(f"{h.data.shape[0]} rows > max_seq_len {cfg.max_seq_len}")
    for i in range(cfg.layers):
        base = f"{prefix}layers.{i}"
        a = tz.rms_norm(h, params[f"{base}.attn_norm.gamma"])
        h = tz.add(h, _attention(a, cfg, params, base))
        f = tz.rms_norm(h, params[f"{base}.ffn_norm.gamma"])
        h = tz.add(h, _swiglu(f, params, base))
    return h


class TransformerCache:
    """Incremental forward with per-layer K/V memory. Inference only.

    One cache per stream; not thread-safe. Shared frozen params may back
    many caches concurrently.
    """

    def __init__(self, cfg: TransformerConfig, params: dict, prefix: str = ""):
        if not cfg.causal:
            raise ConfigError("incremental decoding requires a causal stack")
        self.cfg = cfg
        self.params = params
        self.prefix = prefix
        self.length = 0
        self._kv: list[dict[str, np.ndarray | None]] = [
            {"k": None, "v": None} for _ in range(cfg.layers)
        ]

    def extend(self, rows: np.ndarray) -> np.ndarray:
        rows = np.asarray(rows, dtype=np.float64)
        if rows.ndim == 1:
            rows = rows[None, :]
        cfg, p = self.cfg, self.params
        if rows.shape[1] != cfg.model_dim:
            raise ConfigError(f"rows must be (r, {cfg.model_dim})")
        if self.length + rows.shape[0] > cfg.max_seq_len:
            raise SequenceTooLongError("cache would exceed max_seq_len")
        offset = self.length
        r = rows.shape[0]
        scale = 1.0 / np.sqrt(cfg.head_dim)
        h = rows
        for i in range(cfg.layers):
            base = f"{self.prefix}layers.{i}"
            a = tz.np_rms_norm(h, p[f"{base}.attn_norm.gamma"].data)
            q = a @ p[f"{base}.attn.wq"].data
            k = a @ p[f"{base}.attn.wk"].data
            v = a @ p[f"{base}.attn.wv"].data
            head_outs = []
            kv = self._kv[i]
            k_rot = np.empty_like(k)
            for hd in range(cfg.heads):
                lo, hi = hd * cfg.head_dim, (hd + 1) * cfg.head_dim
                k_rot[:, lo:hi] = tz.np_rope(k[:, lo:hi], offset=offset)
            kv["k"] = k_rot if kv["k"] is None else np.concatenate([kv["k"], k_rot])
            kv["v"] = v if kv["v"] is None else np.concatenate([kv["v"], v])
            for hd in range(cfg.heads):
                lo, hi = hd * cfg.head_dim, (hd + 1) * cfg.head_dim
                qh = tz.np_rope(q[:, lo:hi], offset=offset)
                scores = (qh @ kv["k"][:, lo:hi].T) * scale  # (r, offset+r)
                for j in range(r):  # causal within the appended block
                    scores[j, offset + j + 1 :] = -np.inf
                head_outs.append(tz.np_softmax(scores, axis=1) @ kv["v"][:, lo:hi])
            h = h + np.concatenate(head_outs, axis=1) @ p[f"{base}.attn.wo"].data
            f = tz.np_rms_norm(h, p[f"{base}.ffn_norm.gamma"].data)
            ff = tz.np_silu(f @ p[f"{base}.ffn.w_gate"].data) * (f @ p[f"{base}.ffn.w_up"].data)
            h = h + ff @ p[f"{base}.ffn.w_down"].data
        self.length += r
        return h


# ----------------------------------------------------------- feature sources


class FeatureProvider(Protocol):
    """Stand-in for the frozen speech encoder: source material in, features out."""

    def provide(self, source) -> np.ndarray: ...


class FmatFeatureProvider:
    """Features were precomputed; `source` is a path relative to root."""

    def __init__(self, root="."):
        self.root = Path(root)

    def provide(self, source) -> np.ndarray:
        return read_fmat(self.root / source)


class ToyEncoder:
    """Fixed seeded random projection from raw frames to encoder features."""

    def __init__(self, seed: int, in_dim: int, out_dim: int):
        rng = np.random.default_rng(seed)
        self.matrix = rng.normal(0, 1.0 / np.sqrt(in_dim), (in_dim, out_dim))

    def provide(self, source) -> np.ndarray:
        source = np.asarray(source, dtype=np.float64)
        if source.ndim != 2 or source.shape[1] != self.matrix.shape[0]:
            raise ConfigError(
                f"raw frames must be (N, {self.matrix.shape[0]}), got {source.shape}"
            )
        return source @ self.matrix

    def state_hash(self) -> str:
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()


# ------------------------------------------------------------- checkpointing


def params_hash(params: dict[str, Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        data = params[name].data
        h.update(name.encode())
        h.update(str(data.shape).encode())
        h.update(np.ascontiguousarray(data).tobytes())
    return h.hexdigest()


def save_checkpoint(directory, params: dict[str, Tensor], config: dict | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    shapes = {}
    for name, p in params.items():
        mat = p.data if p.data.ndim == 2 else p.data.reshape(1, -1)
        write_fmat(directory / f"{name}.fmat", mat)
        shapes[name] = list(p.data.shape)
    manifest = {"params": shapes, "config": config or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(directory) -> tuple[dict[str, Tensor], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    params: dict[str, Tensor] = {}
    for name, shape in manifest["params"].items():
        mat = read_fmat(directory / f"{name}.fmat")
        params[name] = Tensor(mat.reshape(shape), requires_grad=True)
    return params, manifest["config"]
