"""Two-stage training at toy scale.

Stage 1 trains the speech adaptor and the LM with teacher-forced
cross-entropy while the encoder stays frozen. Stage 2 freezes encoder,
adaptor and LM, and trains only the unit decoder with the CTC objective
over (hidden states, response units) pairs. Freeze contracts are enforced
by parameter hashing in the tests, not by the loops themselves.

Hidden states for stage 2 come either from a teacher-forced forward pass of
the frozen stage-1 model (regenerated per batch, never cached to disk) or
from a deterministic per-token map standing in for a converged LM.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tz
from .ctc import InfeasibleTargetError, ctc_loss, min_frames
from .data import TripletRecord
from .llm import Tokenizer
from .system import SpeechChatModel
from .tensor import Adam, Tensor

STAGE1_PEAK_LR = 2e-5
STAGE2_PEAK_LR = 2e-4


class TrainingDiverged(RuntimeError):
    """Loss went non-finite; parameters were restored to the last good epoch."""

    def __init__(self, message: str, last_good_step: int):
        super().__init__(message)
        self.last_good_step = last_good_step


class InfeasibleDatasetError(ValueError):
    def __init__(self, record_ids):
        super().__init__(
            "records whose unit targets cannot fit their decoder frames: "
            + ", ".join(record_ids)
        )
        self.record_ids = list(record_ids)


@dataclass(frozen=True)
class TrainConfig:
    stage: int
    batch_size: int = 32
    epochs: int = 3
    peak_lr: float | None = None  # stage defaults below
    warmup_fraction: float = 0.03
    seed: int = 0
    max_grad_norm: float | None = None  # global-norm clip, off by default

    def __post_init__(self):
        if self.stage not in (1, 2):
            raise ValueError("stage must be 1 or 2")
        if not 0 < self.warmup_fraction < 1:
            raise ValueError("warmup_fraction must be in (0, 1)")
        if self.peak_lr is not None and self.peak_lr < 0:
            raise ValueError("peak_lr must be >= 0 (zero only for diagnostics)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be >= 1")
        if self.max_grad_norm is not None and self.max_grad_norm <= 0:
            raise ValueError("max_grad_norm must be positive")

    @property
    def resolved_peak_lr(self) -> float:
        if self.peak_lr is not None:
            return self.peak_lr
        return STAGE1_PEAK_LR if self.stage == 1 else STAGE2_PEAK_LR


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to the peak over ceil(warmup_fraction * total) steps,
    then cosine decay to zero at the final step."""
    if not 0 <= step < total_steps:
        raise ValueError(f"step {step} outside 0..{total_steps - 1}")
    peak = cfg.resolved_peak_lr
    warmup = math.ceil(cfg.warmup_fraction * total_steps)
    if step < warmup:
        return peak * step / warmup
    span = max(1, total_steps - 1 - warmup)
    progress = (step - warmup) / span
    return peak * 0.5 * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainResult:
    loss_curve: list[tuple[int, float, float]]  # (step, loss, lr)
    initial_loss: float
    final_loss: float
    epoch_means: list[float] = field(default_factory=list)


def _batches(n: int, batch_size: int, epochs: int, seed: int):
    rng = np.random.default_rng(seed)
    for _ in range(epochs):
        order = rng.permutation(n)
        for lo in range(0, n, batch_size):
            yield order[lo : lo + batch_size]


def _mean_loss(losses: list[Tensor]) -> Tensor:
    total = losses[0]
    for item in losses[1:]:
        total = tz.add(total, item)
    return tz.mul(total, 1.0 / len(losses))


def _clip_grad_norm(params: list[Tensor], max_norm: float) -> None:
    total = math.sqrt(sum(float((p.grad**2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        scale = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= scale


def _snapshot(params: list[Tensor]) -> list[np.ndarray]:
    return [p.data.copy() for p in params]


def _restore(params: list[Tensor], snap: list[np.ndarray]) -> None:
    for p, s in zip(params, snap):
        p.data[:] = s


def _run_loop(records, batch_loss, params, cfg: TrainConfig) -> TrainResult:
    n = len(records)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    opt = Adam(params, lr=cfg.resolved_peak_lr)
    curve: list[tuple[int, float, float]] = []
    epoch_losses: list[list[float]] = [[] for _ in range(cfg.epochs)]
    last_good = _snapshot(params)
    last_good_step = -1
    step = 0
    for batch in _batches(n, cfg.batch_size, cfg.epochs, cfg.seed):
        loss = batch_loss([records[i] for i in batch])
        value = float(loss.data)
        if not math.isfinite(value):
            _restore(params, last_good)
            raise TrainingDiverged(f"non-finite loss at step {step}", last_good_step)
        # this loss evaluation verifies the params entering the step
        last_good = _snapshot(params)
        last_good_step = step - 1
        lr = lr_at(step, total_steps, cfg)
        opt.zero_grad()
        loss.backward()
        if cfg.max_grad_norm is not None:
            _clip_grad_norm(params, cfg.max_grad_norm)
        opt.lr = lr
        opt.step()
        curve.append((step, value, lr))
        epoch_losses[step // steps_per_epoch].append(value)
        step += 1
    return TrainResult(
        loss_curve=curve,
        initial_loss=curve[0][1],
        final_loss=curve[-1][1],
        epoch_means=[float(np.mean(e)) for e in epoch_losses if e],
    )


# -------------------------------------------------------------------- stage 1


def train_stage1(records: list[TripletRecord], model: SpeechChatModel, cfg: TrainConfig) -> TrainResult:
    """Adaptor + LM cross-entropy on (speech features, text response) pairs."""
    if cfg.stage != 1:
        raise ValueError("stage-1 trainer needs a stage=1 config")
    trainable = [model.adaptor_params[k] for k in sorted(model.adaptor_params)]
    trainable += model.lm.trainable_params()

    token_cache = {
        r.id: model.lm.tokenizer.tokenize(r.response_text) for r in records
    }

    def batch_loss(batch):
        losses = []
        for r in batch:
            s = model.adapt_features_tensor(r.load_features())
            losses.append(model.lm.response_loss(s, token_cache[r.id]))
        return _mean_loss(losses)

    return _run_loop(records, batch_loss, trainable, cfg)


# -------------------------------------------------------------------- stage 2


def hidden_rows_from_lm(model: SpeechChatModel, record: TripletRecord) -> np.ndarray:
    """Teacher-forced hidden states from the frozen stage-1 model."""
    s = model.adapt_features(record.load_features())
    tokens = model.lm.tokenizer.tokenize(record.response_text)
    return model.lm.hidden_states_for(s, tokens)


def hidden_rows_from_map(hidden_map: np.ndarray, tokenizer: Tokenizer, record: TripletRecord) -> np.ndarray:
    """Idealized hidden states: one fixed row per response token, EOS included."""
    tokens = tokenizer.tokenize(record.response_text) + [Tokenizer.EOS]
    return hidden_map[tokens]


def validate_stage2_records(records, hidden_provider, upsample_lambda: int) -> None:
    """Up-front admissibility: every target must fit its decoder frames."""
    bad = []
    for r in records:
        m = hidden_provider(r).shape[0]
        if min_frames(r.response_units) > upsample_lambda * m:
            bad.append(r.id)
    if bad:
        raise InfeasibleDatasetError(bad)


def train_stage2(
    records: list[TripletRecord],
    model: SpeechChatModel,
    cfg: TrainConfig,
    hidden_provider=None,
    frame_normalized: bool = True,
) -> TrainResult:
    """Decoder-only CTC training over (hidden states, response units) pairs.

    frame_normalized scales each item's loss by 1/frames so long responses
    do not dominate a batch; the per-item minimizer is unchanged. Hidden
    states are a pure function of frozen inputs, so they are computed once
    up front (equivalent to per-batch regeneration, cheaper).
    """
    if cfg.stage != 2:
        raise ValueError("stage-2 trainer needs a stage=2 config")
    if hidden_provider is None:
        hidden_provider = lambda record: hidden_rows_from_lm(model, record)

    hidden_cache = {r.id: hidden_provider(r) for r in records}
    lam = model.decoder.cfg.upsample_lambda
    validate_stage2_records(records, lambda r: hidden_cache[r.id], lam)

    def batch_loss(batch):
        losses = []
        for r in batch:
            logits = model.decoder.decode_full(hidden_cache[r.id])
            loss = ctc_loss(logits, r.response_units)
            if frame_normalized:
                loss = tz.mul(loss, 1.0 / logits.data.shape[0])
            losses.append(loss)
        return _mean_loss(losses)

    return _run_loop(records, batch_loss, model.decoder.trainable_params(), cfg)


def unit_exact_match(model: SpeechChatModel, records, hidden_provider=None) -> float:
    """Fraction of records whose greedy-decoded units equal the target exactly."""
    if hidden_provider is None:
        hidden_provider = lambda record: hidden_rows_from_lm(model, record)
    from .decoder import units_for_prefix

    hits = 0
    for r in records:
        logits = model.decoder.decode_full(hidden_provider(r)).data
        decoded = units_for_prefix(logits, model.decoder.cfg.unit_vocab_k)
        hits += decoded == list(r.response_units)
    return hits / len(records)
