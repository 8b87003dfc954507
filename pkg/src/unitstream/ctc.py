"""CTC alignment machinery: collapsing, marginal loss, gradient, decoding.

Conventions used throughout:
  - unit indices are 0..K-1 and the blank is stored at column index K, so a
    logits matrix has width K+1 and unit ids coincide with k-means cluster
    ids;
  - an alignment is a sequence over {0..K-1, blank};
  - the collapsing function first merges consecutive repeats, then deletes
    blanks, e.g. [1,1,2,eps,eps,2,3] -> [1,2,2,3].

The loss is the negative log marginal over all alignments that collapse to
the target, computed by the standard forward recursion over the
blank-interleaved target, in log space (linear space underflows once T
reaches the hundreds). The gradient comes from the forward-backward
posteriors. `brute_force_ctc` enumerates alignments outright and exists to
cross-check the recursion on small instances; it must stay independent of
the forward implementation.
"""
from __future__ import annotations

import numpy as np

from .tensor import Tensor, _from_op, np_softmax

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """Target cannot be produced from the given number of frames."""


class OracleSizeError(ValueError):
    """Brute-force enumeration would exceed its size budget."""


def collapse(alignment, blank: int) -> list[int]:
    """Merge consecutive repeats, then drop blanks. Order preserved."""
    out: list[int] = []
    prev: int | None = None
    for a in alignment:
        a = int(a)
        if a != prev:
            if a != blank:
                out.append(a)
            prev = a
    return out


def min_frames(target) -> int:
    """Frames needed to emit `target`: its length plus one per adjacent equal pair."""
    target = list(target)
    pairs = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + pairs


def _check_logits(logits: np.ndarray) -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 2:
        raise ValueError(f"logits must be (T, K+1), got shape {logits.shape}")
    return logits


def _check_target(target, n_classes: int) -> list[int]:
    target = [int(u) for u in target]
    blank = n_classes - 1
    for u in target:
        if not 0 <= u < blank:
            raise ValueError(f"target unit {u} outside 0..{blank - 1}")
    return target


def _extend_with_blanks(target: list[int], blank: int) -> list[int]:
    ext = [blank]
    for u in target:
        ext.append(u)
        ext.append(blank)
    return ext


def _shift(row: np.ndarray, by: int) -> np.ndarray:
    out = np.full_like(row, NEG_INF)
    out[by:] = row[:-by]
    return out


def ctc_forward_backward(logits: np.ndarray, target) -> tuple[float, np.ndarray]:
    """Loss and d(loss)/d(logits) for one instance.

    Returns (-log P(target | logits), gradient of that w.r.t. the raw
    logits). Blank is the last column.
    """
    logits = _check_logits(logits)
    T, n_classes = logits.shape
    blank = n_classes - 1
    target = _check_target(target, n_classes)

    if min_frames(target) > T:
        raise InfeasibleTargetError(
            f"target needs >= {min_frames(target)} frames, logits provide {T}"
        )
    if T == 0:
        return 0.0, np.zeros_like(logits)

    probs = np_softmax(logits, axis=1)
    lp = np.log(probs)
    ext = np.asarray(_extend_with_blanks(target, blank), dtype=np.int64)
    S = len(ext)
    lp_ext = lp[:, ext]  # (T, S)

    # Skip transitions s-2 -> s are allowed only onto a unit that differs
    # from the unit two slots back (never onto blank).
    allow_skip = np.zeros(S, dtype=bool)
    if S > 2:
        allow_skip[2:] = (ext[2:] != blank) & (ext[2:] != ext[:-2])

    # Forward: alpha[t, s] = log P(frames 0..t emit ext-prefix ending at s).
    alpha = np.full((T, S), NEG_INF)
    alpha[0, 0] = lp_ext[0, 0]
    if S > 1:
        alpha[0, 1] = lp_ext[0, 1]
    for t in range(1, T):
        prev = alpha[t - 1]
        stay_or_step = np.logaddexp(prev, _shift(prev, 1))
        skip = np.where(allow_skip, _shift(prev, 2), NEG_INF)
        alpha[t] = np.logaddexp(stay_or_step, skip) + lp_ext[t]

    log_p = alpha[T - 1, S - 1]
    if S > 1:
        log_p = np.logaddexp(log_p, alpha[T - 1, S - 2])
    if log_p == NEG_INF:
        raise InfeasibleTargetError("no feasible alignment carries probability > 0")
    log_p = min(log_p, 0.0)  # P <= 1; rounding can nudge the sum past it

    # Backward: beta[t, s] = log P(frames t..T-1 emit ext-suffix starting at s),
    # including frame t's own emission.
    allow_skip_b = np.zeros(S, dtype=bool)
    if S > 2:
        allow_skip_b[:-2] = (ext[2:] != blank) & (ext[2:] != ext[:-2])
    beta = np.full((T, S), NEG_INF)
    beta[T - 1, S - 1] = lp_ext[T - 1, S - 1]
    if S > 1:
        beta[T - 1, S - 2] = lp_ext[T - 1, S - 2]
    for t in range(T - 2, -1, -1):
        nxt = beta[t + 1]
        shifted = np.full_like(nxt, NEG_INF)
        shifted[:-1] = nxt[1:]
        skipped = np.full_like(nxt, NEG_INF)
        skipped[:-2] = nxt[2:]
        stay_or_step = np.logaddexp(nxt, shifted)
        skip = np.where(allow_skip_b, skipped, NEG_INF)
        beta[t] = np.logaddexp(stay_or_step, skip) + lp_ext[t]

    # Posterior mass through (t, s); alpha and beta both include lp[t, ext[s]],
    # so one copy is removed. grad wrt logits is probs minus the per-class
    # posterior, the standard softmax/CTC composition.
    gamma = np.exp(alpha + beta - lp_ext - log_p)
    post = np.zeros_like(logits)
    for s in range(S):
        post[:, ext[s]] += gamma[:, s]
    grad = probs - post
    return float(-log_p), grad


def ctc_loss(logits, target) -> Tensor:
    """CTC loss as an autodiff node; accepts a Tensor or a plain array."""
    if isinstance(logits, Tensor):
        loss, grad = ctc_forward_backward(logits.data, target)
        return _from_op(np.asarray(loss), (logits,), lambda g: (float(g) * grad,))
    loss, _ = ctc_forward_backward(np.asarray(logits), target)
    return Tensor(np.asarray(loss))


def best_path(logits: np.ndarray) -> np.ndarray:
    """Per-frame argmax alignment.

    Frames are conditionally independent given the decoder outputs, so the
    greedy path is the exact argmax over alignments. np.argmax breaks ties
    toward the lowest index; with blank in the last column that means units
    win ties against blank.
    """
    logits = _check_logits(logits)
    return logits.argmax(axis=1)


def brute_force_ctc(logits: np.ndarray, target, max_paths: int = 10**6) -> float:
    """Exact -log marginal by enumerating every length-T alignment.

    Test oracle only; wholly independent of the forward recursion. Paths are
    enumerated as a (n_paths, T) index grid and collapsed with vectorized
    masks.
    """
    logits = _check_logits(logits)
    T, n_classes = logits.shape
    blank = n_classes - 1
    target = np.asarray(_check_target(target, n_classes), dtype=np.int64)
    L = len(target)

    n_paths = n_classes**T
    if n_paths > max_paths:
        raise OracleSizeError(f"{n_classes}^{T} = {n_paths} paths exceeds budget {max_paths}")
    if T == 0:
        return 0.0 if L == 0 else np.inf

    probs = np_softmax(logits, axis=1)
    grids = np.meshgrid(*[np.arange(n_classes)] * T, indexing="ij")
    paths = np.stack([g.ravel() for g in grids], axis=1)  # (n_paths, T)

    path_prob = probs[np.arange(T)[None, :], paths].prod(axis=1)

    keep = np.ones_like(paths, dtype=bool)
    keep[:, 1:] = paths[:, 1:] != paths[:, :-1]
    emit = keep & (paths != blank)
    cand = emit.sum(axis=1) == L
    if L == 0:
        match = cand
    else:
        vals = paths[cand][emit[cand]].reshape(-1, L)
        match = np.zeros(n_paths, dtype=bool)
        match[cand] = (vals == target[None, :]).all(axis=1)

    total = path_prob[match].sum()
    return float(-np.log(total)) if total > 0 else np.inf
