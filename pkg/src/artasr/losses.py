"""CTC, masked MAE and the two multi-task loss combiners."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffcore import Tensor, abs_, add, constant, exp, mul, record_op, scale, sub, sum_

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    alpha_ctc: float = 1.0
    alpha_mae: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.alpha_ctc) and math.isfinite(self.alpha_mae)):
            raise ValueError("loss weights must be finite")
        if self.alpha_ctc < 0 or self.alpha_mae < 0:
            raise ValueError("loss weights must be non-negative")
        if self.alpha_ctc == 0 and self.alpha_mae == 0:
            raise ValueError("loss weights cannot both be zero")


@dataclass
class LossBreakdown:
    l_ctc: float
    l_mae: float | None
    l_total: float
    w_ctc: float
    w_mae: float | None
    s_ctc: float | None = None
    s_mae: float | None = None


def _logaddexp3(a, b, c):
    return np.logaddexp(np.logaddexp(a, b), c)


def _shift_right(x: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(x, NEG_INF)
    if k < x.shape[1]:
        out[:, k:] = x[:, : x.shape[1] - k]
    return out


def _shift_left(x: np.ndarray, k: int) -> np.ndarray:
    out = np.full_like(x, NEG_INF)
    if k < x.shape[1]:
        out[:, : x.shape[1] - k] = x[:, k:]
    return out


def _extend(target: Sequence[int], blank: int) -> np.ndarray:
    ext = np.full(2 * len(target) + 1, blank, dtype=np.int64)
    ext[1::2] = target
    return ext


def ctc_min_frames(target: Sequence[int]) -> int:
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def _check_target(target: Sequence[int], n_frames: int, blank: int, n_classes: int) -> None:
    for y in target:
        if y == blank or not 0 <= y < n_classes:
            raise ValueError(f"invalid target symbol {y} (blank={blank}, classes={n_classes})")
    if n_frames < ctc_min_frames(target):
        raise InfeasibleTargetError(f"target infeasible for {n_frames} frames")


def ctc_forward_backward(lp: np.ndarray, lengths: Sequence[int], targets: Sequence[Sequence[int]],
                         blank: int) -> tuple[np.ndarray, np.ndarray]:
    """Batched log-space CTC.

    ``lp`` is ``[B, T, C]`` log-probabilities; utterance ``b`` uses its first
    ``lengths[b]`` frames. Returns the per-utterance negative log-likelihood
    ``[B]`` and its gradient w.r.t. ``lp`` (zero on padded frames).
    """
    B, T, C = lp.shape
    S = max(2 * len(t) + 1 for t in targets)
    ext = np.full((B, S), blank, dtype=np.int64)
    s_len = np.zeros(B, dtype=np.int64)
    # allow a skip from s-2 into s: s is a label different from the label at s-2
    skip = np.zeros((B, S), dtype=bool)
    for b, tgt in enumerate(targets):
        _check_target(tgt, lengths[b], blank, C)
        e = _extend(tgt, blank)
        ext[b, : e.size] = e
        s_len[b] = e.size
        for s in range(3, e.size, 2):
            skip[b, s] = e[s] != e[s - 2]
    valid_s = np.arange(S)[None, :] < s_len[:, None]
    lengths = np.asarray(lengths, dtype=np.int64)
    rows = np.arange(B)[:, None]

    emit = np.take_along_axis(lp, np.broadcast_to(ext[:, None, :], (B, T, S)), axis=2)
    emit = np.where(valid_s[:, None, :], emit, NEG_INF)

    alpha = np.full((B, T, S), NEG_INF)
    alpha[:, 0, 0] = emit[:, 0, 0]
    if S > 1:
        alpha[:, 0, 1] = np.where(s_len > 1, emit[:, 0, 1], NEG_INF)
    with np.errstate(invalid="ignore"):
        for t in range(1, T):
            prev = alpha[:, t - 1]
            shift1 = _shift_right(prev, 1)
            shift2 = np.where(skip, _shift_right(prev, 2), NEG_INF)
            alpha[:, t] = _logaddexp3(prev, shift1, shift2) + emit[:, t]

    beta = np.full((B, T, S), NEG_INF)
    last = lengths - 1
    init = np.full((B, S), NEG_INF)
    init[np.arange(B), s_len - 1] = 0.0
    has_two = s_len > 1
    init[np.arange(B)[has_two], s_len[has_two] - 2] = 0.0
    # beta here includes the emission at t, mirroring alpha
    skip_next = np.zeros_like(skip)
    skip_next[:, : max(S - 2, 0)] = skip[:, 2:]
    with np.errstate(invalid="ignore"):
        for t in range(T - 1, -1, -1):
            if t == T - 1:
                nxt = np.full((B, S), NEG_INF)
            else:
                nxt = beta[:, t + 1]
            n1 = _shift_left(nxt, 1)
            n2 = np.where(skip_next, _shift_left(nxt, 2), NEG_INF)
            rec = _logaddexp3(nxt, n1, n2)
            rec = np.where((t == last)[:, None], init, rec)
            rec = np.where((t > last)[:, None], NEG_INF, rec)
            beta[:, t] = rec + emit[:, t]

    a_end = alpha[np.arange(B), last]
    ll = np.logaddexp(a_end[np.arange(B), s_len - 1],
                      np.where(has_two, a_end[np.arange(B), np.maximum(s_len - 2, 0)], NEG_INF))
    if np.any(ll == NEG_INF):
        raise InfeasibleTargetError("zero probability for target")
    if np.any(np.isnan(ll)):
        # non-finite inputs: hand NaN back so the caller can report divergence
        return -ll, np.full(lp.shape, np.nan)

    # occupancy gamma_t(s) = alpha_t(s) beta_t(s) / (p * y_t(l'_s))
    with np.errstate(invalid="ignore"):
        log_occ = alpha + beta - emit - ll[:, None, None]
    occ = np.where(np.isfinite(log_occ), np.exp(log_occ), 0.0)
    onehot = np.zeros((B, S, C))
    onehot[rows, np.arange(S)[None, :], ext] = 1.0
    grad = -(occ @ onehot)
    return -ll, grad


def ctc_loss_batch(log_probs: Tensor, lengths: Sequence[int], targets: Sequence[Sequence[int]],
                   blank: int) -> Tensor:
    """Per-utterance CTC negative log-likelihoods as a ``[B]`` tensor."""
    nll, g = ctc_forward_backward(log_probs.data, lengths, targets, blank)
    return record_op(nll, (log_probs,), lambda go: (go[:, None, None] * g,))


def ctc_loss(log_probs: Tensor, target: Sequence[int], blank: int) -> Tensor:
    """-log P(target | log_probs) for a single ``[T, C]`` utterance."""
    T = log_probs.shape[0]
    nll, g = ctc_forward_backward(log_probs.data[None], [T], [list(target)], blank)
    return record_op(np.asarray(nll[0]), (log_probs,), lambda go: (go * g[0],))


def collapse(path: Sequence[int], blank: int) -> tuple[int, ...]:
    out = []
    prev = None
    for k in path:
        if k != prev and k != blank:
            out.append(k)
        prev = k
    return tuple(out)


def ctc_brute_force(log_probs: np.ndarray, target: Sequence[int], blank: int) -> float:
    """Exhaustive path enumeration; only usable for tiny instances."""
    lp = np.asarray(log_probs.data if isinstance(log_probs, Tensor) else log_probs, dtype=np.float64)
    T, C = lp.shape
    if C ** T > 10 ** 6:
        raise ValueError(f"instance too large for enumeration: {C}^{T} paths")
    target = tuple(target)
    total = 0.0
    for path in itertools.product(range(C), repeat=T):
        if collapse(path, blank) == target:
            total += math.exp(sum(lp[t, k] for t, k in enumerate(path)))
    if total == 0.0:
        raise ValueError("zero probability: no path collapses to the target")
    return -math.log(total)


def mae_loss(tv_pred: Tensor, tv_target, mask: Sequence[bool]) -> Tensor:
    """Mean |pred - target| over valid frames and all channels."""
    target = tv_target.data if isinstance(tv_target, Tensor) else np.asarray(tv_target)
    if tv_pred.shape != target.shape:
        raise ValueError(f"shape mismatch {tv_pred.shape} vs {target.shape}")
    m = np.asarray(mask, dtype=bool)
    n_valid = int(m.sum())
    if n_valid == 0:
        raise ValueError("mae_loss: every frame is masked")
    w = np.broadcast_to(m[:, None], target.shape).astype(np.float64)
    err = abs_(sub(tv_pred, constant(target)))
    return scale(sum_(mul(err, constant(w))), 1.0 / (n_valid * target.shape[1]))


def mae_loss_batch(tv_pred: Tensor, tv_target: np.ndarray, mask: np.ndarray) -> Tensor:
    """Per-utterance masked MAE, averaged over the batch."""
    mask = np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("mae_loss: an utterance has every frame masked")
    C = tv_target.shape[-1]
    w = mask[:, :, None] / (counts[:, None, None] * C * mask.shape[0])
    w = np.broadcast_to(w, tv_target.shape)
    err = abs_(sub(tv_pred, constant(tv_target)))
    return sum_(mul(err, constant(w)))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else constant(np.asarray(x, dtype=np.float64))


def combine_static(l_ctc, l_mae, w: LossWeights) -> Tensor:
    """Hand-weighted sum alpha_ctc * L_ctc + alpha_mae * L_mae."""
    return add(scale(_as_tensor(l_ctc), w.alpha_ctc), scale(_as_tensor(l_mae), w.alpha_mae))


def combine_ubw(l_ctc, l_mae, s_ctc, s_mae) -> Tensor:
    """Uncertainty-based weighting with s = log(sigma^2).

    exp(-s_ctc) L_ctc + 0.5 exp(-s_mae) L_mae + 0.5 s_ctc + 0.5 s_mae, i.e.
    L/sigma^2 for the classification term, L/(2 sigma^2) for the regression
    term, plus log(sigma) for each.
    """
    s_ctc, s_mae = _as_tensor(s_ctc), _as_tensor(s_mae)
    ctc_term = mul(exp(scale(s_ctc, -1.0)), _as_tensor(l_ctc))
    mae_term = scale(mul(exp(scale(s_mae, -1.0)), _as_tensor(l_mae)), 0.5)
    reg = scale(add(s_ctc, s_mae), 0.5)
    return add(add(ctc_term, mae_term), reg)


def ubw_weights(s_ctc: float, s_mae: float) -> tuple[float, float]:
    return math.exp(-s_ctc), 0.5 * math.exp(-s_mae)
