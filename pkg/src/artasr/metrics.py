"""Edit-distance error rates and Pearson correlation for TV trajectories."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .synthdata import TV_NAMES


class UndefinedCorrelationError(ValueError):
    pass


@dataclass(frozen=True)
class EditCounts:
    substitutions: int
    deletions: int
    insertions: int
    ref_len: int

    @property
    def total(self) -> int:
        return self.substitutions + self.deletions + self.insertions


def edit_distance(ref: Sequence, hyp: Sequence) -> EditCounts:
    """Unit-cost Levenshtein alignment.

    The backtrace prefers substitution (or match), then deletion, then
    insertion whenever several moves are optimal.
    """
    n, m = len(ref), len(hyp)
    d = np.zeros((n + 1, m + 1), dtype=np.int64)
    d[:, 0] = np.arange(n + 1)
    d[0, :] = np.arange(m + 1)
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            d[i, j] = min(d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]),
                          d[i - 1, j] + 1, d[i, j - 1] + 1)
    i, j = n, m
    s = dl = ins = 0
    while i > 0 or j > 0:
        if i > 0 and j > 0 and d[i, j] == d[i - 1, j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif i > 0 and d[i, j] == d[i - 1, j] + 1:
            dl += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(int(s), dl, ins, n)


def word_edits(ref: str, hyp: str) -> EditCounts:
    ref_words = ref.split()
    if not ref_words:
        raise ValueError("empty reference")
    return edit_distance(ref_words, hyp.split())


def wer(ref: str, hyp: str) -> float:
    """(S + D + I) / reference words, as a fraction (may exceed 1)."""
    c = word_edits(ref, hyp)
    return c.total / c.ref_len


def cer(ref: str, hyp: str) -> float:
    if not ref:
        raise ValueError("empty reference")
    c = edit_distance(list(ref), list(hyp))
    return c.total / c.ref_len


def ppmc(x, y) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"ppmc needs equal-length 1-D series, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise ValueError("ppmc needs at least 2 points")
    xc = x - x.mean()
    yc = y - y.mean()
    sxx = float(xc @ xc)
    syy = float(yc @ yc)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedCorrelationError("undefined correlation: zero variance series")
    r = float(xc @ yc) / math.sqrt(sxx * syy)
    return min(1.0, max(-1.0, r))


@dataclass
class PpmcReport:
    per_channel: dict[str, float | None]
    mean: float | None
    undefined: int

    def to_dict(self) -> dict:
        return {"per_channel": self.per_channel, "mean": self.mean, "undefined": self.undefined}


def ppmc_report(tv_pred, tv_target, mask=None) -> PpmcReport:
    """Channel-wise PPMC over valid frames, in canonical TV order."""
    pred = np.asarray(getattr(tv_pred, "data", tv_pred), dtype=np.float64)
    tgt = np.asarray(getattr(tv_target, "data", tv_target), dtype=np.float64)
    if mask is not None:
        m = np.asarray(mask, dtype=bool)
        pred, tgt = pred[m], tgt[m]
    if pred.shape[0] < 2:
        raise ValueError("ppmc_report needs at least 2 valid frames")
    values: dict[str, float | None] = {}
    for j, name in enumerate(TV_NAMES):
        try:
            values[name] = ppmc(pred[:, j], tgt[:, j])
        except UndefinedCorrelationError:
            values[name] = None
    defined = [v for v in values.values() if v is not None]
    undefined = len(values) - len(defined)
    if undefined:
        warnings.warn(f"{undefined} TV channel(s) have undefined correlation", RuntimeWarning)
    return PpmcReport(values, float(np.mean(defined)) if defined else None, undefined)
