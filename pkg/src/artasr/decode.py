"""Greedy CTC decoding, a character n-gram LM and CTC prefix beam search
with shallow LM fusion."""

from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .losses import collapse

BOS = "<s>"
_SPACE_TOKEN = "<sp>"
LM_HEADER = "NGRAM v1"
NEG_INF = -math.inf


def _lse(a: float, b: float) -> float:
    if a == NEG_INF:
        return b
    if b == NEG_INF:
        return a
    m = max(a, b)
    return m + math.log1p(math.exp(-abs(a - b)))


def _rows(log_probs) -> np.ndarray:
    return np.asarray(getattr(log_probs, "data", log_probs), dtype=np.float64)


def greedy_decode(log_probs, blank: int) -> list[int]:
    """Per-frame argmax (lowest index on ties), collapse repeats, drop blanks."""
    return list(collapse(np.argmax(_rows(log_probs), axis=1).tolist(), blank))


# ---------------------------------------------------------------------------
# n-gram LM


@dataclass
class NGramModel:
    order: int
    vocab: tuple[str, ...]
    k: float
    counts: dict[tuple[str, ...], dict[str, int]] = field(default_factory=dict)

    def __post_init__(self):
        self._totals = {ctx: sum(c.values()) for ctx, c in self.counts.items()}
        self._vocab_set = frozenset(self.vocab)

    def prob(self, context: Sequence[str], symbol: str) -> float:
        if symbol not in self._vocab_set:
            raise KeyError(f"symbol {symbol!r} not in LM vocabulary")
        ctx = self._context(context)
        n = self.counts.get(ctx, {}).get(symbol, 0)
        return (n + self.k) / (self._totals.get(ctx, 0) + self.k * len(self.vocab))

    def _context(self, context: Sequence[str]) -> tuple[str, ...]:
        if self.order == 1:
            return ()
        hist = [BOS] * (self.order - 1) + list(context)
        return tuple(hist[-(self.order - 1):])


def train_ngram(corpus: Sequence[str], order: int = 3, k: float = 0.5,
                vocab: Sequence[str] | None = None) -> NGramModel:
    """Character n-gram counts with sentence-start padding and add-k smoothing.

    The predicted vocabulary defaults to the characters seen in ``corpus``;
    the start symbol only ever appears as context.
    """
    if not corpus:
        raise ValueError("cannot train an LM on an empty corpus")
    if not 1 <= order <= 5:
        raise ValueError("order must be in 1..5")
    if k <= 0:
        raise ValueError("k must be positive")
    if vocab is None:
        vocab = sorted(set("".join(corpus)))
    vocab = tuple(vocab)
    for s in vocab:
        if len(s) != 1 or s in "\t\n,<":
            raise ValueError(f"unsupported LM symbol {s!r}")
    counts: dict[tuple[str, ...], dict[str, int]] = defaultdict(lambda: defaultdict(int))
    for text in corpus:
        padded = [BOS] * (order - 1) + list(text)
        for i in range(order - 1, len(padded)):
            if padded[i] not in vocab:
                raise ValueError(f"corpus symbol {padded[i]!r} not in vocabulary")
            counts[tuple(padded[i - order + 1 : i])][padded[i]] += 1
    plain = {ctx: dict(c) for ctx, c in counts.items()}
    return NGramModel(order, vocab, float(k), plain)


def lm_logprob(model: NGramModel, context: Sequence[str], symbol: str) -> float:
    return math.log(model.prob(context, symbol))


def _tok(s: str) -> str:
    return _SPACE_TOKEN if s == " " else s


def _untok(t: str) -> str:
    return " " if t == _SPACE_TOKEN else t


def save_ngram(model: NGramModel, path) -> None:
    vocab = ",".join(_tok(s) for s in model.vocab)
    lines = [f"{LM_HEADER} order={model.order} k={model.k!r} vocab={vocab}"]
    entries = []
    for ctx, row in model.counts.items():
        c = " ".join(_tok(s) for s in ctx)
        for sym, n in row.items():
            entries.append(f"{c}\t{_tok(sym)}\t{n}")
    lines.extend(sorted(entries))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_ngram(path) -> NGramModel:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith(LM_HEADER + " "):
        raise ValueError(f"{path}: not an {LM_HEADER} file")
    fields = dict(item.split("=", 1) for item in lines[0][len(LM_HEADER) + 1:].split(" "))
    vocab = tuple(_untok(t) for t in fields["vocab"].split(","))
    counts: dict[tuple[str, ...], dict[str, int]] = defaultdict(dict)
    for line in lines[1:]:
        if not line:
            continue
        c, sym, n = line.split("\t")
        ctx = tuple(_untok(t) for t in c.split(" ")) if c else ()
        counts[ctx][_untok(sym)] = int(n)
    return NGramModel(int(fields["order"]), vocab, float(fields["k"]), dict(counts))


# ---------------------------------------------------------------------------
# beam search


@dataclass(frozen=True)
class DecodeConfig:
    beam_width: int = 8
    alpha: float = 0.5
    beta: float = 1.0
    blank: int = 0
    prune_logp: float | None = None  # skip extensions below this frame log-prob

    def __post_init__(self):
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")


@dataclass
class BeamHypothesis:
    prefix: tuple[int, ...]
    p_blank: float
    p_nonblank: float
    lm_score: float
    score: float

    @property
    def ctc_logprob(self) -> float:
        return _lse(self.p_blank, self.p_nonblank)


class _LMScorer:
    def __init__(self, lm: NGramModel | None, symbols: Sequence[str] | None):
        self.lm = lm
        self.symbols = symbols
        if lm is not None and symbols is None:
            raise ValueError("an LM needs the id -> symbol table")
        self._cache: dict[tuple[int, ...], float] = {}

    def step(self, prefix: tuple[int, ...], c: int) -> float:
        if self.lm is None:
            return 0.0
        key = prefix[-(self.lm.order - 1):] + (c,) if self.lm.order > 1 else (c,)
        v = self._cache.get(key)
        if v is None:
            ctx = [self.symbols[i] for i in key[:-1]]
            v = lm_logprob(self.lm, ctx, self.symbols[c])
            self._cache[key] = v
        return v

    def sequence(self, labels: Sequence[int]) -> float:
        return sum(self.step(tuple(labels[:i]), c) for i, c in enumerate(labels))


def _rank_key(h: BeamHypothesis):
    return (-h.score, h.prefix)


def beam_search(log_probs, lm: NGramModel | None, cfg: DecodeConfig,
                symbols: Sequence[str] | None = None) -> list[BeamHypothesis]:
    """CTC prefix beam search with shallow fusion.

    Ranking score is log P_ctc(prefix) + alpha * log P_lm(prefix) +
    beta * len(prefix); ties go to the lexicographically smaller prefix.
    """
    lp = _rows(log_probs)
    T, C = lp.shape
    blank = cfg.blank
    scorer = _LMScorer(lm, symbols)
    labels = [c for c in range(C) if c != blank]

    def score(prefix, pb, pnb, lm_s):
        return _lse(pb, pnb) + cfg.alpha * lm_s + cfg.beta * len(prefix)

    beams = {(): (0.0, NEG_INF, 0.0)}
    for t in range(T):
        row = lp[t]
        nxt: dict[tuple[int, ...], list[float]] = {}

        def slot(prefix, lm_s):
            s = nxt.get(prefix)
            if s is None:
                s = nxt[prefix] = [NEG_INF, NEG_INF, lm_s]
            return s

        for prefix, (pb, pnb, lm_s) in beams.items():
            total = _lse(pb, pnb)
            s = slot(prefix, lm_s)
            s[0] = _lse(s[0], total + row[blank])
            if prefix:
                s[1] = _lse(s[1], pnb + row[prefix[-1]])
            last = prefix[-1] if prefix else None
            for c in labels:
                if cfg.prune_logp is not None and row[c] < cfg.prune_logp:
                    continue
                new = prefix + (c,)
                ns = slot(new, lm_s + scorer.step(prefix, c))
                ns[1] = _lse(ns[1], (pb if c == last else total) + row[c])
        ranked = sorted(nxt.items(), key=lambda kv: (-score(kv[0], *kv[1]), kv[0]))
        beams = {p: tuple(v) for p, v in ranked[: cfg.beam_width]}

    hyps = [BeamHypothesis(p, pb, pnb, lm_s, score(p, pb, pnb, lm_s))
            for p, (pb, pnb, lm_s) in beams.items()]
    return sorted(hyps, key=_rank_key)


def exhaustive_oracle(log_probs, lm: NGramModel | None, cfg: DecodeConfig,
                      symbols: Sequence[str] | None = None) -> tuple[tuple[int, ...], float]:
    """Best label sequence by exact path-sum enumeration (tiny inputs only)."""
    lp = _rows(log_probs)
    T, C = lp.shape
    if C ** T > 10 ** 6:
        raise ValueError(f"instance too large for enumeration: {C}^{T} paths")
    scorer = _LMScorer(lm, symbols)
    seq_logp: dict[tuple[int, ...], float] = {}
    for path in itertools.product(range(C), repeat=T):
        labels = collapse(path, cfg.blank)
        p = float(sum(lp[t, k] for t, k in enumerate(path)))
        seq_logp[labels] = _lse(seq_logp.get(labels, NEG_INF), p)
    best = None
    for labels, logp in seq_logp.items():
        s = logp + cfg.alpha * scorer.sequence(labels) + cfg.beta * len(labels)
        if best is None or (-s, labels) < (-best[1], best[0]):
            best = (labels, s)
    return best
