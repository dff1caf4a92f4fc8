"""Optimization loop, batching, checkpoints and evaluation."""

from __future__ import annotations

import csv
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import diffcore as dc
from .decode import DecodeConfig, NGramModel, beam_search, greedy_decode
from .losses import (LossBreakdown, LossWeights, combine_static, combine_ubw, ctc_loss_batch,
                     mae_loss_batch, ubw_weights)
from .metrics import edit_distance, ppmc_report, word_edits
from .model import ModelConfig, Params, forward, init_params, params_from_arrays
from .synthdata import Corpus

log = logging.getLogger(__name__)

CKPT_MAGIC = b"ARTK"
CKPT_VERSION = 1
LOSS_MODES = ("static", "ubw")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    steps: int = 600
    batch_size: int = 8
    grad_clip: float = 5.0
    seed: int = 0
    loss_mode: str = "ubw"
    alpha_ctc: float = 1.0
    alpha_mae: float = 1.0
    variant: str = "proposed"
    eval_every: int = 0
    subset_size: int | None = None
    warmup_steps: int = 0
    ctc_length_norm: bool = False
    s_lr_scale: float = 100.0  # UBW s terms need to track log-loss scale within a short run

    def validate(self) -> None:
        if not self.lr > 0:
            raise ValueError("lr must be > 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.loss_mode == "static":
            LossWeights(self.alpha_ctc, self.alpha_mae)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha_ctc, self.alpha_mae)


class TrainingDivergedError(RuntimeError):
    def __init__(self, step: int, last: LossBreakdown | None):
        super().__init__(f"non-finite loss at step {step}; last finite breakdown: {last}")
        self.step = step
        self.last = last


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              lr_scale: dict[str, float] | None = None) -> AdamState:
    """Bias-corrected Adam, updating ``params`` in place.

    Parameters without a gradient entry are left untouched. ``lr_scale``
    multiplies the step size of individual parameters.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = params[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        state.m[name], state.v[name] = m, v
        step_lr = lr * lr_scale.get(name, 1.0) if lr_scale else lr
        p.data = p.data - step_lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        factor = max_norm / norm
        grads = {k: g * factor for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    ids: list[str]
    features: np.ndarray  # [B, T, F]
    tvs: np.ndarray  # [B, T, 9]
    mask: np.ndarray  # [B, T] bool
    lengths: list[int]
    targets: list[list[int]]
    transcripts: list[str]


def collate(utts, inventory) -> Batch:
    T = max(u.n_frames for u in utts)
    B = len(utts)
    F = utts[0].features.shape[1]
    feats = np.zeros((B, T, F))
    tvs = np.zeros((B, T, utts[0].tvs_50.shape[1]))
    mask = np.zeros((B, T), dtype=bool)
    for i, u in enumerate(utts):
        n = u.n_frames
        feats[i, :n] = u.features
        tvs[i, :n] = u.tvs_50
        mask[i, :n] = True
    return Batch([u.id for u in utts], feats, tvs, mask, [u.n_frames for u in utts],
                 [inventory.encode(u.transcript) for u in utts], [u.transcript for u in utts])


def make_batches(corpus: Corpus, batch_size: int, seed: int, epoch: int) -> list[Batch]:
    """Shuffle deterministically per (seed, epoch) and pad into batches."""
    if len(corpus) == 0:
        raise ValueError("cannot batch an empty corpus")
    order = np.random.default_rng([seed, epoch]).permutation(len(corpus))
    inv = corpus.inventory
    return [collate([corpus[i] for i in order[s : s + batch_size]], inv)
            for s in range(0, len(order), batch_size)]


# ---------------------------------------------------------------------------
# training


def batch_loss(params: Params, mcfg: ModelConfig, tcfg: TrainConfig, batch: Batch,
               rng: np.random.Generator | None = None) -> tuple[dc.Tensor, LossBreakdown]:
    lp, tv = forward(params, mcfg, batch.features, batch.mask, rng)
    per_utt = ctc_loss_batch(lp, batch.lengths, batch.targets, mcfg.blank)
    if tcfg.ctc_length_norm:
        per_utt = dc.mul(per_utt, dc.constant(1.0 / np.array([len(t) for t in batch.targets])))
    l_ctc = dc.mean(per_utt)
    if mcfg.variant == "baseline":
        return l_ctc, LossBreakdown(l_ctc.item(), None, l_ctc.item(), 1.0, None)
    l_mae = mae_loss_batch(tv, batch.tvs, batch.mask)
    if tcfg.loss_mode == "ubw":
        s_ctc, s_mae = params["s_ctc"], params["s_mae"]
        total = combine_ubw(l_ctc, l_mae, s_ctc, s_mae)
        w_ctc, w_mae = ubw_weights(s_ctc.item(), s_mae.item())
        return total, LossBreakdown(l_ctc.item(), l_mae.item(), total.item(), w_ctc, w_mae,
                                    s_ctc.item(), s_mae.item())
    w = tcfg.weights
    total = combine_static(l_ctc, l_mae, w)
    return total, LossBreakdown(l_ctc.item(), l_mae.item(), total.item(), w.alpha_ctc, w.alpha_mae)


@dataclass
class TraceRow:
    step: int
    breakdown: LossBreakdown
    grad_norm: float


class Trainer:
    """Owns parameters, optimizer state and the step counter for one run."""

    def __init__(self, tcfg: TrainConfig, mcfg: ModelConfig, corpus: Corpus,
                 params: Params | None = None, opt: AdamState | None = None, step: int = 0,
                 rng_state: dict | None = None):
        tcfg.validate()
        if mcfg.variant != tcfg.variant:
            raise ValueError(f"model variant {mcfg.variant!r} != training variant {tcfg.variant!r}")
        self.tcfg = tcfg
        self.mcfg = mcfg
        self.corpus = corpus
        self.params = params if params is not None else init_params(mcfg, tcfg.seed)
        self.opt = opt if opt is not None else AdamState()
        self.step = step
        self.rng = np.random.default_rng(tcfg.seed)
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.trace: list[TraceRow] = []
        self._epoch_cache: tuple[int, list[Batch]] | None = None
        self._last_finite: LossBreakdown | None = None
        self._lr_scale = {"s_ctc": tcfg.s_lr_scale, "s_mae": tcfg.s_lr_scale}

    def _batch(self, step: int) -> Batch:
        n_batches = math.ceil(len(self.corpus) / self.tcfg.batch_size)
        epoch, idx = divmod(step, n_batches)
        if self._epoch_cache is None or self._epoch_cache[0] != epoch:
            self._epoch_cache = (epoch, make_batches(self.corpus, self.tcfg.batch_size, self.tcfg.seed, epoch))
        return self._epoch_cache[1][idx]

    def lr_at(self, step: int) -> float:
        if self.tcfg.warmup_steps > 0 and step < self.tcfg.warmup_steps:
            return self.tcfg.lr * (step + 1) / self.tcfg.warmup_steps
        return self.tcfg.lr

    def train_step(self) -> TraceRow:
        batch = self._batch(self.step)
        with dc.Tape() as tape:
            total, bd = batch_loss(self.params, self.mcfg, self.tcfg, batch, self.rng)
        if not math.isfinite(bd.l_total):
            raise TrainingDivergedError(self.step, self._last_finite)
        grads = dc.backward(total, tape)
        for p in self.params.values():
            p.grad = None
        grads, norm = clip_by_global_norm(grads, self.tcfg.grad_clip)
        adam_step(self.params, grads, self.opt, self.lr_at(self.step), lr_scale=self._lr_scale)
        self._last_finite = bd
        row = TraceRow(self.step, bd, norm)
        self.trace.append(row)
        self.step += 1
        return row

    def run(self, until: int | None = None) -> list[TraceRow]:
        until = self.tcfg.steps if until is None else until
        while self.step < until:
            row = self.train_step()
            if self.tcfg.eval_every and self.step % self.tcfg.eval_every == 0:
                log.info("step %d l_ctc=%.4f l_mae=%s", self.step, row.breakdown.l_ctc, row.breakdown.l_mae)
        return self.trace

    def checkpoint(self) -> "Checkpoint":
        return Checkpoint(
            version=CKPT_VERSION, model_config=self.mcfg, train_config=self.tcfg,
            params={k: v.data.copy() for k, v in self.params.items()},
            adam_m={k: v.copy() for k, v in self.opt.m.items()},
            adam_v={k: v.copy() for k, v in self.opt.v.items()},
            step=self.step, adam_step=self.opt.step, rng_state=self.rng.bit_generator.state)

    @classmethod
    def from_checkpoint(cls, ckpt: "Checkpoint", corpus: Corpus,
                        tcfg: TrainConfig | None = None) -> "Trainer":
        opt = AdamState(ckpt.adam_step, {k: v.copy() for k, v in ckpt.adam_m.items()},
                        {k: v.copy() for k, v in ckpt.adam_v.items()})
        return cls(tcfg or ckpt.train_config, ckpt.model_config, corpus,
                   params=params_from_arrays(ckpt.params), opt=opt, step=ckpt.step,
                   rng_state=ckpt.rng_state)


def model_config_for(corpus: Corpus, tcfg: TrainConfig, **overrides) -> ModelConfig:
    cfg = ModelConfig(vocab_size=len(corpus.inventory.symbols), feature_dim=corpus.config.feature_dim,
                      variant=tcfg.variant, seed=tcfg.seed, **overrides)
    cfg.validate()
    return cfg


def train_model(cfg: TrainConfig, corpus: Corpus, model_cfg: ModelConfig | None = None) -> tuple[Params, list[TraceRow]]:
    if cfg.subset_size is not None:
        corpus = corpus.subset(cfg.subset_size, cfg.seed)
    mcfg = model_config_for(corpus, cfg) if model_cfg is None else model_cfg
    trainer = Trainer(cfg, mcfg, corpus)
    trainer.run()
    return trainer.params, trainer.trace


TRACE_FIELDS = ("step", "l_ctc", "l_mae", "l_total", "s_ctc", "s_mae", "grad_norm")


def write_trace(trace: Sequence[TraceRow], path) -> None:
    def fmt(x):
        return "" if x is None else repr(float(x))

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACE_FIELDS)
        for r in trace:
            b = r.breakdown
            w.writerow([r.step, fmt(b.l_ctc), fmt(b.l_mae), fmt(b.l_total), fmt(b.s_ctc), fmt(b.s_mae),
                        fmt(r.grad_norm)])


# ---------------------------------------------------------------------------
# checkpoints


class CheckpointError(ValueError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class UnknownTensorError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    version: int
    model_config: ModelConfig
    train_config: TrainConfig
    params: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray]
    adam_v: dict[str, np.ndarray]
    step: int
    adam_step: int
    rng_state: dict

    def tensors(self) -> dict[str, np.ndarray]:
        out = {f"param/{k}": v for k, v in self.params.items()}
        out.update({f"adam.m/{k}": v for k, v in self.adam_m.items()})
        out.update({f"adam.v/{k}": v for k, v in self.adam_v.items()})
        return out


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """ARTK container: magic, u32 version, u64 header size, JSON header, raw payload."""
    table = []
    chunks = []
    offset = 0
    for name, arr in ckpt.tensors().items():
        a = np.asarray(arr)
        dtype = "<f4" if a.dtype == np.float32 else "<f8"
        raw = np.ascontiguousarray(a, dtype=dtype).tobytes()
        table.append({"name": name, "shape": list(a.shape), "dtype": dtype, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "model_config": asdict(ckpt.model_config),
        "train_config": asdict(ckpt.train_config),
        "step": ckpt.step,
        "adam_step": ckpt.adam_step,
        "rng_state": ckpt.rng_state,
        "tensors": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IQ", CKPT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def load_checkpoint(path) -> Checkpoint:
    blob = Path(path).read_bytes()
    if blob[:4] != CKPT_MAGIC:
        raise CheckpointMagicError(f"{path}: bad magic, not a checkpoint")
    if len(blob) < 16:
        raise CheckpointTruncatedError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    if 16 + hlen > len(blob):
        raise CheckpointTruncatedError(f"{path}: header needs {hlen} bytes, file too short")
    header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    mcfg = ModelConfig(**header["model_config"])
    tcfg = TrainConfig(**header["train_config"])
    known = set(init_params(mcfg).keys())
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam.m": {}, "adam.v": {}}
    for entry in header["tensors"]:
        group, _, name = entry["name"].partition("/")
        if group not in groups or name not in known:
            raise UnknownTensorError(f"{path}: unknown tensor {entry['name']!r}")
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(blob):
            raise CheckpointTruncatedError(
                f"{path}: tensor {entry['name']} needs bytes {start}..{end}, file has {len(blob)}")
        arr = np.frombuffer(blob[start:end], dtype=entry["dtype"]).reshape(entry["shape"]).copy()
        groups[group][name] = arr
    missing = known - set(groups["param"])
    if missing:
        raise CheckpointError(f"{path}: missing parameters {sorted(missing)}")
    return Checkpoint(version, mcfg, tcfg, groups["param"], groups["adam.m"], groups["adam.v"],
                      header["step"], header["adam_step"], header["rng_state"])


# ---------------------------------------------------------------------------
# evaluation


def infer(params: Params, mcfg: ModelConfig, corpus: Corpus, batch_size: int = 32):
    """Yield (utterance, log_probs [T, C], tv_pred [T, 9] or None) without recording a tape."""
    inv = corpus.inventory
    for s in range(0, len(corpus), batch_size):
        utts = corpus.utterances[s : s + batch_size]
        b = collate(utts, inv)
        lp, tv = forward(params, mcfg, b.features, b.mask)
        for i, u in enumerate(utts):
            n = b.lengths[i]
            yield u, lp.data[i, :n], (tv.data[i, :n] if tv is not None else None)


def evaluate(params: Params, mcfg: ModelConfig, corpus: Corpus, decode_cfg: DecodeConfig | None = None,
             lm: NGramModel | None = None, seed: int | None = None, subset_size: int | None = None) -> dict:
    """Corpus-level WER (pooled edits / pooled reference words), CER and PPMC."""
    inv = corpus.inventory
    symbols = inv.symbols
    decode_cfg = decode_cfg or DecodeConfig(blank=mcfg.blank)
    if decode_cfg.blank != mcfg.blank:
        decode_cfg = replace(decode_cfg, blank=mcfg.blank)
    edits_nolm = edits_lm = ref_words = 0
    char_edits = ref_chars = 0
    preds, targets = [], []
    for u, lp, tv in infer(params, mcfg, corpus):
        hyp = inv.decode(greedy_decode(lp, mcfg.blank))
        e = word_edits(u.transcript, hyp)
        edits_nolm += e.total
        ref_words += e.ref_len
        char_edits += edit_distance(list(u.transcript), list(hyp)).total
        ref_chars += len(u.transcript)
        if lm is not None:
            best = beam_search(lp, lm, decode_cfg, symbols)[0]
            edits_lm += word_edits(u.transcript, inv.decode(best.prefix)).total
        if tv is not None:
            preds.append(tv)
            targets.append(u.tvs_50)
    report = {
        "corpus_id": corpus_id(corpus),
        "variant": mcfg.variant,
        "subset_size": subset_size,
        "n_utterances": len(corpus),
        "wer_nolm": edits_nolm / ref_words,
        "wer_lm": edits_lm / ref_words if lm is not None else None,
        "cer_nolm": char_edits / ref_chars,
        "mean_ppmc": None,
        "ppmc": None,
        "decode_config": asdict(decode_cfg),
        "seed": seed,
    }
    if preds:
        rep = ppmc_report(np.concatenate(preds), np.concatenate(targets))
        report["mean_ppmc"] = rep.mean
        report["ppmc"] = rep.per_channel
    return report


def corpus_id(corpus: Corpus) -> str:
    c = corpus.config
    return f"seed{c.seed}-off{c.index_offset}-noise{c.acoustic_noise_sd:g}-n{len(corpus)}"
