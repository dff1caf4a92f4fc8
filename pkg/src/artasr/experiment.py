"""Baseline-vs-proposed sweep over training-subset sizes, and the Markdown
report that lays the results out as No LM / LM pairs per test condition."""

from __future__ import annotations

import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Sequence

from .decode import DecodeConfig, NGramModel, train_ngram
from .synthdata import Corpus, CorpusConfig, generate_corpus
from .train import TrainConfig, evaluate, model_config_for, train_model

log = logging.getLogger(__name__)

EVAL_OFFSET = 1_000_000
NOISY_FACTOR = 3.0
EVAL_SETS = ("clean", "noisy")
VARIANTS = ("baseline", "proposed")
# rough stand-ins for the labeled-data budgets the sizes emulate
BUDGET_LABELS = ("10 min", "1 h", "10 h", "100 h")


class SweepError(RuntimeError):
    pass


@dataclass(frozen=True)
class SweepSpec:
    sizes: tuple[int, ...] = (50, 200, 1000)
    variants: tuple[str, ...] = VARIANTS
    seeds: tuple[int, ...] = (0, 1, 2)
    decode_modes: tuple[str, ...] = ("nolm", "lm")

    def validate(self) -> None:
        if not (self.sizes and self.variants and self.seeds and self.decode_modes):
            raise ValueError("sweep lists must be non-empty")
        if list(self.sizes) != sorted(set(self.sizes)):
            raise ValueError("sweep sizes must be strictly ascending")
        for v in self.variants:
            if v not in VARIANTS:
                raise ValueError(f"unknown variant {v!r}")


def eval_corpora(pool_cfg: CorpusConfig, n_eval: int) -> dict[str, Corpus]:
    """Held-out clean and noisy sets sharing the pool's language and acoustics."""
    clean = replace(pool_cfg, n_utterances=n_eval, index_offset=EVAL_OFFSET)
    noisy = replace(clean, acoustic_noise_sd=pool_cfg.acoustic_noise_sd * NOISY_FACTOR)
    return {"clean": generate_corpus(clean), "noisy": generate_corpus(noisy)}


def _run_cell(args) -> list[dict]:
    size, variant, seed, pool, evals, lm, template, decode_cfg, model_overrides = args
    tcfg = replace(template, variant=variant, seed=seed, subset_size=size)
    mcfg = model_config_for(pool, tcfg, **model_overrides)
    try:
        params, _ = train_model(tcfg, pool, mcfg)
        out = []
        for name, corpus in evals.items():
            rep = evaluate(params, mcfg, corpus, decode_cfg, lm, seed=seed, subset_size=size)
            out.append({"size": size, "variant": variant, "seed": seed, "eval_set": name,
                        "wer_nolm": rep["wer_nolm"], "wer_lm": rep["wer_lm"],
                        "cer_nolm": rep["cer_nolm"], "mean_ppmc": rep["mean_ppmc"]})
        return out
    except Exception as exc:
        raise SweepError(f"sweep cell (size={size}, variant={variant}, seed={seed}) failed: {exc}") from exc


def run_sweep(spec: SweepSpec, pool: Corpus, template: TrainConfig, decode_cfg: DecodeConfig,
              n_eval: int = 100, lm: NGramModel | None = None, workers: int = 1,
              model_overrides: dict | None = None) -> list[dict]:
    """Train and evaluate every (size, variant, seed) cell; one record per cell and eval set."""
    spec.validate()
    if spec.sizes[-1] > len(pool):
        raise SweepError(f"largest subset {spec.sizes[-1]} exceeds pool of {len(pool)} utterances")
    if "lm" in spec.decode_modes and lm is None:
        lm = train_ngram(pool.transcripts(), vocab=pool.inventory.symbols)
    if "lm" not in spec.decode_modes:
        lm = None
    evals = eval_corpora(pool.config, n_eval)
    cells = [(size, variant, seed, pool, evals, lm, template, decode_cfg, dict(model_overrides or {}))
             for size in spec.sizes for variant in spec.variants for seed in spec.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as ex:
            results = list(ex.map(_run_cell, cells))
    else:
        results = []
        for cell in cells:
            log.info("cell size=%d variant=%s seed=%d", *cell[:3])
            results.append(_run_cell(cell))
    return [rec for cell in results for rec in cell]


def _mean_sd(xs: Sequence[float]) -> tuple[float, float]:
    return statistics.fmean(xs), (statistics.stdev(xs) if len(xs) > 1 else 0.0)


def aggregate(runs: Sequence[dict]) -> list[dict]:
    """Mean and sd over seeds for each (size, variant, eval set)."""
    groups: dict[tuple, list[dict]] = {}
    for r in runs:
        groups.setdefault((r["size"], r["variant"], r["eval_set"]), []).append(r)
    rows = []
    for (size, variant, eval_set), recs in sorted(groups.items()):
        row = {"size": size, "variant": variant, "eval_set": eval_set,
               "seeds": sorted(r["seed"] for r in recs)}
        for key in ("wer_nolm", "wer_lm", "cer_nolm"):
            vals = [r[key] for r in recs if r[key] is not None]
            if vals:
                row[f"{key}_mean"], row[f"{key}_sd"] = _mean_sd(vals)
            else:
                row[f"{key}_mean"] = row[f"{key}_sd"] = None
        rows.append(row)
    return rows


def relative_improvement(baseline: float, proposed: float) -> float | None:
    """Relative WER reduction in percent; None when the baseline is zero."""
    if baseline == 0:
        return None
    return 100.0 * (baseline - proposed) / baseline


def _pct(x) -> str:
    return "n/a" if x is None else f"{100.0 * x:.2f}"


def _rel(x) -> str:
    return "n/a" if x is None else f"{x:.1f}%"


def emit_report(rows: Sequence[dict], path=None) -> str:
    """Markdown table: one line per subset size, clean/noisy x baseline/proposed."""
    if not rows:
        raise ValueError("no sweep rows to report")
    index = {(r["size"], r["variant"], r["eval_set"]): r for r in rows}
    sizes = sorted({r["size"] for r in rows})
    missing = [f"(size={s}, variant={v}, eval_set={e})"
               for s in sizes for e in EVAL_SETS for v in VARIANTS if (s, v, e) not in index]
    if missing:
        raise ValueError("incomplete sweep rows, missing cells: " + ", ".join(missing))

    n_seeds = max(len(r["seeds"]) for r in rows)
    budget = ", ".join(f"{s} utt ~ {BUDGET_LABELS[i]}" if i < len(BUDGET_LABELS) else f"{s} utt"
                       for i, s in enumerate(sizes))
    lines = [
        "# Baseline (CTC only) vs proposed (SI + ASR with cross-attention fusion)",
        "",
        f"Training-subset sizes are utterance counts standing in for labeled-data budgets ({budget}).",
        f"WER (%) shown as No LM / LM, mean over {n_seeds} seed(s). "
        "Relative improvement = (baseline - proposed) / baseline.",
        "",
        "| Utterances | Clean baseline | Clean proposed | Noisy baseline | Noisy proposed "
        "| Rel. impr. clean | Rel. impr. noisy |",
        "|---|---|---|---|---|---|---|",
    ]
    for s in sizes:
        cells, rels = [], []
        for e in EVAL_SETS:
            b, p = index[(s, "baseline", e)], index[(s, "proposed", e)]
            cells.append(f"{_pct(b['wer_nolm_mean'])} / {_pct(b['wer_lm_mean'])}")
            cells.append(f"{_pct(p['wer_nolm_mean'])} / {_pct(p['wer_lm_mean'])}")
            r_nolm = relative_improvement(b["wer_nolm_mean"], p["wer_nolm_mean"])
            r_lm = (relative_improvement(b["wer_lm_mean"], p["wer_lm_mean"])
                    if b["wer_lm_mean"] is not None and p["wer_lm_mean"] is not None else None)
            rels.append(f"{_rel(r_nolm)} / {_rel(r_lm)}")
        lines.append(f"| {s} | " + " | ".join(cells + rels) + " |")
    text = "\n".join(lines) + "\n"
    if path is not None:
        Path(path).write_text(text, encoding="utf-8")
    return text


def write_jsonl(records: Sequence[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def spec_dict(spec: SweepSpec) -> dict:
    return asdict(spec)
