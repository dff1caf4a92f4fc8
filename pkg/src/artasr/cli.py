"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data or model error.
Settings resolve as command-line flags > ``--config`` file > defaults; the
config file is flat ``key=value`` text using the long flag names.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import experiment
from .decode import DecodeConfig, beam_search, greedy_decode, load_ngram, save_ngram, train_ngram
from .losses import InfeasibleTargetError
from .synthdata import CorpusConfig, CorpusFormatError, generate_corpus, read_corpus, write_corpus
from .train import (CheckpointError, TrainConfig, Trainer, TrainingDivergedError, evaluate, infer,
                    load_checkpoint, model_config_for, save_checkpoint, write_trace)
from .model import ModelConfig, params_from_arrays

log = logging.getLogger("artasr")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _ints(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def read_config_file(path) -> dict[str, str]:
    """Flat key=value file; blank lines and lines starting with # are ignored."""
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _add_corpus_flags(p):
    d = CorpusConfig()
    p.add_argument("--n", type=int, default=d.n_utterances, help="number of utterances")
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--min-words", type=int, default=d.min_words)
    p.add_argument("--max-words", type=int, default=d.max_words)
    p.add_argument("--lexicon-size", type=int, default=d.lexicon_size)
    p.add_argument("--noise", type=float, default=d.acoustic_noise_sd, help="acoustic noise sd")
    p.add_argument("--jitter", type=float, default=d.tv_jitter_sd, help="TV jitter sd")
    p.add_argument("--feature-dim", type=int, default=d.feature_dim)
    p.add_argument("--distractor-dims", type=int, default=d.distractor_dims)
    p.add_argument("--offset", type=int, default=d.index_offset, help="utterance index offset")


def _add_train_flags(p):
    d = TrainConfig()
    p.add_argument("--variant", choices=("baseline", "proposed"), default=d.variant)
    p.add_argument("--loss", choices=("static", "ubw"), default=d.loss_mode)
    p.add_argument("--alpha-ctc", type=float, default=d.alpha_ctc)
    p.add_argument("--alpha-mae", type=float, default=d.alpha_mae)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--batch-size", type=int, default=d.batch_size)
    p.add_argument("--grad-clip", type=float, default=d.grad_clip)
    p.add_argument("--warmup", type=int, default=d.warmup_steps, help="linear warmup steps")
    p.add_argument("--s-lr-scale", type=float, default=d.s_lr_scale,
                   help="step-size multiplier for the uncertainty parameters")
    p.add_argument("--ctc-length-norm", action="store_true")
    p.add_argument("--seed", type=int, default=d.seed)


def _add_decode_flags(p):
    d = DecodeConfig()
    p.add_argument("--beam", type=int, default=d.beam_width)
    p.add_argument("--alpha", type=float, default=d.alpha, help="LM weight")
    p.add_argument("--beta", type=float, default=d.beta, help="length bonus")
    p.add_argument("--prune", type=float, default=None, help="skip extensions below this log-prob")


def _train_config(a, subset=None) -> TrainConfig:
    return TrainConfig(lr=a.lr, steps=a.steps, batch_size=a.batch_size, grad_clip=a.grad_clip, seed=a.seed,
                       loss_mode=a.loss, alpha_ctc=a.alpha_ctc, alpha_mae=a.alpha_mae, variant=a.variant,
                       subset_size=subset, warmup_steps=a.warmup, ctc_length_norm=a.ctc_length_norm,
                       s_lr_scale=a.s_lr_scale)


def _decode_config(a, blank: int) -> DecodeConfig:
    return DecodeConfig(beam_width=a.beam, alpha=a.alpha, beta=a.beta, blank=blank, prune_logp=a.prune)


def build_parser() -> _Parser:
    parser = _Parser(prog="artasr", description="Articulation-informed CTC ASR on synthetic data.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="flat key=value file of defaults")
        return p

    p = command("gen-data", "generate a synthetic corpus")
    _add_corpus_flags(p)
    p.add_argument("--out", required=True)

    p = command("train", "train a model")
    _add_train_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--subset", type=int, default=None, help="train on this many utterances")
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-layers", type=int, default=2)
    p.add_argument("--n-heads", type=int, default=4)
    p.add_argument("--d-ff", type=int, default=128)
    p.add_argument("--dropout", type=float, default=ModelConfig.dropout, help="residual dropout while training")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--trace", default=None, help="write the per-step loss trace as CSV")
    p.add_argument("--out", required=True)

    p = command("eval", "evaluate a checkpoint")
    _add_decode_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lm", default=None)
    p.add_argument("--out", default=None, help="write the JSON report here (default: stdout)")

    p = command("decode", "print transcripts for a corpus")
    _add_decode_flags(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--lm", default=None)
    p.add_argument("--limit", type=int, default=None)

    p = command("lm-train", "train a character n-gram LM on corpus transcripts")
    p.add_argument("--data", required=True)
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--k", type=float, default=0.5)
    p.add_argument("--out", required=True)

    p = command("sweep", "baseline vs proposed over subset sizes and seeds")
    _add_train_flags(p)
    _add_decode_flags(p)
    p.set_defaults(prune=-10.0)
    p.add_argument("--dropout", type=float, default=ModelConfig.dropout, help="residual dropout while training")
    p.add_argument("--data", required=True, help="training pool written by gen-data")
    p.add_argument("--sizes", type=_ints, default=experiment.SweepSpec().sizes)
    p.add_argument("--seeds", type=_ints, default=experiment.SweepSpec().seeds)
    p.add_argument("--n-eval", type=int, default=100)
    p.add_argument("--lm-order", type=int, default=3)
    p.add_argument("--lm-k", type=float, default=0.5)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True, help="output directory")

    p = command("report", "render sweep rows as a Markdown table")
    p.add_argument("--rows", required=True, help="rows.jsonl from sweep")
    p.add_argument("--out", default=None)
    return parser


def _apply_config(parser: _Parser, argv: list[str]) -> None:
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if not known.config or not known.command:
        return
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    sp = sub.choices.get(known.command)
    if sp is None:
        return
    values = read_config_file(known.config)
    dests = {a.dest: a for a in sp._actions}
    for k, v in values.items():
        action = dests.get(k)
        if action is None or k in ("help", "config"):
            raise UsageError(f"{known.config}: unknown setting {k!r} for {known.command}")
        if isinstance(action, argparse._StoreTrueAction):
            value = v.lower() in ("1", "true", "yes", "on")
        else:
            value = action.type(v) if action.type else v
            if action.choices and value not in action.choices:
                raise UsageError(f"{known.config}: {k}={v!r} not in {sorted(action.choices)}")
        sp.set_defaults(**{k: value})
        action.required = False


def cmd_gen_data(a) -> int:
    cfg = CorpusConfig(n_utterances=a.n, seed=a.seed, min_words=a.min_words, max_words=a.max_words,
                       lexicon_size=a.lexicon_size, acoustic_noise_sd=a.noise, tv_jitter_sd=a.jitter,
                       feature_dim=a.feature_dim, distractor_dims=a.distractor_dims, index_offset=a.offset)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    manifest = write_corpus(generate_corpus(cfg), a.out)
    print(f"wrote {len(manifest)} utterances to {a.out}")
    return EXIT_OK


def cmd_train(a) -> int:
    corpus = read_corpus(a.data)
    if a.resume:
        ckpt = load_checkpoint(a.resume)
        # the run keeps its own settings; only the step target can move
        tcfg = replace(ckpt.train_config, steps=a.steps)
        if tcfg.subset_size:
            corpus = corpus.subset(tcfg.subset_size, tcfg.seed)
        trainer = Trainer.from_checkpoint(ckpt, corpus, tcfg)
    else:
        tcfg = _train_config(a, a.subset)
        if tcfg.subset_size:
            corpus = corpus.subset(tcfg.subset_size, tcfg.seed)
        mcfg = model_config_for(corpus, tcfg, d_model=a.d_model, n_layers=a.n_layers,
                                n_heads=a.n_heads, d_ff=a.d_ff, dropout=a.dropout)
        trainer = Trainer(tcfg, mcfg, corpus)
    trainer.run()
    save_checkpoint(a.out, trainer.checkpoint())
    if a.trace:
        write_trace(trainer.trace, a.trace)
    last = trainer.trace[-1].breakdown if trainer.trace else None
    print(f"saved {a.out} at step {trainer.step}" + (f" (l_ctc={last.l_ctc:.4f})" if last else ""))
    return EXIT_OK


def _load_model(path):
    ckpt = load_checkpoint(path)
    return params_from_arrays(ckpt.params), ckpt


def cmd_eval(a) -> int:
    params, ckpt = _load_model(a.ckpt)
    corpus = read_corpus(a.data)
    lm = load_ngram(a.lm) if a.lm else None
    rep = evaluate(params, ckpt.model_config, corpus, _decode_config(a, ckpt.model_config.blank), lm,
                   seed=ckpt.train_config.seed, subset_size=ckpt.train_config.subset_size)
    text = json.dumps(rep, indent=2, sort_keys=True)
    if a.out:
        Path(a.out).write_text(text + "\n")
    print(text if not a.out else f"WER (no LM) {100 * rep['wer_nolm']:.2f}%"
          + (f", WER (LM) {100 * rep['wer_lm']:.2f}%" if rep["wer_lm"] is not None else ""))
    return EXIT_OK


def cmd_decode(a) -> int:
    params, ckpt = _load_model(a.ckpt)
    corpus = read_corpus(a.data)
    if a.limit:
        corpus.utterances = corpus.utterances[: a.limit]
    lm = load_ngram(a.lm) if a.lm else None
    inv = corpus.inventory
    cfg = _decode_config(a, ckpt.model_config.blank)
    for u, lp, _ in infer(params, ckpt.model_config, corpus):
        ids = beam_search(lp, lm, cfg, inv.symbols)[0].prefix if lm else greedy_decode(lp, cfg.blank)
        print(f"{u.id}\t{inv.decode(ids)}")
    return EXIT_OK


def cmd_lm_train(a) -> int:
    corpus = read_corpus(a.data)
    model = train_ngram(corpus.transcripts(), a.order, a.k, vocab=corpus.inventory.symbols)
    save_ngram(model, a.out)
    print(f"wrote order-{a.order} LM to {a.out}")
    return EXIT_OK


def cmd_sweep(a) -> int:
    pool = read_corpus(a.data)
    spec = experiment.SweepSpec(sizes=a.sizes, seeds=a.seeds)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc))
    template = _train_config(a)
    lm = train_ngram(pool.transcripts(), a.lm_order, a.lm_k, vocab=pool.inventory.symbols)
    decode_cfg = _decode_config(a, len(pool.inventory.symbols))
    runs = experiment.run_sweep(spec, pool, template, decode_cfg, a.n_eval, lm, a.workers,
                                model_overrides={"dropout": a.dropout})
    rows = experiment.aggregate(runs)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    experiment.write_jsonl(runs, out / "runs.jsonl")
    experiment.write_jsonl(rows, out / "rows.jsonl")
    save_ngram(lm, out / "lm.txt")
    (out / "sweep.json").write_text(json.dumps({
        "spec": experiment.spec_dict(spec), "train": asdict(template), "decode": asdict(decode_cfg),
        "n_eval": a.n_eval, "dropout": a.dropout, "pool": asdict(pool.config)}, indent=2, sort_keys=True) + "\n")
    print(experiment.emit_report(rows, out / "report.md"), end="")
    return EXIT_OK


def cmd_report(a) -> int:
    rows = experiment.read_jsonl(a.rows)
    text = experiment.emit_report(rows, a.out)
    if not a.out:
        print(text, end="")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "decode": cmd_decode,
            "lm-train": cmd_lm_train, "sweep": cmd_sweep, "report": cmd_report}


def run_cli(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        _apply_config(parser, argv)
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, CorpusFormatError, CheckpointError, InfeasibleTargetError,
            TrainingDivergedError, experiment.SweepError, ValueError, KeyError, OSError) as exc:
        print(f"artasr: error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
