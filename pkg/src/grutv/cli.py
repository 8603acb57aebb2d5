"""Command line entry point: ``grutv <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Sub-commands only talk to each other through files.  ``GRUTV_SEED`` sets the
default seed wherever ``--seed`` is accepted.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from grutv import __version__
from grutv.errors import GrutvError, UsageError

log = logging.getLogger("grutv")


class _Parser(argparse.ArgumentParser):
    """argparse that raises instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _default_seed():
    raw = os.environ.get("GRUTV_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"GRUTV_SEED must be an integer, got {raw!r}") from None


def _read_config(path):
    if path is None:
        return {}
    try:
        d = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"{path}: no such config file") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON config ({exc})") from None
    if not isinstance(d, dict):
        raise UsageError(f"{path}: config must be a JSON object")
    return d


def _csv_list(text, kind=str):
    try:
        return [kind(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def _write_text(text, out):
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    from grutv.data import save_csv_dir, save_jsonl
    from grutv.synth import SynthConfig, gen_synth

    d = _read_config(args.config)
    if args.n is not None:
        d["n_sequences"] = args.n
    if args.seed is not None:
        d["seed"] = args.seed
    d.setdefault("seed", _default_seed())
    corpus = gen_synth(SynthConfig.from_dict(d))
    if args.format == "csv-dir":
        save_csv_dir(corpus, args.out)
    else:
        save_jsonl(corpus, args.out)
    print(f"wrote {len(corpus)} sequences to {args.out}")
    return 0


def cmd_sample(args):
    from grutv.data import load_corpus, sequence_to_json
    from grutv.sampling import apply_selection, build_sampling_dict, sample_sequence

    corpus = load_corpus(args.input)
    seed = _default_seed() if args.seed is None else args.seed
    sdict = build_sampling_dict(corpus, args.bucket_width) if args.mode == "inverse" else None
    selection = sample_sequence(corpus, args.mode, args.rate, sdict, seed)
    thinned = apply_selection(corpus, selection)
    lines = [json.dumps({"vars": list(corpus.variables), "tasks": list(corpus.tasks)})]
    lines += [json.dumps(sequence_to_json(s, {"kept": [int(i) for i in idx]}))
              for s, idx in zip(thinned, selection)]
    _write_text("\n".join(lines) + "\n", args.out)
    total = sum(len(s) for s in corpus)
    kept = sum(len(idx) for idx in selection)
    print(f"kept {kept}/{total} records (rate {kept / max(total, 1):.4f})", file=sys.stderr)
    return 0


def cmd_stats(args):
    import io

    from grutv.data import corpus_stats, load_corpus, write_stats_csv

    corpus = load_corpus(args.input)
    stats = corpus_stats(corpus, args.bucket_width)
    buf = io.StringIO()
    write_stats_csv(stats, buf)
    _write_text(buf.getvalue(), args.out)
    if args.fig_dir:
        from grutv.plotting import plot_interval_histogram, plot_missing_rates

        fig_dir = Path(args.fig_dir)
        paths = [plot_missing_rates(stats, fig_dir / "missing_rates.png"),
                 plot_interval_histogram(stats, fig_dir / "intervals.png")]
        for p in paths:
            print(f"figure {p}", file=sys.stderr)
    return 0


def _train_config(args):
    from grutv.training import TrainConfig

    d = _read_config(args.config)
    overrides = {
        "lr": args.lr, "hidden_size": args.hidden, "max_epochs": args.max_epochs,
        "min_epochs": args.min_epochs, "patience": args.patience, "accumulation": args.accumulation,
        "max_substep": args.max_substep, "seed": args.seed,
    }
    d.update({k: v for k, v in overrides.items() if v is not None})
    d.setdefault("seed", _default_seed())
    return TrainConfig.from_dict(d)


def cmd_train(args):
    from grutv.data import load_corpus
    from grutv.training import train

    corpus = load_corpus(args.input)
    config = _train_config(args)
    result = train(args.cell, corpus, config)
    result.checkpoint.save(args.out)
    if args.log:
        _write_text("".join(json.dumps(row) + "\n" for row in result.log), args.log)
    ck = result.checkpoint
    print(f"variant {ck.model.variant.value} best epoch {ck.epoch} val {ck.val_metric:.6f} "
          f"stopped {result.stopped_epoch} steps {result.steps} -> {args.out}")
    return 0


def cmd_eval(args):
    from grutv.data import load_corpus
    from grutv.training import Checkpoint, TrainConfig, evaluate_model, prepare, split_indices

    ckpt = Checkpoint.load(args.ckpt) if Path(args.ckpt).exists() else None
    if ckpt is None:
        raise UsageError(f"{args.ckpt}: no such checkpoint")
    corpus = load_corpus(args.input)
    if corpus.n_vars != len(ckpt.model.defaults):
        raise UsageError(f"corpus has {corpus.n_vars} variables, checkpoint expects {len(ckpt.model.defaults)}")
    seqs = list(corpus)
    if args.split == "all":
        chosen = seqs
    else:
        cfg = TrainConfig.from_dict(ckpt.config) if ckpt.config else TrainConfig()
        idx = split_indices(len(seqs), cfg.fractions, cfg.seed)[args.split]
        chosen = [seqs[i] for i in idx]
    if not chosen:
        raise UsageError(f"split {args.split!r} is empty")
    substep = ckpt.config.get("max_substep") if ckpt.config else None
    report = evaluate_model(ckpt.model, prepare(chosen, ckpt.model.defaults), ckpt.tasks or corpus.tasks,
                            max_substep=substep)
    _write_text(report.to_json() + "\n", args.out)
    return 0


def cmd_gradcheck(args):
    from grutv.gradcheck import check_cell

    seed = _default_seed() if args.seed is None else args.seed
    if args.dr < 1 or args.dh < 1:
        raise UsageError("--dr and --dh must be at least 1")
    report = check_cell(args.cell, args.dr, args.dh, seed, length=args.length, tolerance=args.tolerance)
    status = "PASS" if report.passed else "FAIL"
    print(f"cell {args.cell} dr {args.dr} dh {args.dh} seed {seed} "
          f"max_rel_error {report.worst_rel_error:.3e} max_abs_error {report.worst_abs_error:.3e} {status}")
    return 0 if report.passed else 3


def cmd_experiment(args):
    from grutv.experiment import ExperimentSpec, run_experiment

    d = _read_config(args.config)
    if args.input is not None:
        d["corpus"] = args.input
    if args.variants:
        d["variants"] = _csv_list(args.variants)
    if args.conditions:
        d["conditions"] = [{"rate": r, "mode": args.mode} for r in _csv_list(args.conditions, float)]
    if args.seeds:
        d["seeds"] = _csv_list(args.seeds, int)
    elif "GRUTV_SEED" in os.environ and "seeds" not in d:
        d["seeds"] = [_default_seed()]
    if args.n is not None:
        synth = dict(d.get("synth") or {})
        synth["n_sequences"] = args.n
        d["synth"] = synth
    spec = ExperimentSpec.from_dict(d)
    result = run_experiment(spec)
    text = result.to_text()
    if args.out:
        _write_text(result.to_json(), args.out)
    if args.text:
        _write_text(text, args.text)
    sys.stdout.write(text)
    if args.fig_dir:
        from grutv.plotting import plot_experiment

        p = plot_experiment(result, Path(args.fig_dir) / "experiment.png")
        print(f"figure {p}", file=sys.stderr)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser():
    p = _Parser(prog="grutv", description="Time-aware GRU cells for irregular, partially observed sequences.")
    p.add_argument("--version", action="version", version=f"grutv {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, help="number of sequences")
    s.add_argument("--seed", type=int)
    s.add_argument("--config", help="JSON file with SynthConfig fields")
    s.add_argument("--format", choices=["jsonl", "csv-dir"], default="jsonl")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("sample", help="thin a corpus to a target record rate")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", help="output JSONL (default stdout)")
    s.add_argument("--mode", choices=["uniform", "inverse"], default="inverse")
    s.add_argument("--rate", type=float, required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--bucket-width", type=float, default=1.0)
    s.set_defaults(func=cmd_sample)

    s = sub.add_parser("stats", help="missing rates and interval histogram as CSV")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", help="output CSV (default stdout)")
    s.add_argument("--bucket-width", type=float, default=1.0)
    s.add_argument("--fig-dir", help="also render figures into this directory")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("train", help="train one cell variant and save the best checkpoint")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--cell", required=True)
    s.add_argument("--out", required=True, help="checkpoint path (JSON)")
    s.add_argument("--config", help="JSON file with TrainConfig fields")
    s.add_argument("--seed", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--hidden", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--min-epochs", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--accumulation", type=int)
    s.add_argument("--max-substep", type=float)
    s.add_argument("--log", help="write the per-epoch history as JSONL")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a checkpoint on a corpus split")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--split", choices=["train", "val", "test", "all"], default="test")
    s.add_argument("--out", help="output JSON (default stdout)")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("gradcheck", help="finite-difference check of a cell's loss gradient")
    s.add_argument("--cell", required=True)
    s.add_argument("--dr", type=int, default=3)
    s.add_argument("--dh", type=int, default=4)
    s.add_argument("--seed", type=int)
    s.add_argument("--length", type=int)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("experiment", help="variants x conditions x seeds comparison grid")
    s.add_argument("--config", help="JSON file with ExperimentSpec fields")
    s.add_argument("--in", dest="input", help="corpus (default: synthetic)")
    s.add_argument("--variants", help="comma-separated cell variants")
    s.add_argument("--conditions", help="comma-separated sampling rates, e.g. 1,0.5")
    s.add_argument("--mode", choices=["uniform", "inverse"], default="uniform")
    s.add_argument("--seeds", help="comma-separated seeds")
    s.add_argument("--n", type=int, help="synthetic sequence count")
    s.add_argument("--out", help="result grid as JSON")
    s.add_argument("--text", help="result grid as aligned text")
    s.add_argument("--fig-dir", help="also render the grid figure into this directory")
    s.set_defaults(func=cmd_experiment)
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("missing command; see grutv --help")
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        with np.errstate(over="ignore", under="ignore"):
            return args.func(args)
    except GrutvError as exc:
        print(f"grutv: error: {exc}", file=sys.stderr)
        if isinstance(exc, UsageError):
            print("usage: grutv {synth,sample,stats,train,eval,gradcheck,experiment} ... (see --help)",
                  file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"grutv: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
