"""Command line interface.

Subcommands: train, eval, tag, gradcheck, synth.  Exit codes: 0 success,
1 check or training failure, 2 input error, 3 model/data vocabulary
mismatch.  Every flag that mirrors a TrainingConfig field can also come
from a `key = value` config file via --config; explicit flags win over
the file, the file wins over defaults.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .data import (
    ColumnSpec,
    SyntheticSpec,
    build_vocabularies,
    decode_labels,
    encode_corpus,
    load_conll,
    make_synthetic_corpus,
    write_conll,
)
from .errors import SeqtagError, TrainingError, VocabMismatchError
from .serialization import load_model, save_model
from .training import Corpus, TrainingConfig, evaluate, predict_corpus, run_gradient_check, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_INPUT_ERROR = 2
EXIT_VOCAB_MISMATCH = 3


def _parse_kv_file(path: Path) -> dict[str, str]:
    """Read `key = value` lines; blank lines and # comments are skipped."""
    values: dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise SeqtagError(f"{path}:{lineno}: expected key = value, got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip()] = value.strip()
    return values


def _coerce(value: str, target_type):
    if target_type is bool:
        lowered = value.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise SeqtagError(f"cannot read {value!r} as a boolean")
    if target_type is int:
        return int(value)
    if target_type is float:
        return float(value)
    return value


def _config_from_sources(args) -> TrainingConfig:
    """flag > config file > dataclass default, field by field."""
    config = TrainingConfig()
    file_values: dict[str, str] = {}
    if getattr(args, "config", None):
        file_values = _parse_kv_file(Path(args.config))
    updates = {}
    for f in dataclasses.fields(TrainingConfig):
        flag = getattr(args, f.name, None)
        if flag is not None:
            updates[f.name] = flag
        elif f.name in file_values:
            ftype = f.type if isinstance(f.type, type) else type(getattr(config, f.name))
            updates[f.name] = _coerce(file_values[f.name], ftype)
    unknown = set(file_values) - {f.name for f in dataclasses.fields(TrainingConfig)}
    if unknown:
        raise SeqtagError(f"unknown config keys: {sorted(unknown)}")
    config = replace(config, **updates)
    config.validate()
    return config


def _column_spec(args) -> ColumnSpec:
    label = args.label_col
    if isinstance(label, str):
        label = None if label.lower() == "none" else int(label)
    features = ()
    if args.feat_cols:
        features = tuple(int(c) for c in args.feat_cols.split(","))
    return ColumnSpec(token=args.token_col, features=features, label=label)


def _require_file(path: str):
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")


def _add_column_flags(parser, label_default="-1"):
    parser.add_argument("--token-col", type=int, default=0, help="token column index")
    parser.add_argument("--feat-cols", default="", help="comma-separated feature column indices")
    parser.add_argument("--label-col", default=label_default,
                        help="label column index, or 'none' for unlabeled input")


def _add_training_flags(parser):
    parser.add_argument("--config", help="key = value config file")
    for f in dataclasses.fields(TrainingConfig):
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool" or isinstance(f.default, bool):
            parser.add_argument(flag, default=None, choices=("on", "off"),
                                help=f"{f.name} (default {f.default})")
        elif isinstance(f.default, int):
            parser.add_argument(flag, type=int, default=None, help=f"{f.name} (default {f.default})")
        elif isinstance(f.default, float):
            parser.add_argument(flag, type=float, default=None, help=f"{f.name} (default {f.default})")
        else:
            parser.add_argument(flag, default=None, help=f"{f.name} (default {f.default})")


def _normalise_bools(args):
    for f in dataclasses.fields(TrainingConfig):
        if isinstance(f.default, bool):
            value = getattr(args, f.name, None)
            if value is not None:
                setattr(args, f.name, value == "on")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqtag", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a tagger and keep the best dev model")
    p_train.add_argument("--train", required=True, dest="train_path")
    p_train.add_argument("--dev", required=True, dest="dev_path")
    p_train.add_argument("--test", dest="test_path")
    p_train.add_argument("--model-out", required=True)
    p_train.add_argument("--log-out", help="epoch log path (default <model-out>.log)")
    _add_column_flags(p_train)
    _add_training_flags(p_train)

    p_eval = sub.add_parser("eval", help="score a model against gold labels")
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--dump", help="write input plus predicted-label column here")
    _add_column_flags(p_eval)

    p_tag = sub.add_parser("tag", help="append a predicted-label column to input")
    p_tag.add_argument("--model", required=True)
    p_tag.add_argument("--input", required=True)
    p_tag.add_argument("--output", required=True)
    _add_column_flags(p_tag, label_default="none")

    p_grad = sub.add_parser("gradcheck", help="finite-difference check of every model gradient")
    p_grad.add_argument("--seed", type=int, default=1)
    p_grad.add_argument("--tolerance", type=float, default=1e-4)
    p_grad.add_argument("--fd-step", type=float, default=1e-5)
    p_grad.add_argument("--corrupt", action="store_true",
                        help="mis-scale one backward rule to prove the check catches it")

    p_synth = sub.add_parser("synth", help="generate a synthetic corpus from a spec file")
    p_synth.add_argument("--spec", required=True, help="key = value generator settings")
    p_synth.add_argument("--out-dir", required=True)
    p_synth.add_argument("--seed", type=int, default=1)
    return parser


def _load_labeled(path: str, spec: ColumnSpec):
    _require_file(path)
    sentences = load_conll(path, spec)
    if not sentences:
        raise SeqtagError(f"no sentences in {path}")
    return sentences


def _train_one_run(job) -> dict[str, float]:
    corpus, config, run_index, model_out, log_out = job
    run_config = replace(config, seed=config.seed + run_index, runs=1)
    vocabs = build_vocabularies(corpus.train, run_config.min_count)
    result = train(corpus, run_config, vocabs)
    save_model(model_out, result.params, vocabs,
               {"dropout": run_config.dropout, "l2": run_config.l2})
    Path(log_out).write_text("".join(line + "\n" for line in result.log), encoding="utf-8")
    held_out = corpus.test if corpus.test else corpus.dev
    report = evaluate(result.params, encode_corpus(held_out, vocabs), vocabs)
    return {
        "seed": run_config.seed,
        "accuracy": report.token_accuracy,
        "precision": report.precision,
        "recall": report.recall,
        "f1": report.f1,
        "cer": report.cer,
    }


def cmd_train(args) -> int:
    config = _config_from_sources(args)
    spec = _column_spec(args)
    corpus = Corpus(
        train=_load_labeled(args.train_path, spec),
        dev=_load_labeled(args.dev_path, spec),
        test=_load_labeled(args.test_path, spec) if args.test_path else [],
    )
    log_out = args.log_out or args.model_out + ".log"
    if config.runs == 1:
        results = [_train_one_run((corpus, config, 0, args.model_out, log_out))]
        print(Path(log_out).read_text(encoding="utf-8"), end="")
    else:
        jobs = [
            (corpus, config, k, f"{args.model_out}.seed{config.seed + k}",
             f"{log_out}.seed{config.seed + k}")
            for k in range(config.runs)
        ]
        if config.jobs > 1:
            with ProcessPoolExecutor(max_workers=config.jobs) as pool:
                results = list(pool.map(_train_one_run, jobs))
        else:
            results = [_train_one_run(job) for job in jobs]
        lines = []
        for metric in ("accuracy", "precision", "recall", "f1", "cer"):
            vals = np.array([r[metric] for r in results])
            lines.append(f"{metric}_mean={vals.mean():.6f} {metric}_std={vals.std():.6f}")
        aggregate = "\n".join(lines) + "\n"
        Path(log_out + ".aggregate").write_text(aggregate, encoding="utf-8")
        print(aggregate, end="")
    return EXIT_OK


def cmd_eval(args) -> int:
    _require_file(args.model)
    params, vocabs, _ = load_model(args.model)
    spec = _column_spec(args)
    sentences = _load_labeled(args.data, spec)
    encoded = encode_corpus(sentences, vocabs)
    report = evaluate(params, encoded, vocabs)
    print(report.table())
    print(report.key_values())
    if args.dump:
        preds = predict_corpus(params, encoded)
        write_conll(args.dump, sentences,
                    extra_labels=[decode_labels(p, vocabs) for p in preds])
    return EXIT_OK


def cmd_tag(args) -> int:
    _require_file(args.model)
    params, vocabs, _ = load_model(args.model)
    spec = _column_spec(args)
    _require_file(args.input)
    sentences = load_conll(args.input, spec)
    if not sentences:
        raise SeqtagError(f"no sentences in {args.input}")
    encoded = encode_corpus(sentences, vocabs)
    preds = predict_corpus(params, encoded)
    write_conll(args.output, sentences,
                extra_labels=[decode_labels(p, vocabs) for p in preds])
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    if args.corrupt:
        with ad.corrupt_tanh_backward():
            errors, ok = run_gradient_check(args.seed, args.tolerance, args.fd_step)
    else:
        errors, ok = run_gradient_check(args.seed, args.tolerance, args.fd_step)
    for name, err in errors.items():
        print(f"tensor={name} max_rel_err={err:.3e}")
    if ok:
        print(f"gradcheck: all {len(errors)} tensors within {args.tolerance:.1e}")
        return EXIT_OK
    offenders = [name for name, err in errors.items() if err >= args.tolerance]
    print(f"gradcheck: FAILED for {offenders}", file=sys.stderr)
    return EXIT_CHECK_FAILED


def cmd_synth(args) -> int:
    _require_file(args.spec)
    raw = _parse_kv_file(Path(args.spec))
    fields = {f.name: f for f in dataclasses.fields(SyntheticSpec)}
    unknown = set(raw) - set(fields) - {"seed"}
    if unknown:
        raise SeqtagError(f"unknown synthetic-spec keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in raw.items():
        if key == "seed":
            continue
        f = fields[key]
        if key == "concepts":
            kwargs[key] = tuple(c.strip() for c in value.split(",") if c.strip())
        else:
            kwargs[key] = _coerce(value, type(f.default))
    spec = SyntheticSpec(**kwargs)
    seed = int(raw.get("seed", args.seed))
    train_split, dev_split, test_split = make_synthetic_corpus(spec, seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, split in (("train", train_split), ("dev", dev_split), ("test", test_split)):
        write_conll(out_dir / f"{name}.conll", split)
    print(f"wrote {len(train_split)}/{len(dev_split)}/{len(test_split)} sentences to {out_dir}")
    return EXIT_OK


_COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "tag": cmd_tag,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _normalise_bools(args)
    try:
        return _COMMANDS[args.command](args)
    except VocabMismatchError as exc:
        print(f"seqtag {args.command}: {exc}", file=sys.stderr)
        return EXIT_VOCAB_MISMATCH
    except TrainingError as exc:
        print(f"seqtag {args.command}: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED
    except (SeqtagError, OSError, ValueError) as exc:
        print(f"seqtag {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR


if __name__ == "__main__":
    sys.exit(main())
