"""Command-line entry point: ``trace-head <command> [options]``.

Machine-readable results go to stdout, diagnostics to stderr.  Exit codes:
0 success, 1 validation / usage error, 2 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from typing import Sequence

from . import checkpoint, data, diagnostics, explain, metrics, training
from .encoder import EncoderConfig
from .model import ModelConfig

log = logging.getLogger("trace_head")

# config-file key -> (section, field)
_TRAIN_KEYS = {f.name: f.name for f in dataclasses.fields(training.TrainConfig)}
_TRAIN_KEYS.pop("encoder_n")
_TRAIN_KEYS["encoder.n"] = "encoder_n"
_ENCODER_KEYS = {f"encoder.{f.name}": f.name for f in dataclasses.fields(EncoderConfig)}
_MODEL_KEYS = {"scorer.h1": "h1", "scorer.h2": "h2", "scorer.dropout": "dropout", "fusion.D": "D"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _convert(value: str, like):
    if isinstance(like, bool):
        low = value.strip().lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise UsageError(f"expected a boolean, got {value!r}")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    if value.strip().lower() in ("none", "null", ""):
        return None
    return value.strip()


def read_config(path: str) -> dict[str, str]:
    """Flat ``key = value`` file; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            if key not in _TRAIN_KEYS and key not in _ENCODER_KEYS and key not in _MODEL_KEYS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = value
    return out


def build_configs(args, d_img: int) -> tuple[training.TrainConfig, ModelConfig]:
    """Defaults, then config file, then command-line flags."""
    values = read_config(args.config) if args.config else {}
    train_kw, enc_kw, model_kw = {}, {}, {}
    defaults_t, defaults_e, defaults_m = training.TrainConfig(), EncoderConfig(), ModelConfig()
    try:
        for key, value in values.items():
            if key in _TRAIN_KEYS:
                field = _TRAIN_KEYS[key]
                like = getattr(defaults_t, field)
                train_kw[field] = _convert(value, 0 if field == "encoder_n" and value.lower() != "none" else like)
            elif key in _ENCODER_KEYS:
                field = _ENCODER_KEYS[key]
                enc_kw[field] = _convert(value, getattr(defaults_e, field))
            else:
                field = _MODEL_KEYS[key]
                model_kw[field] = _convert(value, getattr(defaults_m, field))
        for field in dataclasses.fields(training.TrainConfig):
            flag = getattr(args, field.name, None)
            if flag is not None:
                train_kw[field.name] = flag
        if args.seed is not None:
            train_kw["seed"] = args.seed
        encoder = EncoderConfig(**enc_kw)
        return training.TrainConfig(**train_kw), ModelConfig(encoder=encoder, d_img=d_img, **model_kw)
    except (TypeError, ValueError) as err:
        raise UsageError(f"invalid configuration: {err}") from None


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--dataset", required=True)
    p.add_argument("--val-dataset", required=True)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--accum-target", dest="accum_target", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-delta", dest="min_delta", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--selection", choices=("soft", "hard_st"))
    p.add_argument("--encoder-n", dest="encoder_n", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--no-rel-loss", dest="use_rel_loss", action="store_const", const=False)


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trace-head", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("synth", help="write a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=600)
    p.add_argument("--d-img", dest="d_img", type=int, default=64)
    p.add_argument("--K", type=int, default=3)
    p.add_argument("--alpha", type=float, default=2.0)
    p.add_argument("--seed", type=int, default=42)

    p = sub.add_parser("train", help="train and write a checkpoint; history CSV on stdout")
    _add_train_flags(p)
    p.add_argument("--out", required=True, help="checkpoint path")

    p = sub.add_parser("eval", help="metrics of a checkpoint on a dataset (JSON)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--threshold", type=float, default=0.5)

    p = sub.add_parser("explain", help="per-example caption reports (JSON lines)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--text", action="store_true", help="human-readable rendering instead of JSON")
    p.add_argument("--out")

    p = sub.add_parser("gradcheck", help="finite-difference check of the toy model")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rel-tol", dest="rel_tol", type=float, default=1e-4)

    p = sub.add_parser("mcnemar", help="McNemar's test on disagreement counts")
    p.add_argument("--n10", type=int, required=True)
    p.add_argument("--n01", type=int, required=True)

    p = sub.add_parser("sweep", help="macro-F1 against the number of tuned encoder blocks (CSV)")
    _add_train_flags(p)
    p.add_argument("--test-dataset")
    p.add_argument("--n-list", dest="n_list", default="0,1,2,4,6")
    p.add_argument("--out")
    return parser


def format_p(p: float) -> str:
    return "<0.0001" if p < 1e-4 else f"{p:.4f}"


def _cmd_synth(args) -> None:
    examples = data.gen_synthetic(args.count, args.d_img, args.K, args.alpha, args.seed)
    data.save_dataset(args.out, examples, args.d_img)
    log.info("wrote %d examples to %s", len(examples), args.out)


def _load_pair(args):
    train_set = data.load_dataset(args.dataset)
    val_set = data.load_dataset(args.val_dataset)
    if not train_set or not val_set:
        raise UsageError("training and validation datasets must be non-empty")
    return train_set, val_set


def _cmd_train(args) -> None:
    train_set, val_set = _load_pair(args)
    cfg, model_cfg = build_configs(args, data.dataset_d_img(train_set))
    run = training.train(cfg, train_set, val_set, model_cfg)
    checkpoint.save_checkpoint(run.model, args.out, {"train_config": dataclasses.asdict(cfg), "best_epoch": run.best_epoch})
    sys.stdout.write(run.history_csv())
    saved = checkpoint.load_checkpoint(args.out)
    m = training.evaluate(saved, val_set, cfg.threshold)
    log.info("best epoch %d; saved checkpoint validation: %s", run.best_epoch, json.dumps(m.to_dict(), sort_keys=True))


def _cmd_eval(args) -> None:
    model = checkpoint.load_checkpoint(args.checkpoint)
    m = training.evaluate(model, data.load_dataset(args.dataset), args.threshold)
    print(json.dumps(m.to_dict(), sort_keys=True))


def _cmd_explain(args) -> None:
    model = checkpoint.load_checkpoint(args.checkpoint)
    chunks = []
    for ex in data.load_dataset(args.dataset):
        e = explain.explain(model, ex, args.threshold)
        chunks.append(e.render() + "\n" if args.text else e.to_json())
    text = "\n".join(chunks) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _cmd_gradcheck(args) -> int:
    report = diagnostics.end_to_end_gradcheck(seed=args.seed, rel_tol=args.rel_tol)
    print(f"max relative error {report.max_rel_error:.3e}")
    print(f"worst parameter {report.worst_param}{list(report.worst_index or ())}")
    print(f"checked {report.checked} scalars at tolerance {report.rel_tol:g}: {'PASS' if report.passed else 'FAIL'}")
    return 0 if report.passed else 1


def _cmd_mcnemar(args) -> None:
    try:
        stat, p = metrics.mcnemar(args.n10, args.n01)
    except ValueError as err:
        raise UsageError(str(err)) from None
    print(f"statistic {stat:.2f}")
    print(f"p_value {format_p(p)}")


def _cmd_sweep(args) -> None:
    train_set, val_set = _load_pair(args)
    test_set = data.load_dataset(args.test_dataset) if args.test_dataset else None
    cfg, model_cfg = build_configs(args, data.dataset_d_img(train_set))
    try:
        n_values = [int(x) for x in args.n_list.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--n-list must be comma-separated integers, got {args.n_list!r}") from None
    rows = training.layer_sweep(cfg, n_values, train_set, val_set, test_set, model_cfg)
    table = training.sweep_csv(rows)
    sys.stdout.write(table)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(table)


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
    "gradcheck": _cmd_gradcheck,
    "mcnemar": _cmd_mcnemar,
    "sweep": _cmd_sweep,
}


def run(argv: Sequence[str] | None = None) -> int:
    parser = make_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        sys.stderr.write(parser.format_help())
        return 1
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(message)s")
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        code = _COMMANDS[args.command](args)
        return code or 0
    except (UsageError, data.DatasetError, checkpoint.CheckpointError, FileNotFoundError, IsADirectoryError) as err:
        sys.stderr.write(f"error: {err}\n")
        return 1
    except Exception as err:  # noqa: BLE001
        sys.stderr.write(f"internal error: {type(err).__name__}: {err}\n")
        return 2


def main() -> None:
    sys.exit(run())
