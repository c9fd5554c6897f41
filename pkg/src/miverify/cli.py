"""Command-line front door: thin adapters over the library operations.

Every subcommand parses flags, does file I/O, and delegates; the logic lives
in the library modules. Precedence for any setting is flag > config file >
default. Each run logs the resolved configuration and master seed to stderr
so experiments can be reconstructed from their logs.

Exit codes: 0 success, 2 validation/usage failure, 3 training divergence.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import os
import sys

from .datamodel import (
    ConfigError,
    DatasetFormatError,
    SplitSpec,
    TamperError,
    load_dataset,
    save_dataset,
    split_dataset,
    tamper,
    validate_dataset,
)
from .embedmodels import (
    MODEL_KINDS,
    BidnnConfig,
    MaeConfig,
    VsmConfig,
    load_model,
    save_model,
    score_dataset,
    train_model,
)
from .harness import (
    SyntheticSpec,
    experiment_config_from_dict,
    make_synthetic,
    run_experiment,
)
from .neuralnet import TrainingDivergedError
from .odm import ODM_KINDS, OdmConfig, load_odm, odm_fit_on_scores, save_odm

_MODEL_CONFIG_TYPES = {"mae": MaeConfig, "bidnn": BidnnConfig, "vsm": VsmConfig}


def _log(command: str, resolved: dict) -> None:
    print(f"[miverify] {command} {json.dumps(resolved, sort_keys=True)}", file=sys.stderr)


def _load_json(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return doc


def _dataclass_config(cls, raw: dict, label: str):
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{label}: {exc}") from exc


@contextlib.contextmanager
def _out_stream(path: str | None):
    if path is None:
        yield sys.stdout
    else:
        with open(path, "w", encoding="utf-8") as fh:
            yield fh


# ---------------------------------------------------------------------------
# subcommands


def _cmd_validate(args) -> int:
    ds = load_dataset(args.infile)
    _log("validate", {"in": args.infile})
    violations = validate_dataset(ds)
    if violations:
        for v in violations:
            print(f"violation: {v}", file=sys.stderr)
        return 2
    print(f"ok: {len(ds)} packages, d_img={ds.d_img}, d_cap={ds.d_cap}")
    return 0


def _cmd_split(args) -> int:
    ds = load_dataset(args.infile)
    spec = SplitSpec(
        args.train_fraction, args.val_fraction, args.test_fraction, seed=args.seed
    )
    _log("split", {"in": args.infile, "out_dir": args.out_dir, "seed": args.seed,
                   "fractions": [spec.train_fraction, spec.val_fraction, spec.test_fraction]})
    os.makedirs(args.out_dir, exist_ok=True)
    for name, part in zip(("train", "val", "test"), split_dataset(ds, spec)):
        path = os.path.join(args.out_dir, f"{name}.fpk")
        save_dataset(part, path)
        print(f"{path}: {len(part)} packages")
    return 0


def _cmd_tamper(args) -> int:
    ds = load_dataset(args.infile)
    _log("tamper", {"in": args.infile, "out": args.out, "tamper_rate": args.tamper_rate,
                    "seed": args.seed})
    out = tamper(ds, args.tamper_rate, seed=args.seed)
    save_dataset(out, args.out)
    n_tampered = sum(1 for p in out if p.label.value == "tampered")
    print(f"{args.out}: {len(out)} packages, {n_tampered} tampered")
    return 0


def _cmd_train_embed(args) -> int:
    kind = args.model_kind
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = _dataclass_config(_MODEL_CONFIG_TYPES[kind], raw, f"{kind} config")
    _log("train-embed", {"model_kind": kind, "train": args.train, "val": args.val,
                         "out": args.out, "config": raw, "seed": cfg.seed})
    train = load_dataset(args.train)
    val = load_dataset(args.val) if args.val else None
    model = train_model(kind, train, cfg, val=val)
    save_model(model, args.out)
    print(f"{args.out}: {kind} model, final loss {model.loss_history[-1]:.6g}")
    return 0


def _cmd_score(args) -> int:
    model = load_model(args.model)
    ds = load_dataset(args.infile)
    _log("score", {"model": args.model, "in": args.infile, "out": args.out})
    with _out_stream(args.out) as fh:
        for package_id, iccs in score_dataset(model, ds):
            fh.write(json.dumps({"package_id": package_id, "iccs": iccs.value}) + "\n")
    return 0


def _cmd_fit_odm(args) -> int:
    kind = args.odm_kind
    raw = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    cfg = _dataclass_config(OdmConfig, raw, "odm config")
    _log("fit-odm", {"odm_kind": kind, "model": args.model, "train": args.train,
                     "out": args.out, "config": raw, "seed": cfg.seed})
    model = load_model(args.model)
    train = load_dataset(args.train)
    scores = score_dataset(model, train)
    detector = odm_fit_on_scores(scores, kind, cfg)
    save_odm(detector, args.out)
    print(f"{args.out}: {kind} fitted on {len(scores)} reference scores")
    return 0


def _cmd_assess(args) -> int:
    model = load_model(args.model)
    detector = load_odm(args.odm)
    ds = load_dataset(args.infile)
    _log("assess", {"model": args.model, "odm": args.odm, "in": args.infile,
                    "out": args.out})
    scored = score_dataset(model, ds)
    verdicts = detector.verdicts([v for _, v in scored])
    with _out_stream(args.out) as fh:
        for (package_id, iccs), verdict in zip(scored, verdicts):
            fh.write(
                json.dumps(
                    {"package_id": package_id, "iccs": iccs.value, "verdict": verdict.value}
                )
                + "\n"
            )
    return 0


def _cmd_evaluate(args) -> int:
    raw = _load_json(args.config) if args.config else {"synthetic": {}}
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.tamper_rate is not None:
        raw["tamper_rate"] = args.tamper_rate
    if args.model_kind is not None:
        raw["model_kinds"] = [args.model_kind]
    if args.odm_kind is not None:
        raw["odm_kinds"] = [args.odm_kind]
    cfg = experiment_config_from_dict(raw)
    _log("evaluate", {"seed": cfg.seed, "config": cfg.echo()})
    report = run_experiment(cfg)
    sys.stdout.write(report.render_table())
    if args.out is not None:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json())
        print(f"report written to {args.out}")
    return 0


def _cmd_synth(args) -> int:
    raw = _load_json(args.spec) if args.spec else {}
    if args.seed is not None:
        raw["seed"] = args.seed
    spec = _dataclass_config(SyntheticSpec, raw, "synthetic spec")
    _log("synth", {"out_dir": args.out_dir, "spec": raw, "seed": spec.seed})
    os.makedirs(args.out_dir, exist_ok=True)
    for name, ds in zip(("train", "val", "test"), make_synthetic(spec)):
        path = os.path.join(args.out_dir, f"{name}.fpk")
        save_dataset(ds, path)
        print(f"{path}: {len(ds)} packages")
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="miverify",
        description="Detect image-caption packages whose caption does not match the image.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("validate", help="check a feature dataset against every invariant")
    p.add_argument("--in", dest="infile", required=True, help="dataset (.fpk NDJSON)")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("split", help="split a dataset into train/val/test files")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--test-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_split)

    p = sub.add_parser("tamper", help="swap captions between packages at a given rate")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tamper-rate", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_tamper)

    p = sub.add_parser("train-embed", help="train a joint embedding model")
    p.add_argument("--train", required=True, help="clean reference dataset (.fpk)")
    p.add_argument("--val", default=None, help="optional validation dataset (.fpk)")
    p.add_argument("--model-kind", choices=MODEL_KINDS, default="vsm")
    p.add_argument("--config", default=None, help="JSON file with model hyperparameters")
    p.add_argument("--seed", type=int, default=None, help="overrides config seed")
    p.add_argument("--out", required=True, help="model file to write")
    p.set_defaults(func=_cmd_train_embed)

    p = sub.add_parser("score", help="emit consistency scores as NDJSON")
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("fit-odm", help="fit an outlier detector on reference scores")
    p.add_argument("--model", required=True, help="trained embedding model file")
    p.add_argument("--train", required=True, help="clean reference dataset (.fpk)")
    p.add_argument("--odm-kind", choices=ODM_KINDS, default="ocsvm")
    p.add_argument("--config", default=None, help="JSON file with detector settings")
    p.add_argument("--seed", type=int, default=None, help="overrides config seed")
    p.add_argument("--out", required=True, help="detector file to write")
    p.set_defaults(func=_cmd_fit_odm)

    p = sub.add_parser("assess", help="score packages and emit inlier/outlier verdicts")
    p.add_argument("--model", required=True)
    p.add_argument("--odm", required=True)
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--out", default=None, help="output path (default stdout)")
    p.set_defaults(func=_cmd_assess)

    p = sub.add_parser("evaluate", help="run the model x detector grid and report F1")
    p.add_argument("--config", default=None, help="experiment config JSON")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--tamper-rate", type=float, default=None)
    p.add_argument("--model-kind", choices=MODEL_KINDS, default=None,
                   help="restrict the grid to one model kind")
    p.add_argument("--odm-kind", choices=ODM_KINDS, default=None,
                   help="restrict the grid to one detector kind")
    p.add_argument("--out", default=None, help="report JSON path")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("synth", help="generate the synthetic benchmark splits")
    p.add_argument("--spec", default=None, help="synthetic spec JSON")
    p.add_argument("--seed", type=int, default=None, help="overrides spec seed")
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=_cmd_synth)

    return parser


def dispatch(argv=None) -> int:
    """Parse argv and run one subcommand; returns the process exit code."""
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code
        return int(code) if code else 0
    try:
        return args.func(args)
    except TrainingDivergedError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (DatasetFormatError, ConfigError, TamperError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def run() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    run()
