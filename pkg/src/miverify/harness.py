"""Experiment orchestration: synthetic data, the model x ODM grid, F1 metrics.

One experiment = train each embedding model on the clean train split, fit each
outlier detector on that model's reference scores, tamper the test split once,
and read the grid of F1 numbers off the verdicts. Everything downstream of the
config and master seed is deterministic, including the report JSON bytes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import norm

from .datamodel import (
    ConfigError,
    FeatureDataset,
    Label,
    MediaPackage,
    SplitSpec,
    load_dataset,
    split_dataset,
    tamper,
)
from .embedmodels import (
    MODEL_KINDS,
    BidnnConfig,
    MaeConfig,
    VsmConfig,
    score_dataset,
    train_model,
)
from .odm import ODM_KINDS, OdmConfig, Verdict, odm_fit_on_scores

REPORT_FORMAT = "miverify-report/1"

_MODEL_CONFIG_TYPES = {"mae": MaeConfig, "bidnn": BidnnConfig, "vsm": VsmConfig}

# desk-scale defaults: small enough to keep the full grid under the time
# budget on the default synthetic benchmark, big enough to separate cleanly
DEFAULT_MODEL_CONFIGS = {
    "mae": MaeConfig(hidden_dim=128, code_dim=64, epochs=30, batch_size=64),
    "bidnn": BidnnConfig(hidden_dim=128, code_dim=64, epochs=30, batch_size=64),
    "vsm": VsmConfig(embed_dim=32, hidden_dim=64, joint_dim=64, epochs=25, batch_size=64),
}


def derived_seed(master: int, name: str) -> int:
    """Stable per-cell seed from the master seed and a cell name."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    words = [int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4)]
    return int(np.random.SeedSequence([int(master), *words]).generate_state(1)[0])


# ---------------------------------------------------------------------------
# synthetic benchmark data


@dataclass(frozen=True)
class SyntheticSpec:
    latent_dim: int = 8
    d_img: int = 64
    d_cap: int = 32
    n_train: int = 2000
    n_val: int = 200
    n_test: int = 400
    noise: float = 0.05
    vocab_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.latent_dim < 1 or self.d_img < 1 or self.d_cap < 1:
            raise ConfigError("dimensions must be >= 1")
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise ConfigError("split sizes must be >= 1")
        if self.noise < 0:
            raise ConfigError(f"noise must be >= 0, got {self.noise}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")


def make_synthetic(spec: SyntheticSpec):
    """Three clean splits sharing one pair of mixing matrices.

    Each package draws a latent vector z; image features are A z + noise,
    caption features are B z + noise, and the caption text spells out an
    equal-probability quantization of z (one token per latent dim), so the
    text model has something real to learn. Caption text carries no noise.
    """
    k = spec.latent_dim
    buckets = max(2, spec.vocab_size // k)
    root = np.random.SeedSequence(spec.seed)
    ss_mix, ss_train, ss_val, ss_test = root.spawn(4)
    mix_rng = np.random.default_rng(ss_mix)
    a = mix_rng.normal(size=(k, spec.d_img)) / np.sqrt(k)
    b = mix_rng.normal(size=(k, spec.d_cap)) / np.sqrt(k)
    edges = norm.ppf(np.linspace(0.0, 1.0, buckets + 1)[1:-1])

    def build(n: int, ss, prefix: str) -> FeatureDataset:
        rng = np.random.default_rng(ss)
        z = rng.normal(size=(n, k))
        img = z @ a + rng.normal(scale=spec.noise, size=(n, spec.d_img))
        cap = z @ b + rng.normal(scale=spec.noise, size=(n, spec.d_cap))
        q = np.searchsorted(edges, z)
        pkgs = tuple(
            MediaPackage(
                f"{prefix}-{i:05d}",
                f"{prefix}-im-{i:05d}",
                " ".join(f"w{j}q{q[i, j]}" for j in range(k)),
                img[i],
                cap[i],
                Label.CLEAN,
            )
            for i in range(n)
        )
        return FeatureDataset(pkgs, spec.d_img, spec.d_cap, name=f"synthetic/{prefix}")

    return (
        build(spec.n_train, ss_train, "train"),
        build(spec.n_val, ss_val, "val"),
        build(spec.n_test, ss_test, "test"),
    )


# ---------------------------------------------------------------------------
# metrics


def f1_scores(labels, verdicts):
    """(f1_tampered, f1_clean, confusion) with tampered as the positive class.

    ``verdicts`` may be Verdict enums (outlier = predicted tampered), Labels,
    or booleans (True = predicted tampered). F1 is 0 where precision + recall
    is 0.
    """
    if len(labels) != len(verdicts):
        raise ValueError(f"{len(labels)} labels vs {len(verdicts)} verdicts")
    tp = fp = tn = fn = 0
    for truth, pred in zip(labels, verdicts):
        if isinstance(truth, Label):
            actual = truth is Label.TAMPERED
        else:
            actual = bool(truth)
        if isinstance(pred, Verdict):
            predicted = pred is Verdict.OUTLIER
        elif isinstance(pred, Label):
            predicted = pred is Label.TAMPERED
        else:
            predicted = bool(pred)
        if predicted and actual:
            tp += 1
        elif predicted and not actual:
            fp += 1
        elif not predicted and actual:
            fn += 1
        else:
            tn += 1
    f1_tampered = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) else 0.0
    f1_clean = 2 * tn / (2 * tn + fn + fp) if (2 * tn + fn + fp) else 0.0
    confusion = {"tp": tp, "fp": fp, "tn": tn, "fn": fn}
    return f1_tampered, f1_clean, confusion


def _safe_div(num: int, den: int) -> float:
    return num / den if den else 0.0


# ---------------------------------------------------------------------------
# experiment config and report


@dataclass(frozen=True)
class ExperimentConfig:
    model_kinds: tuple = tuple(MODEL_KINDS)
    odm_kinds: tuple = tuple(ODM_KINDS)
    tamper_rate: float = 0.5
    seed: int = 0
    synthetic: SyntheticSpec | None = None
    dataset_path: str | None = None
    split: SplitSpec | None = None
    train_path: str | None = None
    val_path: str | None = None
    test_path: str | None = None
    model_configs: dict = field(default_factory=dict)
    odm_configs: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.model_kinds:
            raise ConfigError("need at least one model kind")
        if not self.odm_kinds:
            raise ConfigError("need at least one odm kind")
        for mk in self.model_kinds:
            if mk not in MODEL_KINDS:
                raise ConfigError(f"unknown model kind {mk!r}")
        for ok in self.odm_kinds:
            if ok not in ODM_KINDS:
                raise ConfigError(f"unknown odm kind {ok!r}")
        if not 0.0 < self.tamper_rate <= 1.0:
            raise ConfigError(f"tamper_rate must be in (0, 1], got {self.tamper_rate}")
        sources = sum(
            [
                self.synthetic is not None,
                self.dataset_path is not None,
                self.train_path is not None,
            ]
        )
        if sources != 1:
            raise ConfigError(
                "exactly one data source required: synthetic, dataset_path, or train/val/test paths"
            )
        if self.train_path is not None and (self.val_path is None or self.test_path is None):
            raise ConfigError("train_path requires val_path and test_path")

    def model_config(self, kind: str):
        cfg = self.model_configs.get(kind, DEFAULT_MODEL_CONFIGS[kind])
        if isinstance(cfg, dict):
            cfg = _MODEL_CONFIG_TYPES[kind](**cfg)
        return cfg

    def odm_config(self, kind: str) -> OdmConfig:
        cfg = self.odm_configs.get(kind, OdmConfig())
        if isinstance(cfg, dict):
            cfg = OdmConfig(**cfg)
        return cfg

    def echo(self) -> dict:
        out = {
            "model_kinds": list(self.model_kinds),
            "odm_kinds": list(self.odm_kinds),
            "tamper_rate": self.tamper_rate,
            "seed": self.seed,
            "dataset_path": self.dataset_path,
            "train_path": self.train_path,
            "val_path": self.val_path,
            "test_path": self.test_path,
        }
        out["synthetic"] = dataclasses.asdict(self.synthetic) if self.synthetic else None
        out["split"] = dataclasses.asdict(self.split) if self.split else None
        out["model_configs"] = {
            mk: dataclasses.asdict(self.model_config(mk)) for mk in self.model_kinds
        }
        out["odm_configs"] = {
            ok: dataclasses.asdict(self.odm_config(ok)) for ok in self.odm_kinds
        }
        return out


def experiment_config_from_dict(raw: dict) -> ExperimentConfig:
    """Build an ExperimentConfig from parsed JSON (the CLI path)."""
    known = {
        "model_kinds",
        "odm_kinds",
        "tamper_rate",
        "seed",
        "synthetic",
        "dataset_path",
        "split",
        "train_path",
        "val_path",
        "test_path",
        "model_configs",
        "odm_configs",
    }
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown experiment config keys: {sorted(unknown)}")
    kwargs = dict(raw)
    if "model_kinds" in kwargs:
        kwargs["model_kinds"] = tuple(kwargs["model_kinds"])
    if "odm_kinds" in kwargs:
        kwargs["odm_kinds"] = tuple(kwargs["odm_kinds"])
    if kwargs.get("synthetic") is not None:
        kwargs["synthetic"] = SyntheticSpec(**kwargs["synthetic"])
    if kwargs.get("split") is not None:
        kwargs["split"] = SplitSpec(**kwargs["split"])
    try:
        return ExperimentConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class CellResult:
    model_kind: str
    odm_kind: str
    confusion: dict
    f1_tampered: float
    f1_clean: float
    precision_tampered: float
    recall_tampered: float
    precision_clean: float
    recall_clean: float

    def as_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class EvaluationReport:
    config: dict
    eval_size: int
    cells: list
    wall_clock_seconds: float = 0.0

    def cell(self, model_kind: str, odm_kind: str) -> CellResult:
        for c in self.cells:
            if c.model_kind == model_kind and c.odm_kind == odm_kind:
                return c
        raise KeyError(f"no cell ({model_kind}, {odm_kind})")

    def to_json(self) -> str:
        """Canonical report JSON; wall clock stays out so reruns match bytes."""
        doc = {
            "format": REPORT_FORMAT,
            "config": self.config,
            "eval_size": self.eval_size,
            "cells": [c.as_dict() for c in self.cells],
        }
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"

    def render_table(self) -> str:
        """Aligned text grid: detector rows x model columns, f1_t/f1_c cells."""
        models = sorted({c.model_kind for c in self.cells})
        odms = sorted({c.odm_kind for c in self.cells})
        width = 14
        lines = [
            f"eval packages: {self.eval_size}   wall clock: {self.wall_clock_seconds:.1f}s",
            "f1_tampered/f1_clean per detector (rows) and model (columns)",
            "",
            " " * 10 + "".join(m.ljust(width) for m in models),
        ]
        for ok in odms:
            row = ok.ljust(10)
            for mk in models:
                try:
                    c = self.cell(mk, ok)
                    row += f"{c.f1_tampered:.3f}/{c.f1_clean:.3f}".ljust(width)
                except KeyError:
                    row += "-".ljust(width)
            lines.append(row)
        return "\n".join(lines) + "\n"


def compare_models(report: EvaluationReport) -> dict:
    """Per-detector model ranking by f1_tampered, ties broken by kind name."""
    out: dict = {}
    for c in report.cells:
        out.setdefault(c.odm_kind, []).append((c.model_kind, c.f1_tampered))
    return {
        ok: [mk for mk, _ in sorted(pairs, key=lambda p: (-p[1], p[0]))]
        for ok, pairs in sorted(out.items())
    }


# ---------------------------------------------------------------------------
# the experiment itself


def _load_splits(cfg: ExperimentConfig):
    if cfg.synthetic is not None:
        return make_synthetic(cfg.synthetic)
    if cfg.dataset_path is not None:
        ds = load_dataset(cfg.dataset_path)
        split = cfg.split if cfg.split is not None else SplitSpec(0.8, 0.1, 0.1)
        split = dataclasses.replace(split, seed=derived_seed(cfg.seed, "split"))
        return split_dataset(ds, split)
    return (
        load_dataset(cfg.train_path),
        load_dataset(cfg.val_path),
        load_dataset(cfg.test_path),
    )


def _with_context(exc: Exception, context: str) -> Exception:
    try:
        wrapped = type(exc)(f"{context}: {exc}")
    except TypeError:
        wrapped = RuntimeError(f"{context}: {exc}")
    return wrapped


def run_experiment(cfg: ExperimentConfig) -> EvaluationReport:
    """Run the full grid. Training seeds derive from the master seed and the
    cell name (config seed fields are superseded), so one master seed pins
    the entire report.
    """
    t0 = time.monotonic()
    train, val, test = _load_splits(cfg)
    eval_ds = tamper(test, cfg.tamper_rate, seed=derived_seed(cfg.seed, "tamper"))
    labels = [p.label for p in eval_ds]

    cells = []
    for mk in cfg.model_kinds:
        mcfg = dataclasses.replace(
            cfg.model_config(mk), seed=derived_seed(cfg.seed, f"train/{mk}")
        )
        try:
            model = train_model(mk, train, mcfg, val=val)
            rd_scores = score_dataset(model, train)
            eval_scores = score_dataset(model, eval_ds)
        except Exception as exc:
            raise _with_context(exc, f"model {mk}") from exc
        for ok in cfg.odm_kinds:
            ocfg = dataclasses.replace(
                cfg.odm_config(ok), seed=derived_seed(cfg.seed, f"odm/{mk}/{ok}")
            )
            try:
                detector = odm_fit_on_scores(rd_scores, ok, ocfg)
                verdicts = detector.verdicts([v for _, v in eval_scores])
            except Exception as exc:
                raise _with_context(exc, f"cell {mk}x{ok}") from exc
            f1_t, f1_c, confusion = f1_scores(labels, verdicts)
            cells.append(
                CellResult(
                    model_kind=mk,
                    odm_kind=ok,
                    confusion=confusion,
                    f1_tampered=f1_t,
                    f1_clean=f1_c,
                    precision_tampered=_safe_div(
                        confusion["tp"], confusion["tp"] + confusion["fp"]
                    ),
                    recall_tampered=_safe_div(
                        confusion["tp"], confusion["tp"] + confusion["fn"]
                    ),
                    precision_clean=_safe_div(
                        confusion["tn"], confusion["tn"] + confusion["fn"]
                    ),
                    recall_clean=_safe_div(
                        confusion["tn"], confusion["tn"] + confusion["fp"]
                    ),
                )
            )
    return EvaluationReport(
        config=cfg.echo(),
        eval_size=len(eval_ds),
        cells=cells,
        wall_clock_seconds=time.monotonic() - t0,
    )
