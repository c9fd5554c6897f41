"""Bidirectional cross-modal translator with transpose-tied middle layers.

Two four-layer networks translate image features to caption features and
back. The middle weight matrices are shared across directions as transposes
of each other, so the two translators meet in one common representation.
Score = negated cross-modal translation error.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from ..datamodel import FeatureDataset, MediaPackage
from ..neuralnet import (
    AdamState,
    ParameterSet,
    TrainingDivergedError,
    adam_step,
    affine_backward,
    affine_forward,
    mse_loss,
)
from .common import (
    IccsValue,
    check_package_dims,
    minibatch_indices,
    stacked_features,
)

TIE_MODES = ("transpose", "copy", "none")


@dataclass(frozen=True)
class BidnnConfig:
    hidden_dim: int = 512
    code_dim: int = 256
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    iccs_mode: str = "sum"  # "sum" or "caption"
    tie_mode: str = "transpose"
    patience: int | None = None

    def __post_init__(self):
        if self.iccs_mode not in ("sum", "caption"):
            raise ValueError(f"unknown iccs_mode {self.iccs_mode!r}")
        if self.tie_mode not in TIE_MODES:
            raise ValueError(f"unknown tie_mode {self.tie_mode!r}")


def _build_params(d_img: int, d_cap: int, cfg: BidnnConfig) -> ParameterSet:
    h, k = cfg.hidden_dim, cfg.code_dim
    p = ParameterSet(seed=cfg.seed)
    p.add("ic1_w", d_img, h)
    p.add("ic1_b", 1, h, init="zeros")
    p.add("ci1_w", d_cap, h)
    p.add("ci1_b", 1, h, init="zeros")
    p.add("ic2_w", h, k)
    if cfg.tie_mode == "transpose":
        p.add("ci2_w", h, k)
        p.alias("ci3_w", "ic2_w", transposed=True)
        p.alias("ic3_w", "ci2_w", transposed=True)
    elif cfg.tie_mode == "copy":
        p.alias("ci2_w", "ic2_w")
        p.add("ic3_w", k, h)
        p.alias("ci3_w", "ic3_w")
    else:
        p.add("ci2_w", h, k)
        p.add("ic3_w", k, h)
        p.add("ci3_w", k, h)
    p.add("ic2_b", 1, k, init="zeros")
    p.add("ci2_b", 1, k, init="zeros")
    p.add("ic3_b", 1, h, init="zeros")
    p.add("ci3_b", 1, h, init="zeros")
    p.add("ic4_w", h, d_cap)
    p.add("ic4_b", 1, d_cap, init="zeros")
    p.add("ci4_w", h, d_img)
    p.add("ci4_b", 1, d_img, init="zeros")
    return p


class BidnnModel:
    kind = "bidnn"

    def __init__(self, params: ParameterSet, d_img: int, d_cap: int, config: BidnnConfig):
        self.params = params
        self.d_img = d_img
        self.d_cap = d_cap
        self.config = config
        self.loss_history: list[float] = []
        self.val_loss_history: list[float] = []

    def _translate(self, x: np.ndarray, prefix: str):
        """Run one direction ("ic" or "ci"); returns (output, rep, caches)."""
        p = self.params
        a1, c1 = affine_forward(x, p.value(f"{prefix}1_w"), p.value(f"{prefix}1_b"), "relu")
        rep, c2 = affine_forward(a1, p.value(f"{prefix}2_w"), p.value(f"{prefix}2_b"), "relu")
        a3, c3 = affine_forward(rep, p.value(f"{prefix}3_w"), p.value(f"{prefix}3_b"), "relu")
        out, c4 = affine_forward(a3, p.value(f"{prefix}4_w"), p.value(f"{prefix}4_b"), "linear")
        return out, rep, (c1, c2, c3, c4)

    def _translate_backward(self, d_out: np.ndarray, prefix: str, caches) -> None:
        p = self.params
        c1, c2, c3, c4 = caches
        d, dw, db = affine_backward(d_out, c4)
        p.add_grad(f"{prefix}4_w", dw)
        p.add_grad(f"{prefix}4_b", db)
        d, dw, db = affine_backward(d, c3)
        p.add_grad(f"{prefix}3_w", dw)
        p.add_grad(f"{prefix}3_b", db)
        d, dw, db = affine_backward(d, c2)
        p.add_grad(f"{prefix}2_w", dw)
        p.add_grad(f"{prefix}2_b", db)
        d, dw, db = affine_backward(d, c1)
        p.add_grad(f"{prefix}1_w", dw)
        p.add_grad(f"{prefix}1_b", db)

    def batch_loss(self, images: np.ndarray, captions: np.ndarray) -> float:
        cap_hat, _, caches_ic = self._translate(images, "ic")
        img_hat, _, caches_ci = self._translate(captions, "ci")
        loss_ic, d_cap_hat = mse_loss(cap_hat, captions)
        loss_ci, d_img_hat = mse_loss(img_hat, images)
        self._translate_backward(d_cap_hat, "ic", caches_ic)
        self._translate_backward(d_img_hat, "ci", caches_ci)
        return loss_ic + loss_ci

    def _errors(self, images: np.ndarray, captions: np.ndarray):
        cap_hat, _, _ = self._translate(images, "ic")
        img_hat, _, _ = self._translate(captions, "ci")
        err_ic = np.mean((cap_hat - captions) ** 2, axis=1)
        err_ci = np.mean((img_hat - images) ** 2, axis=1)
        return err_ic, err_ci

    def scores(self, ds: FeatureDataset) -> np.ndarray:
        images, captions = stacked_features(ds, require_captions=True)
        if images.shape[1] != self.d_img or captions.shape[1] != self.d_cap:
            raise ValueError(
                f"dataset dims ({images.shape[1]}, {captions.shape[1]}) do not match "
                f"model dims ({self.d_img}, {self.d_cap})"
            )
        err_ic, err_ci = self._errors(images, captions)
        if self.config.iccs_mode == "caption":
            return -err_ic
        return -(err_ic + err_ci)

    def iccs(self, pkg: MediaPackage) -> IccsValue:
        check_package_dims(pkg, self.d_img, self.d_cap)
        err_ic, err_ci = self._errors(
            pkg.image_features[None, :], pkg.caption_features[None, :]
        )
        if self.config.iccs_mode == "caption":
            return IccsValue(float(-err_ic[0]), self.kind)
        return IccsValue(float(-(err_ic[0] + err_ci[0])), self.kind)

    def joint_representation(self, pkg: MediaPackage) -> np.ndarray:
        """Concatenated middle-layer codes, image path first; length 2*code."""
        check_package_dims(pkg, self.d_img, self.d_cap)
        _, rep_ic, _ = self._translate(pkg.image_features[None, :], "ic")
        _, rep_ci, _ = self._translate(pkg.caption_features[None, :], "ci")
        return np.concatenate([rep_ic[0], rep_ci[0]])

    def header(self) -> dict:
        return {"config": asdict(self.config)}


def bidnn_train(
    rd: FeatureDataset, config: BidnnConfig, val: FeatureDataset | None = None
) -> BidnnModel:
    images, captions = stacked_features(rd, require_captions=True)
    model = BidnnModel(_build_params(images.shape[1], captions.shape[1], config),
                       images.shape[1], captions.shape[1], config)
    adam = AdamState(model.params, lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    val_mats = None
    if val is not None and len(val) > 0:
        val_mats = stacked_features(val, require_captions=True)
    best_val, since_best = np.inf, 0
    n = len(rd)
    for epoch in range(config.epochs):
        total = 0.0
        for idx in minibatch_indices(n, config.batch_size, shuffle_rng):
            model.params.zero_grads()
            loss = model.batch_loss(images[idx], captions[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"bidnn: non-finite loss at epoch {epoch}"
                )
            adam_step(model.params, adam)
            total += loss * len(idx)
        model.loss_history.append(total / n)
        if val_mats is not None:
            err_ic, err_ci = model._errors(*val_mats)
            v = float(np.mean(err_ic) + np.mean(err_ci))
            model.val_loss_history.append(v)
            if v < best_val - 1e-12:
                best_val, since_best = v, 0
            else:
                since_best += 1
                if config.patience is not None and since_best > config.patience:
                    break
    return model
