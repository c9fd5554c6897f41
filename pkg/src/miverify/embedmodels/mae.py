"""Multimodal autoencoder: both feature branches into one shared code.

Consistency is read off the reconstruction quality: a package whose caption
does not belong to its image reconstructs badly through the shared code, so
the score is the negated reconstruction error (higher = more consistent).
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


@dataclass(frozen=True)
class MaeConfig:
    hidden_dim: int = 512
    code_dim: int = 256
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    iccs_mode: str = "sum"  # "sum" or "caption"
    patience: int | None = None

    def __post_init__(self):
        if self.iccs_mode not in ("sum", "caption"):
            raise ValueError(f"unknown iccs_mode {self.iccs_mode!r}")


def _build_params(d_img: int, d_cap: int, cfg: MaeConfig) -> ParameterSet:
    h, k = cfg.hidden_dim, cfg.code_dim
    p = ParameterSet(seed=cfg.seed)
    p.add("enc_img_w", d_img, h)
    p.add("enc_img_b", 1, h, init="zeros")
    p.add("enc_cap_w", d_cap, h)
    p.add("enc_cap_b", 1, h, init="zeros")
    p.add("enc_joint_w", 2 * h, k)
    p.add("enc_joint_b", 1, k, init="zeros")
    p.add("dec_joint_w", k, 2 * h)
    p.add("dec_joint_b", 1, 2 * h, init="zeros")
    p.add("dec_img_w", h, d_img)
    p.add("dec_img_b", 1, d_img, init="zeros")
    p.add("dec_cap_w", h, d_cap)
    p.add("dec_cap_b", 1, d_cap, init="zeros")
    return p


class MaeModel:
    kind = "mae"

    def __init__(self, params: ParameterSet, d_img: int, d_cap: int, config: MaeConfig):
        self.params = params
        self.d_img = d_img
        self.d_cap = d_cap
        self.config = config
        self.loss_history: list[float] = []
        self.val_loss_history: list[float] = []

    def _forward(self, images: np.ndarray, captions: np.ndarray):
        p = self.params
        h = self.config.hidden_dim
        h_img, c1 = affine_forward(images, p.value("enc_img_w"), p.value("enc_img_b"), "relu")
        h_cap, c2 = affine_forward(captions, p.value("enc_cap_w"), p.value("enc_cap_b"), "relu")
        joint_in = np.concatenate([h_img, h_cap], axis=1)
        code, c3 = affine_forward(joint_in, p.value("enc_joint_w"), p.value("enc_joint_b"), "relu")
        dec, c4 = affine_forward(code, p.value("dec_joint_w"), p.value("dec_joint_b"), "relu")
        img_hat, c5 = affine_forward(dec[:, :h], p.value("dec_img_w"), p.value("dec_img_b"), "linear")
        cap_hat, c6 = affine_forward(dec[:, h:], p.value("dec_cap_w"), p.value("dec_cap_b"), "linear")
        return img_hat, cap_hat, (c1, c2, c3, c4, c5, c6)

    def batch_loss(self, images: np.ndarray, captions: np.ndarray) -> float:
        """Mean reconstruction loss over a batch; accumulates grads in params."""
        p = self.params
        h = self.config.hidden_dim
        img_hat, cap_hat, (c1, c2, c3, c4, c5, c6) = self._forward(images, captions)
        loss_i, d_img_hat = mse_loss(img_hat, images)
        loss_c, d_cap_hat = mse_loss(cap_hat, captions)

        d_dec_i, dw, db = affine_backward(d_img_hat, c5)
        p.add_grad("dec_img_w", dw)
        p.add_grad("dec_img_b", db)
        d_dec_c, dw, db = affine_backward(d_cap_hat, c6)
        p.add_grad("dec_cap_w", dw)
        p.add_grad("dec_cap_b", db)
        d_dec = np.concatenate([d_dec_i, d_dec_c], axis=1)
        d_code, dw, db = affine_backward(d_dec, c4)
        p.add_grad("dec_joint_w", dw)
        p.add_grad("dec_joint_b", db)
        d_joint_in, dw, db = affine_backward(d_code, c3)
        p.add_grad("enc_joint_w", dw)
        p.add_grad("enc_joint_b", db)
        _, dw, db = affine_backward(d_joint_in[:, :h], c1)
        p.add_grad("enc_img_w", dw)
        p.add_grad("enc_img_b", db)
        _, dw, db = affine_backward(d_joint_in[:, h:], c2)
        p.add_grad("enc_cap_w", dw)
        p.add_grad("enc_cap_b", db)
        return loss_i + loss_c

    def _errors(self, images: np.ndarray, captions: np.ndarray):
        img_hat, cap_hat, _ = self._forward(images, captions)
        err_i = np.mean((img_hat - images) ** 2, axis=1)
        err_c = np.mean((cap_hat - captions) ** 2, axis=1)
        return err_i, err_c

    def scores(self, ds: FeatureDataset) -> np.ndarray:
        images, captions = stacked_features(ds, require_captions=True)
        if images.shape[1] != self.d_img or captions.shape[1] != self.d_cap:
            raise ValueError(
                f"dataset dims ({images.shape[1]}, {captions.shape[1]}) do not match "
                f"model dims ({self.d_img}, {self.d_cap})"
            )
        err_i, err_c = self._errors(images, captions)
        if self.config.iccs_mode == "caption":
            return -err_c
        return -(err_i + err_c)

    def iccs(self, pkg: MediaPackage) -> IccsValue:
        check_package_dims(pkg, self.d_img, self.d_cap)
        err_i, err_c = self._errors(
            pkg.image_features[None, :], pkg.caption_features[None, :]
        )
        if self.config.iccs_mode == "caption":
            return IccsValue(float(-err_c[0]), self.kind)
        return IccsValue(float(-(err_i[0] + err_c[0])), self.kind)

    def header(self) -> dict:
        return {"config": asdict(self.config)}


def mae_train(
    rd: FeatureDataset, config: MaeConfig, val: FeatureDataset | None = None
) -> MaeModel:
    images, captions = stacked_features(rd, require_captions=True)
    model = MaeModel(_build_params(images.shape[1], captions.shape[1], config),
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
                    f"mae: non-finite loss at epoch {epoch}"
                )
            adam_step(model.params, adam)
            total += loss * len(idx)
        model.loss_history.append(total / n)
        if val_mats is not None:
            err_i, err_c = model._errors(*val_mats)
            v = float(np.mean(err_i) + np.mean(err_c))
            model.val_loss_history.append(v)
            if v < best_val - 1e-12:
                best_val, since_best = v, 0
            else:
                since_best += 1
                if config.patience is not None and since_best > config.patience:
                    break
    return model
