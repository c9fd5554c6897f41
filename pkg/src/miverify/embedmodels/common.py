"""Shared pieces for the three embedding models: scores, batching, norms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..datamodel import FeatureDataset, MediaPackage

MODEL_KINDS = ("mae", "bidnn", "vsm")


@dataclass(frozen=True)
class IccsValue:
    """A scalar image-caption consistency score, oriented higher-is-consistent."""

    value: float
    model_kind: str


def score_dataset(model, ds: FeatureDataset) -> list[tuple[str, IccsValue]]:
    """Score every package in dataset order; pure function of (model, ds)."""
    values = model.scores(ds)
    return [
        (pkg.package_id, IccsValue(float(v), model.kind))
        for pkg, v in zip(ds, values)
    ]


def l2_normalize(v: np.ndarray):
    """Normalize rows to unit L2 norm; returns (unit rows, cache)."""
    norms = np.linalg.norm(v, axis=1, keepdims=True)
    safe = np.where(norms == 0.0, 1.0, norms)
    u = v / safe
    return u, (u, safe)


def l2_normalize_backward(d_u: np.ndarray, cache) -> np.ndarray:
    u, safe = cache
    return (d_u - u * np.sum(u * d_u, axis=1, keepdims=True)) / safe


def minibatch_indices(n: int, batch_size: int, rng: np.random.Generator):
    """Yield index arrays covering a fresh permutation of range(n)."""
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start : start + batch_size]


def stacked_features(ds: FeatureDataset, require_captions: bool):
    """Stack image (and caption) features into matrices, validating presence."""
    if len(ds) == 0:
        raise ValueError("dataset is empty")
    images = np.stack([pkg.image_features for pkg in ds])
    captions = None
    if require_captions:
        missing = [pkg.package_id for pkg in ds if pkg.caption_features is None]
        if missing:
            raise ValueError(
                f"caption_features missing for packages: {', '.join(missing[:5])}"
            )
        captions = np.stack([pkg.caption_features for pkg in ds])
    return images, captions


def check_package_dims(pkg: MediaPackage, d_img: int, d_cap: int | None) -> None:
    if pkg.image_features.size != d_img:
        raise ValueError(
            f"{pkg.package_id}: image feature length {pkg.image_features.size} "
            f"!= model d_img {d_img}"
        )
    if d_cap is not None:
        if pkg.caption_features is None:
            raise ValueError(f"{pkg.package_id}: caption_features required but missing")
        if pkg.caption_features.size != d_cap:
            raise ValueError(
                f"{pkg.package_id}: caption feature length {pkg.caption_features.size} "
                f"!= model d_cap {d_cap}"
            )
