"""Image feature extraction: penultimate FC activations of a small convnet.

The network is a plain numpy forward pass over weights loaded from a
container file; which weights those are is the caller's choice, pinned by
hash. The bundled generator produces a fixed random-weight network, which is
enough for deterministic feature extraction at desk scale; weights converted
from a large pretrained classifier drop into the same container format.

Architecture (recorded in the container meta): two 3x3 same-padding
convolutions with relu and 2x2 max pooling, then two fully-connected layers;
the extractor output is the relu activation of the first FC layer, i.e. the
last hidden layer before the classifier logits.
"""

from __future__ import annotations

import numpy as np
from PIL import Image, UnidentifiedImageError

from .weights import load_weights, save_weights

INPUT_SIZE = 32

_REQUIRED = ("conv1_k", "conv1_b", "conv2_k", "conv2_b", "fc1_w", "fc1_b", "fc2_w", "fc2_b")


class ImageDecodeError(ValueError):
    """The file at image_path could not be decoded as an image."""


def _conv3x3_relu(x: np.ndarray, kernels: np.ndarray, bias: np.ndarray) -> np.ndarray:
    # x (n, h, w, cin), kernels (3, 3, cin, cout); zero padding keeps h, w
    n, h, w, _ = x.shape
    padded = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((n, h, w, kernels.shape[3]))
    for dy in range(3):
        for dx in range(3):
            out += padded[:, dy : dy + h, dx : dx + w, :] @ kernels[dy, dx]
    return np.maximum(out + bias, 0.0)


def _maxpool2(x: np.ndarray) -> np.ndarray:
    n, h, w, c = x.shape
    return x.reshape(n, h // 2, 2, w // 2, 2, c).max(axis=(2, 4))


def load_image(path) -> np.ndarray:
    """Decode to float64 RGB in [0, 1] at the network's input size."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            if rgb.size != (INPUT_SIZE, INPUT_SIZE):
                rgb = rgb.resize((INPUT_SIZE, INPUT_SIZE), Image.Resampling.BILINEAR)
            arr = np.asarray(rgb, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"{path}: {exc}") from exc
    return arr


class ImageFeatureExtractor:
    """Forward pass to the penultimate fully-connected activation."""

    def __init__(self, weights_path, expected_sha256: str | None = None):
        kind, arrays, meta = load_weights(weights_path, expected_sha256)
        if kind != "convnet":
            raise ValueError(f"{weights_path}: expected convnet weights, got {kind!r}")
        missing = [n for n in _REQUIRED if n not in arrays]
        if missing:
            raise ValueError(f"{weights_path}: missing arrays {missing}")
        self.arrays = arrays
        self.meta = meta
        self.d_img = int(arrays["fc1_w"].shape[1])

    def extract_batch(self, images: np.ndarray) -> np.ndarray:
        """(n, 32, 32, 3) pixels -> (n, d_img) penultimate activations."""
        a = self.arrays
        h = _maxpool2(_conv3x3_relu(images, a["conv1_k"], a["conv1_b"]))
        h = _maxpool2(_conv3x3_relu(h, a["conv2_k"], a["conv2_b"]))
        flat = h.reshape(len(h), -1)
        return np.maximum(flat @ a["fc1_w"] + a["fc1_b"], 0.0)

    def extract_paths(self, paths, batch_size: int = 32):
        """Decode and extract in manifest order.

        Returns (vectors, failed) where ``failed`` lists the indices of
        undecodable paths; vectors has one row per successful path, order
        preserved.
        """
        rows, failed = [], []
        batch, batch_idx = [], []
        for i, path in enumerate(paths):
            try:
                batch.append(load_image(path))
                batch_idx.append(i)
            except ImageDecodeError:
                failed.append(i)
                continue
            if len(batch) == batch_size:
                rows.append(self.extract_batch(np.stack(batch)))
                batch, batch_idx = [], []
        if batch:
            rows.append(self.extract_batch(np.stack(batch)))
        vectors = np.concatenate(rows) if rows else np.zeros((0, self.d_img))
        return vectors, failed


def make_default_convnet(path, d_img: int = 64, seed: int = 0) -> None:
    """Write the bundled fixed-weight network to ``path``."""
    rng = np.random.default_rng(seed)
    flat = (INPUT_SIZE // 4) * (INPUT_SIZE // 4) * 16
    arrays = {
        "conv1_k": rng.normal(scale=np.sqrt(2.0 / (9 * 3)), size=(3, 3, 3, 8)),
        "conv1_b": np.zeros(8),
        "conv2_k": rng.normal(scale=np.sqrt(2.0 / (9 * 8)), size=(3, 3, 8, 16)),
        "conv2_b": np.zeros(16),
        "fc1_w": rng.normal(scale=np.sqrt(2.0 / flat), size=(flat, d_img)),
        "fc1_b": np.zeros(d_img),
        "fc2_w": rng.normal(scale=np.sqrt(2.0 / d_img), size=(d_img, 10)),
        "fc2_b": np.zeros(10),
    }
    meta = {
        "id": f"tinycnn-{d_img}-seed{seed}",
        "architecture": "conv3x3(3->8) relu pool2 / conv3x3(8->16) relu pool2 / fc relu / fc",
        "feature_layer": "fc1 (penultimate fully-connected, relu)",
        "input_size": INPUT_SIZE,
        "d_img": d_img,
    }
    save_weights(path, "convnet", arrays, meta)
