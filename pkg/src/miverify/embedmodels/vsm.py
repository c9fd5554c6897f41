"""Visual-semantic embedding: cosine agreement in a shared joint space.

Captions run token-by-token through an LSTM read off at the last step, then
project into the joint space; image features project directly. Both sides are
L2-normalized and trained with a bidirectional in-batch hinge ranking loss, so
the score is the cosine between the two embeddings (clipped to [-1, 1]).

Unlike the reconstruction models this one consumes caption *text*, so it needs
a vocabulary built from the reference dataset.
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
    lstm_batch_backward,
    lstm_batch_forward,
)
from .common import (
    IccsValue,
    check_package_dims,
    l2_normalize,
    l2_normalize_backward,
    minibatch_indices,
    stacked_features,
)
from .vocab import Vocabulary, build_vocab

SCORE_BATCH = 256


@dataclass(frozen=True)
class VsmConfig:
    embed_dim: int = 128
    hidden_dim: int = 256
    joint_dim: int = 256
    margin: float = 0.2
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 1e-3
    seed: int = 0
    min_count: int = 1
    patience: int | None = None

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")


def _build_params(d_img: int, vocab_size: int, cfg: VsmConfig) -> ParameterSet:
    e, h, j = cfg.embed_dim, cfg.hidden_dim, cfg.joint_dim
    p = ParameterSet(seed=cfg.seed)
    p.add("embed", vocab_size, e)
    p.add("lstm_w_x", e, 4 * h)
    p.add("lstm_w_h", h, 4 * h)
    p.add("lstm_b", 1, 4 * h, init="zeros")
    p.add("cap_w", h, j)
    p.add("cap_b", 1, j, init="zeros")
    p.add("img_w", d_img, j)
    p.add("img_b", 1, j, init="zeros")
    return p


def _pad_tokens(token_rows: list[np.ndarray]):
    lengths = np.array([len(r) for r in token_rows], dtype=np.int64)
    t_max = int(lengths.max())
    idx = np.zeros((len(token_rows), t_max), dtype=np.int64)
    for i, row in enumerate(token_rows):
        idx[i, : len(row)] = row
    return idx, lengths


def _hinge_terms(s: np.ndarray, margin: float):
    """Bidirectional in-batch ranking loss on a similarity matrix.

    Positives sit on the diagonal. Every off-diagonal entry serves twice as a
    negative (once per anchor side), giving 2*B*(B-1) hinge terms.
    """
    b = s.shape[0]
    if b < 2:
        raise ValueError("need at least 2 pairs for in-batch ranking")
    diag = np.diag(s).copy()
    off = ~np.eye(b, dtype=bool)
    l_img = np.maximum(0.0, margin - diag[:, None] + s)
    l_cap = np.maximum(0.0, margin - diag[None, :] + s)
    n_terms = 2 * b * (b - 1)
    loss = (l_img[off].sum() + l_cap[off].sum()) / n_terms
    act_img = (l_img > 0) & off
    act_cap = (l_cap > 0) & off
    d_s = (act_img.astype(np.float64) + act_cap.astype(np.float64)) / n_terms
    rows = np.arange(b)
    d_s[rows, rows] -= (act_img.sum(axis=1) + act_cap.sum(axis=0)) / n_terms
    return float(loss), d_s


class VsmModel:
    kind = "vsm"

    def __init__(self, params: ParameterSet, d_img: int, vocab: Vocabulary, config: VsmConfig):
        self.params = params
        self.d_img = d_img
        self.d_cap = None
        self.vocab = vocab
        self.config = config
        self.loss_history: list[float] = []
        self.val_loss_history: list[float] = []

    def _encode_images(self, images: np.ndarray):
        p, cache = affine_forward(
            images, self.params.value("img_w"), self.params.value("img_b"), "linear"
        )
        u, norm_cache = l2_normalize(p)
        return u, (cache, norm_cache)

    def _encode_images_backward(self, d_u: np.ndarray, caches) -> None:
        affine_cache, norm_cache = caches
        d_p = l2_normalize_backward(d_u, norm_cache)
        _, dw, db = affine_backward(d_p, affine_cache)
        self.params.add_grad("img_w", dw)
        self.params.add_grad("img_b", db)

    def _encode_captions(self, token_rows: list[np.ndarray]):
        idx, lengths = _pad_tokens(token_rows)
        emb = self.params.value("embed")[idx]
        h_last, lstm_cache = lstm_batch_forward(
            emb,
            lengths,
            self.params.value("lstm_w_x"),
            self.params.value("lstm_w_h"),
            self.params.value("lstm_b"),
        )
        p, affine_cache = affine_forward(
            h_last, self.params.value("cap_w"), self.params.value("cap_b"), "linear"
        )
        u, norm_cache = l2_normalize(p)
        return u, (idx, lstm_cache, affine_cache, norm_cache)

    def _encode_captions_backward(self, d_u: np.ndarray, caches) -> None:
        idx, lstm_cache, affine_cache, norm_cache = caches
        d_p = l2_normalize_backward(d_u, norm_cache)
        d_h, dw, db = affine_backward(d_p, affine_cache)
        self.params.add_grad("cap_w", dw)
        self.params.add_grad("cap_b", db)
        d_emb, dw_x, dw_h, d_b = lstm_batch_backward(d_h, lstm_cache)
        self.params.add_grad("lstm_w_x", dw_x)
        self.params.add_grad("lstm_w_h", dw_h)
        self.params.add_grad("lstm_b", d_b)
        d_embed = np.zeros_like(self.params.value("embed"))
        np.add.at(d_embed, idx.ravel(), d_emb.reshape(-1, d_emb.shape[2]))
        self.params.add_grad("embed", d_embed)

    def batch_loss(self, images: np.ndarray, token_rows: list[np.ndarray]) -> float:
        """In-batch ranking loss; accumulates grads in params."""
        u_img, img_caches = self._encode_images(images)
        u_cap, cap_caches = self._encode_captions(token_rows)
        loss, d_s = _hinge_terms(u_img @ u_cap.T, self.config.margin)
        self._encode_images_backward(d_s @ u_cap, img_caches)
        self._encode_captions_backward(d_s.T @ u_img, cap_caches)
        return loss

    def eval_loss(self, images: np.ndarray, token_rows: list[np.ndarray]) -> float:
        u_img, _ = self._encode_images(images)
        u_cap, _ = self._encode_captions(token_rows)
        loss, _ = _hinge_terms(u_img @ u_cap.T, self.config.margin)
        return loss

    def _pair_scores(self, images: np.ndarray, token_rows: list[np.ndarray]) -> np.ndarray:
        u_img, _ = self._encode_images(images)
        u_cap, _ = self._encode_captions(token_rows)
        return np.clip(np.sum(u_img * u_cap, axis=1), -1.0, 1.0)

    def scores(self, ds: FeatureDataset) -> np.ndarray:
        images, _ = stacked_features(ds, require_captions=False)
        if images.shape[1] != self.d_img:
            raise ValueError(
                f"dataset d_img {images.shape[1]} does not match model d_img {self.d_img}"
            )
        token_rows = [self.vocab.encode(pkg.caption_text) for pkg in ds]
        out = np.empty(len(ds))
        for start in range(0, len(ds), SCORE_BATCH):
            stop = start + SCORE_BATCH
            out[start:stop] = self._pair_scores(images[start:stop], token_rows[start:stop])
        return out

    def iccs(self, pkg: MediaPackage) -> IccsValue:
        check_package_dims(pkg, self.d_img, None)
        value = self._pair_scores(
            pkg.image_features[None, :], [self.vocab.encode(pkg.caption_text)]
        )[0]
        return IccsValue(float(value), self.kind)

    def header(self) -> dict:
        return {"config": asdict(self.config), "vocab": self.vocab.tokens()}


def vsm_train(
    rd: FeatureDataset, config: VsmConfig, val: FeatureDataset | None = None
) -> VsmModel:
    if len(rd) < 2:
        raise ValueError("vsm training needs at least 2 packages")
    images, _ = stacked_features(rd, require_captions=False)
    vocab = build_vocab(rd, min_count=config.min_count)
    model = VsmModel(
        _build_params(images.shape[1], len(vocab), config), images.shape[1], vocab, config
    )
    token_rows = [vocab.encode(pkg.caption_text) for pkg in rd]
    adam = AdamState(model.params, lr=config.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    val_data = None
    if val is not None and len(val) >= 2:
        val_images, _ = stacked_features(val, require_captions=False)
        val_rows = [vocab.encode(pkg.caption_text) for pkg in val]
        val_data = (val_images, val_rows)
    best_val, since_best = np.inf, 0
    n = len(rd)
    for epoch in range(config.epochs):
        total, terms = 0.0, 0
        for idx in minibatch_indices(n, config.batch_size, shuffle_rng):
            if len(idx) < 2:
                continue
            model.params.zero_grads()
            loss = model.batch_loss(images[idx], [token_rows[i] for i in idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError(f"vsm: non-finite loss at epoch {epoch}")
            adam_step(model.params, adam)
            k = 2 * len(idx) * (len(idx) - 1)
            total += loss * k
            terms += k
        model.loss_history.append(total / max(terms, 1))
        if val_data is not None:
            v_images, v_rows = val_data
            v_total, v_terms = 0.0, 0
            for start in range(0, len(v_rows), config.batch_size):
                stop = start + config.batch_size
                chunk = v_rows[start:stop]
                if len(chunk) < 2:
                    continue
                v = model.eval_loss(v_images[start:stop], chunk)
                k = 2 * len(chunk) * (len(chunk) - 1)
                v_total += v * k
                v_terms += k
            v_loss = v_total / max(v_terms, 1)
            model.val_loss_history.append(v_loss)
            if v_loss < best_val - 1e-12:
                best_val, since_best = v_loss, 0
            else:
                since_best += 1
                if config.patience is not None and since_best > config.patience:
                    break
    return model
