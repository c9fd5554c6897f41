"""Embedding models that turn an image-caption package into a consistency score.

Three interchangeable model kinds behind one contract (train on a reference
dataset, then score packages): a shared-code autoencoder over both feature
vectors ("mae"), a tied bidirectional cross-modal translator ("bidnn"), and a
cosine-scored visual-semantic embedding over caption text ("vsm").
"""

from __future__ import annotations

import json

from ..datamodel import DatasetFormatError
from ..neuralnet import read_parameters, write_parameters
from .bidnn import BidnnConfig, BidnnModel, bidnn_train
from .common import MODEL_KINDS, IccsValue, score_dataset
from .mae import MaeConfig, MaeModel, mae_train
from .vocab import Vocabulary, build_vocab, tokenize
from .vsm import VsmConfig, VsmModel, vsm_train

MODEL_FORMAT = "miverify-model/1"

__all__ = [
    "MODEL_KINDS",
    "MODEL_FORMAT",
    "IccsValue",
    "score_dataset",
    "MaeConfig",
    "MaeModel",
    "mae_train",
    "BidnnConfig",
    "BidnnModel",
    "bidnn_train",
    "VsmConfig",
    "VsmModel",
    "vsm_train",
    "Vocabulary",
    "build_vocab",
    "tokenize",
    "train_model",
    "save_model",
    "load_model",
]

_CONFIG_TYPES = {"mae": MaeConfig, "bidnn": BidnnConfig, "vsm": VsmConfig}
_TRAINERS = {"mae": mae_train, "bidnn": bidnn_train, "vsm": vsm_train}


def train_model(kind: str, rd, config=None, val=None):
    """Train a model of the given kind; config defaults to the kind's defaults."""
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if config is None:
        config = _CONFIG_TYPES[kind]()
    return _TRAINERS[kind](rd, config, val=val)


def save_model(model, path) -> None:
    """One JSON header line, then the binary parameter block."""
    header = {
        "format": MODEL_FORMAT,
        "model_kind": model.kind,
        "d_img": model.d_img,
        "d_cap": model.d_cap,
        "loss_history": model.loss_history,
        "val_loss_history": model.val_loss_history,
    }
    header.update(model.header())
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        write_parameters(model.params, fh)


def load_model(path):
    with open(path, "rb") as fh:
        raw = fh.readline()
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise DatasetFormatError(f"bad model header: {exc}", line=1) from exc
        if header.get("format") != MODEL_FORMAT:
            raise DatasetFormatError(
                f"unsupported model format {header.get('format')!r}", line=1
            )
        kind = header.get("model_kind")
        if kind not in MODEL_KINDS:
            raise DatasetFormatError(f"unknown model kind {kind!r}", line=1)
        params = read_parameters(fh)
    config = _CONFIG_TYPES[kind](**header["config"])
    if kind == "vsm":
        vocab = Vocabulary(header["vocab"])
        model = VsmModel(params, int(header["d_img"]), vocab, config)
    elif kind == "mae":
        model = MaeModel(params, int(header["d_img"]), int(header["d_cap"]), config)
    else:
        model = BidnnModel(params, int(header["d_img"]), int(header["d_cap"]), config)
    model.loss_history = list(header.get("loss_history", []))
    model.val_loss_history = list(header.get("val_loss_history", []))
    return model
