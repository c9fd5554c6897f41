"""Weight container files: named float64 arrays behind a hash pin.

One file holds one model's arrays plus a metadata dict describing exactly
what the arrays are (architecture, layer names, token list, ...). Loaders
can demand a sha256 pin so a job config fully determines the numbers that
produced its output.
"""

from __future__ import annotations

import hashlib
import json

import numpy as np

WEIGHTS_FORMAT = "miverify-weights/1"


class WeightsError(ValueError):
    """Malformed weight container."""


class WeightsHashError(WeightsError):
    """Container content does not match the pinned sha256."""


def save_weights(path, kind: str, arrays: dict, meta: dict | None = None) -> None:
    """Write arrays as one JSON header line plus contiguous float64 blobs."""
    names = sorted(arrays)
    header = {
        "format": WEIGHTS_FORMAT,
        "kind": kind,
        "meta": meta or {},
        "arrays": [{"name": n, "shape": list(arrays[n].shape)} for n in names],
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for n in names:
            fh.write(np.ascontiguousarray(arrays[n], dtype=np.float64).tobytes())


def file_sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def load_weights(path, expected_sha256: str | None = None):
    """Read a container; returns (kind, arrays, meta).

    With ``expected_sha256`` given, the whole file is hashed first and a
    mismatch raises WeightsHashError before any array is used.
    """
    if expected_sha256 is not None:
        actual = file_sha256(path)
        if actual != expected_sha256.lower():
            raise WeightsHashError(
                f"{path}: sha256 {actual} does not match pinned {expected_sha256}"
            )
    with open(path, "rb") as fh:
        try:
            header = json.loads(fh.readline().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise WeightsError(f"{path}: malformed header line: {exc}") from exc
        if not isinstance(header, dict) or header.get("format") != WEIGHTS_FORMAT:
            raise WeightsError(
                f"{path}: missing or unsupported format tag (expected {WEIGHTS_FORMAT!r})"
            )
        arrays = {}
        for entry in header.get("arrays", []):
            shape = tuple(int(s) for s in entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise WeightsError(f"{path}: truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(shape).copy()
        if fh.read(1):
            raise WeightsError(f"{path}: trailing bytes after declared arrays")
    return header["kind"], arrays, header.get("meta", {})
