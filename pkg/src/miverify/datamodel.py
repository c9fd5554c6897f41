"""Domain types and file plumbing for image-caption feature packages.

A *media package* bundles one image and one caption, each already reduced to
a fixed-length feature vector. A :class:`FeatureDataset` is an ordered
collection of packages with consistent dimensions; the trusted reference
dataset that models are fitted on is one of these. This module also owns the
NDJSON package file format, image-grouped splitting, and the caption-swap
tamper generator used to build evaluation sets.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

FPK_FORMAT = "miverify-fpk/1"

__all__ = [
    "FPK_FORMAT",
    "Label",
    "MediaPackage",
    "FeatureDataset",
    "SplitSpec",
    "ConfigError",
    "TamperError",
    "DatasetFormatError",
    "validate_dataset",
    "split_dataset",
    "tamper",
    "load_dataset",
    "save_dataset",
]


class Label(enum.Enum):
    """Ground-truth tamper status of a package."""

    CLEAN = "clean"
    TAMPERED = "tampered"
    UNKNOWN = "unknown"


class ConfigError(ValueError):
    """Invalid configuration value (fractions, rates, kinds)."""


class TamperError(ValueError):
    """A tamper request cannot be satisfied on the given dataset."""


class DatasetFormatError(ValueError):
    """A feature-package file violates the miverify-fpk/1 format."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


def _frozen_vector(values) -> np.ndarray:
    arr = np.array(values, dtype=np.float64).reshape(-1)
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True, eq=False)
class MediaPackage:
    """One image-caption pair, stored as precomputed feature vectors.

    ``caption_text`` may be empty when only features are supplied;
    ``caption_features`` may be absent for text-only pipelines. Feature
    arrays are copied to read-only float64 vectors at construction.
    """

    package_id: str
    image_id: str
    caption_text: str
    image_features: np.ndarray
    caption_features: np.ndarray | None = None
    label: Label = Label.UNKNOWN

    def __post_init__(self):
        object.__setattr__(self, "image_features", _frozen_vector(self.image_features))
        if self.caption_features is not None:
            object.__setattr__(
                self, "caption_features", _frozen_vector(self.caption_features)
            )

    def __eq__(self, other) -> bool:
        if not isinstance(other, MediaPackage):
            return NotImplemented
        if (
            self.package_id != other.package_id
            or self.image_id != other.image_id
            or self.caption_text != other.caption_text
            or self.label is not other.label
        ):
            return False
        if not np.array_equal(self.image_features, other.image_features):
            return False
        if (self.caption_features is None) != (other.caption_features is None):
            return False
        if self.caption_features is not None and not np.array_equal(
            self.caption_features, other.caption_features
        ):
            return False
        return True


@dataclass(frozen=True, eq=False)
class FeatureDataset:
    """Ordered collection of packages with declared feature dimensions."""

    packages: tuple[MediaPackage, ...]
    d_img: int
    d_cap: int
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "packages", tuple(self.packages))

    def __len__(self) -> int:
        return len(self.packages)

    def __iter__(self):
        return iter(self.packages)

    def __getitem__(self, idx: int) -> MediaPackage:
        return self.packages[idx]

    def __eq__(self, other) -> bool:
        if not isinstance(other, FeatureDataset):
            return NotImplemented
        return (
            self.d_img == other.d_img
            and self.d_cap == other.d_cap
            and self.name == other.name
            and len(self.packages) == len(other.packages)
            and all(a == b for a, b in zip(self.packages, other.packages))
        )


@dataclass(frozen=True)
class SplitSpec:
    """Fractions and seed for an image-grouped train/val/test split."""

    train_fraction: float
    val_fraction: float
    test_fraction: float
    seed: int = 0

    def __post_init__(self):
        fracs = (self.train_fraction, self.val_fraction, self.test_fraction)
        if any(f < 0 for f in fracs):
            raise ConfigError(f"split fractions must be nonnegative, got {fracs}")
        if abs(sum(fracs) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {sum(fracs)}")


def validate_dataset(ds: FeatureDataset) -> list[str]:
    """Check every dataset and package invariant.

    Returns an empty list iff the dataset is well-formed. Each violation is a
    human-readable string naming the offending package_id (or the dataset
    itself) and the broken rule. Violations are data, not faults: nothing is
    raised here.
    """
    violations: list[str] = []
    if ds.d_img <= 0:
        violations.append(f"dataset {ds.name!r}: d_img must be positive, got {ds.d_img}")
    if ds.d_cap <= 0:
        violations.append(f"dataset {ds.name!r}: d_cap must be positive, got {ds.d_cap}")

    seen: set[str] = set()
    for pkg in ds:
        pid = pkg.package_id
        if pid in seen:
            violations.append(f"{pid}: duplicate package_id")
        seen.add(pid)

        img = pkg.image_features
        if img.size == 0:
            violations.append(f"{pid}: image_features is empty")
        elif not np.isfinite(img).all():
            violations.append(f"{pid}: image_features contains non-finite values")
        if img.size != 0 and img.size != ds.d_img:
            violations.append(
                f"{pid}: image_features length {img.size} != d_img {ds.d_img}"
            )

        cap = pkg.caption_features
        if cap is not None:
            if not np.isfinite(cap).all():
                violations.append(f"{pid}: caption_features contains non-finite values")
            if cap.size != ds.d_cap:
                violations.append(
                    f"{pid}: caption_features length {cap.size} != d_cap {ds.d_cap}"
                )
    return violations


def _image_groups(ds: FeatureDataset) -> list[list[int]]:
    # groups in order of first appearance, so the permutation seed is the
    # only source of randomness
    order: dict[str, list[int]] = {}
    for idx, pkg in enumerate(ds):
        order.setdefault(pkg.image_id, []).append(idx)
    return list(order.values())


def split_dataset(
    ds: FeatureDataset, spec: SplitSpec
) -> tuple[FeatureDataset, FeatureDataset, FeatureDataset]:
    """Partition ``ds`` into train/val/test without splitting image groups.

    All packages sharing an image_id land in the same subset, so split sizes
    match the requested fractions only up to one image-group granularity.
    Deterministic for a fixed seed; package order within each subset follows
    the original dataset order.
    """
    groups = _image_groups(ds)
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(len(groups))

    n = len(ds)
    t_train = n * spec.train_fraction
    t_val = n * (spec.train_fraction + spec.val_fraction)

    membership = np.empty(n, dtype=np.int8)
    assigned = 0
    for gi in perm:
        group = groups[gi]
        if assigned < t_train - 1e-9:
            dest = 0
        elif assigned < t_val - 1e-9:
            dest = 1
        else:
            dest = 2
        for idx in group:
            membership[idx] = dest
        assigned += len(group)

    subsets = []
    for dest, suffix in enumerate(("train", "val", "test")):
        picked = tuple(pkg for idx, pkg in enumerate(ds) if membership[idx] == dest)
        subset_name = f"{ds.name}/{suffix}" if ds.name else suffix
        subsets.append(FeatureDataset(picked, ds.d_img, ds.d_cap, subset_name))
    return subsets[0], subsets[1], subsets[2]


def _valid_assignment(
    perm: np.ndarray, selected: list[int], ds: FeatureDataset
) -> bool:
    for t, src in enumerate(perm):
        if src == t:
            return False
        recipient = ds[selected[t]]
        donor = ds[selected[src]]
        if donor.image_id == recipient.image_id:
            return False
        # same text from a different package is still the original caption
        if donor.caption_text == recipient.caption_text and donor.caption_text:
            return False
    return True


def tamper(ds: FeatureDataset, rate: float, seed: int = 0) -> FeatureDataset:
    """Replace the captions of ``ceil(rate * n)`` packages with other captions.

    The selected packages' captions (text and caption_features together) are
    permuted by a derangement restricted to the selected subset: no selected
    package keeps its own caption and none receives a caption from a package
    with the same image_id. Selected packages are labeled tampered, the rest
    clean. Deterministic for a fixed seed.
    """
    if not 0 < rate <= 1:
        raise ConfigError(f"tamper rate must be in (0, 1], got {rate}")
    n = len(ds)
    if n < 2:
        raise TamperError(f"need at least 2 packages to tamper, got {n}")
    if len({pkg.image_id for pkg in ds}) < 2:
        raise TamperError("need at least 2 distinct image_ids to tamper")

    rng = np.random.default_rng(seed)
    k = math.ceil(rate * n)
    if k < 2:
        k = 2  # a 1-element subset admits no derangement; grow it by one
    selected = sorted(int(i) for i in rng.choice(n, size=k, replace=False))

    perm = None
    while perm is None:
        for _ in range(1000):
            candidate = rng.permutation(len(selected))
            if _valid_assignment(candidate, selected, ds):
                perm = candidate
                break
        else:
            remaining = sorted(set(range(n)) - set(selected))
            if not remaining:
                raise TamperError(
                    "no caption permutation satisfies the derangement constraints"
                )
            extra = int(rng.choice(len(remaining)))
            selected = sorted(selected + [remaining[extra]])

    donor_of = {selected[t]: selected[int(src)] for t, src in enumerate(perm)}
    packages = []
    for idx, pkg in enumerate(ds):
        if idx in donor_of:
            donor = ds[donor_of[idx]]
            packages.append(
                replace(
                    pkg,
                    caption_text=donor.caption_text,
                    caption_features=donor.caption_features,
                    label=Label.TAMPERED,
                )
            )
        else:
            packages.append(replace(pkg, label=Label.CLEAN))
    return FeatureDataset(tuple(packages), ds.d_img, ds.d_cap, ds.name)


def _format_vector(arr: np.ndarray) -> str:
    # 17 significant digits round-trip any binary64 exactly
    return "[" + ",".join(format(x, ".17g") for x in arr) + "]"


def save_dataset(ds: FeatureDataset, path) -> None:
    """Write ``ds`` as a miverify-fpk/1 NDJSON file."""
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        header = {
            "format": FPK_FORMAT,
            "d_img": ds.d_img,
            "d_cap": ds.d_cap,
            "name": ds.name,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for pkg in ds:
            cap = (
                _format_vector(pkg.caption_features)
                if pkg.caption_features is not None
                else "null"
            )
            parts = [
                f'"package_id":{json.dumps(pkg.package_id)}',
                f'"image_id":{json.dumps(pkg.image_id)}',
                f'"caption":{json.dumps(pkg.caption_text)}',
                f'"image_features":{_format_vector(pkg.image_features)}',
                f'"caption_features":{cap}',
                f'"label":"{pkg.label.value}"',
            ]
            fh.write("{" + ",".join(parts) + "}\n")


def _parse_header(line: str) -> tuple[int, int, str]:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetFormatError(f"malformed header JSON: {exc.msg}", line=1) from exc
    if not isinstance(header, dict) or header.get("format") != FPK_FORMAT:
        raise DatasetFormatError(
            f"missing or unsupported format tag (expected {FPK_FORMAT!r})", line=1
        )
    d_img = header.get("d_img")
    d_cap = header.get("d_cap")
    if not isinstance(d_img, int) or d_img <= 0:
        raise DatasetFormatError(f"d_img must be a positive integer, got {d_img!r}", line=1)
    if not isinstance(d_cap, int) or d_cap <= 0:
        raise DatasetFormatError(f"d_cap must be a positive integer, got {d_cap!r}", line=1)
    name = header.get("name", "")
    if not isinstance(name, str):
        raise DatasetFormatError(f"name must be a string, got {name!r}", line=1)
    return d_img, d_cap, name


def _parse_package(obj: dict, d_img: int, d_cap: int, lineno: int) -> MediaPackage:
    for key in ("package_id", "image_id", "caption", "image_features"):
        if key not in obj:
            raise DatasetFormatError(f"missing field {key!r}", line=lineno)
    img = obj["image_features"]
    if not isinstance(img, list) or len(img) != d_img:
        raise DatasetFormatError(
            f"image_features length {len(img) if isinstance(img, list) else '?'} "
            f"!= d_img {d_img}",
            line=lineno,
        )
    cap = obj.get("caption_features")
    if cap is not None:
        if not isinstance(cap, list) or len(cap) != d_cap:
            raise DatasetFormatError(
                f"caption_features length {len(cap) if isinstance(cap, list) else '?'} "
                f"!= d_cap {d_cap}",
                line=lineno,
            )
    raw_label = obj.get("label", "unknown")
    try:
        label = Label(raw_label)
    except ValueError:
        raise DatasetFormatError(f"unknown label {raw_label!r}", line=lineno) from None
    try:
        return MediaPackage(
            package_id=str(obj["package_id"]),
            image_id=str(obj["image_id"]),
            caption_text=str(obj["caption"]),
            image_features=np.asarray(img, dtype=np.float64),
            caption_features=None if cap is None else np.asarray(cap, dtype=np.float64),
            label=label,
        )
    except (TypeError, ValueError) as exc:
        raise DatasetFormatError(f"bad feature values: {exc}", line=lineno) from exc


def load_dataset(path) -> FeatureDataset:
    """Read a miverify-fpk/1 NDJSON file.

    Raises :class:`DatasetFormatError` naming the offending line number on
    malformed JSON or a feature-dimension mismatch. A file holding only the
    header line yields an empty dataset with the declared dimensions.
    """
    path = Path(path)
    packages: list[MediaPackage] = []
    with path.open("r", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.strip():
            raise DatasetFormatError("missing header line", line=1)
        d_img, d_cap, name = _parse_header(first)
        for lineno, raw in enumerate(fh, start=2):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise DatasetFormatError(
                    f"malformed JSON: {exc.msg}", line=lineno
                ) from exc
            if not isinstance(obj, dict):
                raise DatasetFormatError("package line is not a JSON object", line=lineno)
            packages.append(_parse_package(obj, d_img, d_cap, lineno))
    return FeatureDataset(tuple(packages), d_img, d_cap, name)
