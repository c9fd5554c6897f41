"""Extraction jobs: CSV manifest in, miverify-fpk/1 NDJSON out.

The manifest names one image path, image id, and caption per row; rows whose
image cannot be decoded are skipped with a logged id. Output row order
follows manifest order, and the NDJSON header records the produced dims plus
the exact extractor identities and hashes that made the numbers.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import pathlib
from dataclasses import dataclass

from .captions import CaptionFeatureExtractor
from .images import ImageFeatureExtractor
from .weights import file_sha256

logger = logging.getLogger(__name__)

FPK_FORMAT = "miverify-fpk/1"
MANIFEST_COLUMNS = ("image_path", "image_id", "caption")


class ManifestError(ValueError):
    """Malformed extraction manifest."""


@dataclass(frozen=True)
class ExtractionJob:
    manifest_path: str
    out_path: str
    image_weights: str
    text_weights: str
    image_weights_sha256: str | None = None
    text_weights_sha256: str | None = None
    batch_size: int = 32
    dataset_name: str = ""

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")


@dataclass
class ExtractionResult:
    out_path: str
    n_written: int
    skipped_ids: list
    d_img: int
    d_cap: int


def read_manifest(path):
    """Rows of (image_path, image_id, caption); image paths resolve against
    the manifest's own directory."""
    base = pathlib.Path(path).parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        cols = tuple(reader.fieldnames or ())
        missing = [c for c in MANIFEST_COLUMNS if c not in cols]
        if missing:
            raise ManifestError(f"{path}: manifest missing columns {missing}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            values = [row.get(c) for c in MANIFEST_COLUMNS]
            if any(v is None or v == "" for v in values):
                raise ManifestError(f"{path}: line {lineno}: empty field")
            img_path, image_id, caption = values
            rows.append((str(base / img_path), image_id, caption))
    if not rows:
        raise ManifestError(f"{path}: manifest has no data rows")
    return rows


def _format_vector(vec) -> str:
    return "[" + ",".join(format(x, ".17g") for x in vec) + "]"


def run_extraction(job: ExtractionJob) -> ExtractionResult:
    rows = read_manifest(job.manifest_path)
    image_x = ImageFeatureExtractor(job.image_weights, job.image_weights_sha256)
    text_x = CaptionFeatureExtractor(job.text_weights, job.text_weights_sha256)

    vectors, failed = image_x.extract_paths(
        [r[0] for r in rows], batch_size=job.batch_size
    )
    failed_set = set(failed)
    skipped_ids = []
    for i in sorted(failed_set):
        skipped_ids.append(rows[i][1])
        logger.warning("skipping %s: image %s not decodable", rows[i][1], rows[i][0])

    header = {
        "format": FPK_FORMAT,
        "d_img": image_x.d_img,
        "d_cap": text_x.d_cap,
        "name": job.dataset_name or pathlib.Path(job.manifest_path).stem,
        "extractor": {
            "image": {
                "id": image_x.meta.get("id", "unknown"),
                "sha256": job.image_weights_sha256 or file_sha256(job.image_weights),
                "feature_layer": image_x.meta.get("feature_layer", "unknown"),
                "input_size": image_x.meta.get("input_size"),
            },
            "text": {
                "id": text_x.meta.get("id", "unknown"),
                "sha256": job.text_weights_sha256 or file_sha256(job.text_weights),
            },
        },
    }

    n_written = 0
    vec_iter = iter(vectors)
    with open(job.out_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for i, (img_path, image_id, caption) in enumerate(rows):
            if i in failed_set:
                continue
            img_vec = next(vec_iter)
            cap_vec = text_x.extract(caption, caption_id=image_id)
            package_id = f"{image_id}-r{i:05d}"
            parts = [
                f'"package_id":{json.dumps(package_id)}',
                f'"image_id":{json.dumps(image_id)}',
                f'"caption":{json.dumps(caption)}',
                f'"image_features":{_format_vector(img_vec)}',
                f'"caption_features":{_format_vector(cap_vec)}',
                '"label":"clean"',
            ]
            fh.write("{" + ",".join(parts) + "}\n")
            n_written += 1
    return ExtractionResult(
        out_path=job.out_path,
        n_written=n_written,
        skipped_ids=skipped_ids,
        d_img=image_x.d_img,
        d_cap=text_x.d_cap,
    )


def job_from_dict(raw: dict) -> ExtractionJob:
    known = {f.name for f in dataclasses.fields(ExtractionJob)}
    unknown = set(raw) - known
    if unknown:
        raise ManifestError(f"unknown job keys: {sorted(unknown)}")
    return ExtractionJob(**raw)
