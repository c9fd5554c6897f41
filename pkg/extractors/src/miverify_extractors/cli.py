"""miverify-extract: manifest CSV -> feature package NDJSON."""

from __future__ import annotations

import argparse
import logging
import sys

from .job import ExtractionJob, ManifestError, run_extraction
from .weights import WeightsError


def dispatch(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="miverify-extract",
        description=(
            "Extract image and caption feature vectors for every manifest row "
            "and write a miverify-fpk/1 file."
        ),
    )
    parser.add_argument("--manifest", required=True,
                        help="CSV with columns image_path, image_id, caption")
    parser.add_argument("--out", required=True, help="output .fpk path")
    parser.add_argument("--image-weights", required=True)
    parser.add_argument("--image-sha256", default=None,
                        help="pin for the image weights file")
    parser.add_argument("--text-weights", required=True)
    parser.add_argument("--text-sha256", default=None,
                        help="pin for the word embedding file")
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--name", default="", help="dataset name for the header")
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    try:
        job = ExtractionJob(
            manifest_path=args.manifest,
            out_path=args.out,
            image_weights=args.image_weights,
            text_weights=args.text_weights,
            image_weights_sha256=args.image_sha256,
            text_weights_sha256=args.text_sha256,
            batch_size=args.batch_size,
            dataset_name=args.name,
        )
        result = run_extraction(job)
    except (ManifestError, WeightsError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(
        f"{result.out_path}: {result.n_written} packages "
        f"(d_img={result.d_img}, d_cap={result.d_cap}, "
        f"skipped {len(result.skipped_ids)})"
    )
    return 0


def run() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    run()
