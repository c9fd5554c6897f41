"""
Feature packages: build, validate, split, tamper
================================================

A media package bundles one image's feature vector with its caption (text
plus an optional caption feature vector). This script builds a small dataset
by hand, checks its invariants, splits it, swaps captions to fake tampering,
and round-trips everything through the NDJSON file format.
"""

import pathlib
import tempfile

import numpy as np

from miverify import (
    FeatureDataset,
    Label,
    MediaPackage,
    SplitSpec,
    load_dataset,
    save_dataset,
    split_dataset,
    tamper,
    validate_dataset,
)

rng = np.random.default_rng(0)

# Twenty images, two captions each: packages sharing an image_id model the
# five-captions-per-image structure of the usual retrieval datasets.
packages = []
for img in range(20):
    img_feat = rng.normal(size=16)
    for c in range(2):
        packages.append(
            MediaPackage(
                package_id=f"pkg-{img:02d}-{c}",
                image_id=f"img-{img:02d}",
                caption_text=f"caption {c} describing scene {img}",
                image_features=img_feat,
                caption_features=rng.normal(size=8),
            )
        )
ds = FeatureDataset(tuple(packages), d_img=16, d_cap=8, name="demo")
print(f"dataset: {len(ds)} packages, d_img={ds.d_img}, d_cap={ds.d_cap}")

violations = validate_dataset(ds)
print(f"violations: {violations!r}")

# Splitting is grouped by image_id so that no image leaks across splits.
train, val, test = split_dataset(ds, SplitSpec(0.6, 0.2, 0.2, seed=1))
print(f"split sizes: {len(train)}/{len(val)}/{len(test)}")
shared = {p.image_id for p in train} & {p.image_id for p in test}
print(f"image ids shared between train and test: {sorted(shared)}")

# Tampering replaces captions of ceil(rate*n) packages with captions drawn
# from other images; labels record who was hit.
evil = tamper(test, rate=0.5, seed=2)
for p in evil:
    if p.label is Label.TAMPERED:
        print(f"{p.package_id}: now says {p.caption_text!r}")

with tempfile.TemporaryDirectory() as tmp:
    path = pathlib.Path(tmp) / "demo.fpk"
    save_dataset(evil, path)
    again = load_dataset(path)
    same = all(
        a.package_id == b.package_id
        and np.array_equal(a.image_features, b.image_features)
        for a, b in zip(evil, again)
    )
    print(f"round trip identical: {same}")
    print(f"file starts with: {path.read_text().splitlines()[0]}")
