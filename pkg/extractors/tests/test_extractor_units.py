"""Unit behavior of the image and caption extractors and the extraction job."""

import csv
import dataclasses
import json
import logging

import numpy as np
import pytest
from PIL import Image

from miverify_extractors import (
    CaptionFeatureExtractor,
    ExtractionJob,
    ImageFeatureExtractor,
    ManifestError,
    WeightsHashError,
    file_sha256,
    job_from_dict,
    load_image,
    make_default_convnet,
    make_default_wordvec,
    read_manifest,
    run_extraction,
    tokenize,
)
from miverify_extractors.cli import dispatch


def write_png(path, seed, size=(32, 32), tint=(0, 0, 0)):
    rng = np.random.default_rng(seed)
    arr = rng.integers(0, 200, size=(size[1], size[0], 3), dtype=np.uint8)
    arr = np.clip(arr.astype(np.int64) + np.array(tint), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)
    return path


@pytest.fixture(scope="module")
def image_weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "convnet.bin"
    make_default_convnet(path, d_img=24, seed=0)
    return path


@pytest.fixture(scope="module")
def text_weights(tmp_path_factory):
    path = tmp_path_factory.mktemp("w") / "wordvec.bin"
    tokens = ["red", "blue", "cat", "dog", "a", "photo", "of", "the", "7"]
    make_default_wordvec(path, tokens, d_cap=10, seed=1)
    return path


class TestImageExtractor:
    def test_vector_length_matches_d_img(self, image_weights, tmp_path):
        ext = ImageFeatureExtractor(image_weights)
        p = write_png(tmp_path / "a.png", seed=0)
        vecs, failed = ext.extract_paths([p])
        assert failed == []
        assert vecs.shape == (1, ext.d_img) == (1, 24)
        assert vecs.dtype == np.float64

    def test_identical_files_identical_vectors(self, image_weights, tmp_path):
        ext = ImageFeatureExtractor(image_weights)
        a = write_png(tmp_path / "a.png", seed=5)
        b = tmp_path / "b.png"
        b.write_bytes(a.read_bytes())
        vecs, _ = ext.extract_paths([a, b])
        assert np.array_equal(vecs[0], vecs[1])

    def test_fresh_instance_matches_reference(self, image_weights, tmp_path):
        p = write_png(tmp_path / "ref.png", seed=9)
        ref, _ = ImageFeatureExtractor(image_weights).extract_paths([p])
        new, _ = ImageFeatureExtractor(image_weights).extract_paths([p])
        cos = float(
            new[0] @ ref[0] / (np.linalg.norm(new[0]) * np.linalg.norm(ref[0]))
        )
        assert cos >= 0.999

    def test_batch_size_invariance(self, image_weights, tmp_path):
        ext = ImageFeatureExtractor(image_weights)
        paths = [write_png(tmp_path / f"{i}.png", seed=i) for i in range(7)]
        v1, _ = ext.extract_paths(paths, batch_size=2)
        v7, _ = ext.extract_paths(paths, batch_size=7)
        assert np.allclose(v1, v7, atol=1e-12)

    def test_non_square_images_resized(self, image_weights, tmp_path):
        ext = ImageFeatureExtractor(image_weights)
        p = write_png(tmp_path / "wide.png", seed=3, size=(48, 20))
        vecs, failed = ext.extract_paths([p])
        assert failed == [] and vecs.shape == (1, 24)

    def test_undecodable_file_reported_not_raised(self, image_weights, tmp_path):
        ext = ImageFeatureExtractor(image_weights)
        good = write_png(tmp_path / "good.png", seed=1)
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"this is not an image")
        vecs, failed = ext.extract_paths([good, bad, good])
        assert failed == [1]
        assert vecs.shape[0] == 2

    def test_hash_pin_enforced(self, image_weights):
        ImageFeatureExtractor(image_weights, expected_sha256=file_sha256(image_weights))
        with pytest.raises(WeightsHashError):
            ImageFeatureExtractor(image_weights, expected_sha256="f" * 64)

    def test_load_image_range_and_shape(self, tmp_path):
        p = write_png(tmp_path / "a.png", seed=2)
        arr = load_image(p)
        assert arr.shape == (32, 32, 3)
        assert arr.min() >= 0.0 and arr.max() <= 1.0


class TestCaptionExtractor:
    def test_tokenize_lowercases_and_splits_punctuation(self):
        assert tokenize("A red Cat, the DOG!") == ["a", "red", "cat", "the", "dog"]

    def test_single_token_equals_embedding_row(self, text_weights):
        ext = CaptionFeatureExtractor(text_weights)
        vec = ext.extract("cat")
        assert np.array_equal(vec, ext.vectors[ext.index["cat"]])

    def test_mean_of_known_tokens(self, text_weights):
        ext = CaptionFeatureExtractor(text_weights)
        vec = ext.extract("red cat")
        i, j = ext.index["red"], ext.index["cat"]
        assert np.allclose(vec, (ext.vectors[i] + ext.vectors[j]) / 2.0)

    def test_order_invariant(self, text_weights):
        ext = CaptionFeatureExtractor(text_weights)
        assert np.allclose(ext.extract("red cat photo"), ext.extract("photo red cat"))

    def test_oov_tokens_skipped(self, text_weights):
        ext = CaptionFeatureExtractor(text_weights)
        assert np.array_equal(ext.extract("cat zzzunknown"), ext.extract("cat"))

    def test_all_oov_zero_vector_with_warning(self, text_weights, caplog):
        ext = CaptionFeatureExtractor(text_weights)
        with caplog.at_level(logging.WARNING, logger="miverify_extractors.captions"):
            vec = ext.extract("zzz qqq", caption_id="p7")
        assert np.array_equal(vec, np.zeros(ext.d_cap))
        assert any("p7" in rec.getMessage() for rec in caplog.records)

    def test_vocabulary_sorted_and_deduped(self, tmp_path):
        path = tmp_path / "w.bin"
        make_default_wordvec(path, ["b", "a", "b", "c"], d_cap=4, seed=0)
        ext = CaptionFeatureExtractor(path)
        assert ext.meta["tokens"] == ["a", "b", "c"]

    def test_hash_pin_enforced(self, text_weights):
        CaptionFeatureExtractor(text_weights, expected_sha256=file_sha256(text_weights))
        with pytest.raises(WeightsHashError):
            CaptionFeatureExtractor(text_weights, expected_sha256="f" * 64)


def write_manifest(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_path", "image_id", "caption"])
        writer.writerows(rows)
    return path


class TestManifest:
    def test_paths_resolved_against_manifest_dir(self, tmp_path):
        write_png(tmp_path / "img.png", seed=0)
        m = write_manifest(tmp_path / "m.csv", [["img.png", "im0", "a cat"]])
        rows = read_manifest(m)
        assert rows == [(str(tmp_path / "img.png"), "im0", "a cat")]

    def test_missing_column_rejected(self, tmp_path):
        m = tmp_path / "m.csv"
        m.write_text("image_path,caption\na.png,hi\n")
        with pytest.raises(ManifestError, match="image_id"):
            read_manifest(m)

    def test_empty_field_names_line(self, tmp_path):
        m = write_manifest(
            tmp_path / "m.csv", [["a.png", "im0", "ok"], ["b.png", "", "ok"]]
        )
        with pytest.raises(ManifestError, match="line 3"):
            read_manifest(m)

    def test_empty_manifest_rejected(self, tmp_path):
        m = write_manifest(tmp_path / "m.csv", [])
        with pytest.raises(ManifestError, match="no data rows"):
            read_manifest(m)


@pytest.fixture
def small_job(tmp_path, image_weights, text_weights):
    rows = []
    for i in range(5):
        write_png(tmp_path / f"img{i}.png", seed=i, tint=(10 * i, 0, 0))
        rows.append([f"img{i}.png", f"im{i}", f"a photo of the {'cat' if i % 2 else 'dog'}"])
    manifest = write_manifest(tmp_path / "m.csv", rows)
    return ExtractionJob(
        manifest_path=manifest,
        out_path=tmp_path / "out.fpk",
        image_weights=image_weights,
        text_weights=text_weights,
        image_weights_sha256=file_sha256(image_weights),
        text_weights_sha256=file_sha256(text_weights),
        batch_size=2,
        dataset_name="unit/small",
    )


class TestRunExtraction:
    def test_counts_and_dims(self, small_job):
        result = run_extraction(small_job)
        assert result.n_written == 5
        assert result.skipped_ids == []
        assert result.d_img == 24 and result.d_cap == 10

    def test_rows_follow_manifest_order(self, small_job):
        run_extraction(small_job)
        lines = small_job.out_path.read_text().strip().split("\n")
        header = json.loads(lines[0])
        assert header["format"] == "miverify-fpk/1"
        assert header["d_img"] == 24 and header["d_cap"] == 10
        assert header["extractor"]["image"]["sha256"] == small_job.image_weights_sha256
        ids = [json.loads(line)["image_id"] for line in lines[1:]]
        assert ids == [f"im{i}" for i in range(5)]

    def test_rerun_byte_identical(self, small_job, tmp_path):
        run_extraction(small_job)
        first = small_job.out_path.read_bytes()
        run_extraction(small_job)
        assert small_job.out_path.read_bytes() == first

    def test_undecodable_row_skipped_and_logged(self, small_job, caplog):
        small_job.manifest_path.parent.joinpath("img3.png").write_bytes(b"junk")
        with caplog.at_level(logging.WARNING, logger="miverify_extractors.job"):
            result = run_extraction(small_job)
        assert result.n_written == 4
        assert result.skipped_ids == ["im3"]
        assert any("im3" in rec.getMessage() for rec in caplog.records)
        lines = small_job.out_path.read_text().strip().split("\n")
        assert len(lines) == 1 + 4

    def test_wrong_image_pin_raises(self, small_job):
        bad = dataclasses.replace(small_job, image_weights_sha256="0" * 64)
        with pytest.raises(WeightsHashError):
            run_extraction(bad)

    def test_job_from_dict_unknown_key(self):
        with pytest.raises(ManifestError, match="bogus"):
            job_from_dict({"manifest_path": "m.csv", "out_path": "o", "bogus": 1})


class TestCli:
    def test_success_exit_zero(self, small_job, capsys):
        code = dispatch(
            [
                "--manifest", str(small_job.manifest_path),
                "--out", str(small_job.out_path),
                "--image-weights", str(small_job.image_weights),
                "--text-weights", str(small_job.text_weights),
                "--image-sha256", small_job.image_weights_sha256,
                "--batch-size", "3",
            ]
        )
        assert code == 0
        assert small_job.out_path.exists()
        out = capsys.readouterr().out
        assert "5 packages" in out and "d_img=24" in out

    def test_missing_manifest_exit_two(self, small_job, capsys):
        code = dispatch(
            [
                "--manifest", "/nonexistent/m.csv",
                "--out", str(small_job.out_path),
                "--image-weights", str(small_job.image_weights),
                "--text-weights", str(small_job.text_weights),
            ]
        )
        assert code == 2
        assert "error" in capsys.readouterr().err.lower()

    def test_missing_required_flag_exit_two(self, capsys):
        assert dispatch(["--manifest", "m.csv"]) == 2
        capsys.readouterr()

    def test_help_exit_zero(self, capsys):
        assert dispatch(["--help"]) == 0
        assert "image_path" in capsys.readouterr().out
