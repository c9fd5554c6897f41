"""Acceptance gate for the whole pipeline.

Each test covers one hard requirement and prints a single PASS/FAIL line with
its measured numbers, visible regardless of pytest's capture mode. A failure
here means the requirement is not met; nothing is loosened to force green.
"""

import contextlib
import itertools
import json
import sys
import time

import numpy as np
import pytest

from miverify.cli import dispatch
from miverify.datamodel import (
    FeatureDataset,
    Label,
    MediaPackage,
    load_dataset,
    save_dataset,
    tamper,
)
from miverify.embedmodels import (
    BidnnConfig,
    MaeConfig,
    VsmConfig,
    load_model,
    save_model,
    score_dataset,
    train_model,
)
from miverify.harness import ExperimentConfig, SyntheticSpec, make_synthetic, run_experiment
from miverify.neuralnet import finite_diff_grad_check
from miverify.odm import (
    OdmConfig,
    anomaly_score,
    avg_path_length_c,
    iforest_fit,
    iforest_scores,
    load_odm,
    ocsvm_decisions,
    ocsvm_dual_objective,
    odm_fit_on_scores,
    rbf_kernel,
    ocsvm_fit,
    save_odm,
)


@contextlib.contextmanager
def criterion(name):
    """Print one [PASS]/[FAIL] line per requirement on the real stdout."""
    t0 = time.monotonic()
    detail = {}
    try:
        yield detail
    except BaseException:
        print(
            f"[FAIL] {name} ({time.monotonic() - t0:.1f}s)",
            file=sys.__stdout__,
            flush=True,
        )
        raise
    extra = f" -- {detail['note']}" if "note" in detail else ""
    print(
        f"[PASS] {name} ({time.monotonic() - t0:.1f}s){extra}",
        file=sys.__stdout__,
        flush=True,
    )


def _toy_dataset(n, seed, d_img, d_cap, k):
    """Latent-mixed features plus quantized caption text, for gradient checks."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(k, d_img))
    b = rng.normal(size=(k, d_cap))
    pkgs = []
    for i in range(n):
        z = rng.normal(size=k)
        words = " ".join(f"t{j}b{min(3, max(0, int(z[j] + 2)))}" for j in range(k))
        pkgs.append(
            MediaPackage(
                f"p{i:03d}",
                f"im{i:03d}",
                words,
                z @ a + rng.normal(scale=0.05, size=d_img),
                z @ b + rng.normal(scale=0.05, size=d_cap),
            )
        )
    return FeatureDataset(tuple(pkgs), d_img, d_cap, name="grad-toy")


def _jitter(params, seed, scale=0.05):
    # move coordinates off exact relu kinks before finite differencing
    rng = np.random.default_rng(seed)
    for _, v, _ in params.owner_items():
        v += rng.normal(scale=scale, size=v.shape)


def test_gradient_fidelity():
    """Analytic gradients match central finite differences to < 1e-6."""
    with criterion("gradient fidelity (all three embedding models)") as detail:
        t0 = time.monotonic()
        rng = np.random.default_rng(2026)
        worst = {"mae": 0.0, "bidnn": 0.0, "vsm": 0.0}
        for trial in range(2):
            k = int(rng.integers(2, 4))
            d_img = int(rng.integers(5, 9))
            d_cap = int(rng.integers(3, 7))
            ds = _toy_dataset(6, int(rng.integers(1 << 30)), d_img, d_cap, k)
            images = np.stack([p.image_features for p in ds])
            captions = np.stack([p.caption_features for p in ds])

            mae = train_model(
                "mae",
                ds,
                MaeConfig(
                    hidden_dim=int(rng.integers(5, 10)),
                    code_dim=int(rng.integers(3, 6)),
                    epochs=1,
                    seed=int(rng.integers(1 << 30)),
                ),
            )
            _jitter(mae.params, seed=trial)
            assert all(v.dtype == np.float64 for _, v, _ in mae.params.owner_items())
            worst["mae"] = max(
                worst["mae"],
                finite_diff_grad_check(
                    lambda: mae.batch_loss(images, captions), mae.params
                ),
            )

            bidnn = train_model(
                "bidnn",
                ds,
                BidnnConfig(
                    hidden_dim=int(rng.integers(5, 10)),
                    code_dim=int(rng.integers(3, 6)),
                    epochs=1,
                    seed=int(rng.integers(1 << 30)),
                    tie_mode="transpose",
                ),
            )
            assert bidnn.params.aliases(), "weight tying must be active"
            _jitter(bidnn.params, seed=trial)
            worst["bidnn"] = max(
                worst["bidnn"],
                finite_diff_grad_check(
                    lambda: bidnn.batch_loss(images, captions), bidnn.params
                ),
            )

            vsm = train_model(
                "vsm",
                ds,
                VsmConfig(
                    embed_dim=int(rng.integers(3, 6)),
                    hidden_dim=int(rng.integers(4, 7)),
                    joint_dim=int(rng.integers(4, 8)),
                    epochs=1,
                    seed=int(rng.integers(1 << 30)),
                ),
            )
            rows = [vsm.vocab.encode(p.caption_text) for p in ds]
            worst["vsm"] = max(
                worst["vsm"],
                finite_diff_grad_check(
                    lambda: vsm.batch_loss(images, rows), vsm.params
                ),
            )

        elapsed = time.monotonic() - t0
        for kind, err in worst.items():
            assert err < 1e-6, f"{kind}: max relative error {err:.3e} >= 1e-6"
        assert elapsed < 60.0, f"gradient checks took {elapsed:.1f}s >= 60s"
        detail["note"] = (
            "max rel err "
            + ", ".join(f"{k} {v:.2e}" for k, v in worst.items())
        )


def test_synthetic_end_to_end():
    """Full grid on the default synthetic benchmark clears the F1 bars."""
    with criterion("synthetic end-to-end (grid F1 bars)") as detail:
        spec = SyntheticSpec()
        assert (spec.latent_dim, spec.d_img, spec.d_cap) == (8, 64, 32)
        assert (spec.n_train, spec.n_val, spec.n_test) == (2000, 200, 400)
        assert spec.noise == 0.05
        cfg = ExperimentConfig(synthetic=spec)
        assert cfg.tamper_rate == 0.5
        t0 = time.monotonic()
        report = run_experiment(cfg)
        elapsed = time.monotonic() - t0
        notes = []
        for ok in ("ocsvm", "iforest"):
            vsm = report.cell("vsm", ok)
            mae = report.cell("mae", ok)
            assert vsm.f1_tampered >= 0.85, (
                f"vsm x {ok}: f1_tampered {vsm.f1_tampered:.3f} < 0.85"
            )
            assert vsm.f1_clean >= 0.85, (
                f"vsm x {ok}: f1_clean {vsm.f1_clean:.3f} < 0.85"
            )
            assert vsm.f1_tampered >= mae.f1_tampered, (
                f"{ok}: vsm {vsm.f1_tampered:.3f} < mae {mae.f1_tampered:.3f}"
            )
            notes.append(f"{ok} vsm {vsm.f1_tampered:.3f}/{vsm.f1_clean:.3f}")
        assert elapsed < 600.0, f"grid took {elapsed:.1f}s >= 10 min"
        detail["note"] = "; ".join(notes) + f", {elapsed:.0f}s"


def _grid_min_dual(x, nu, steps):
    """Brute-force minimum of the dual objective on the constraint simplex."""
    n = len(x)
    c = 1.0 / (nu * n)
    gamma = 1.0 / (2.0 * max(float(np.var(x)), 1e-12))
    kernel = rbf_kernel(x, x, gamma)
    axes = [np.linspace(0.0, c, steps)] * (n - 1)
    grids = np.meshgrid(*axes, indexing="ij")
    head = np.stack([g.ravel() for g in grids], axis=1)
    last = 1.0 - head.sum(axis=1)
    keep = (last >= 0.0) & (last <= c)
    alphas = np.column_stack([head[keep], last[keep]])
    objectives = 0.5 * np.einsum("mi,ij,mj->m", alphas, kernel, alphas)
    return float(objectives.min()), gamma


def test_ocsvm_solver():
    """SMO matches brute force on tiny duals; the nu fraction property holds."""
    with criterion("one-class SVM (dual optimum + nu property)") as detail:
        rng = np.random.default_rng(99)
        gaps = []
        for n, steps in ((3, 600), (4, 120)):
            x = rng.normal(size=(n, 2))
            grid_min, gamma = _grid_min_dual(x, nu=0.5, steps=steps)
            m = ocsvm_fit(x, nu=0.5, gamma=gamma)
            smo = ocsvm_dual_objective(m.alpha, rbf_kernel(m.support_vectors, m.support_vectors, gamma))
            gap = abs(smo - grid_min)
            assert gap <= 1e-4, f"n={n}: |smo - grid| = {gap:.2e} > 1e-4"
            gaps.append(gap)

        pts = np.random.default_rng(5).normal(size=(500, 1))
        fracs = []
        for nu in (0.05, 0.1, 0.2):
            m = ocsvm_fit(pts, nu=nu)
            frac = float(np.mean(ocsvm_decisions(m, pts) < 0.0))
            assert abs(frac - nu) <= 0.05, f"nu={nu}: outlier fraction {frac:.3f}"
            fracs.append(frac)
        detail["note"] = (
            f"dual gaps {gaps[0]:.1e}/{gaps[1]:.1e}, "
            "outlier fractions " + "/".join(f"{f:.3f}" for f in fracs)
        )


def test_iforest_calibration():
    """Path-length normalizer, score fixed point, outlier ranking, threading."""
    with criterion("isolation forest (calibration + determinism)") as detail:
        c256 = float(avg_path_length_c(256))
        assert abs(c256 - 10.2448) <= 1e-3, f"c(256) = {c256}"
        assert float(anomaly_score(avg_path_length_c(256), 256)) == 0.5
        assert float(anomaly_score(avg_path_length_c(64), 64)) == 0.5

        hits = 0
        for seed in range(100):
            rng = np.random.default_rng(seed)
            pts = np.vstack([rng.normal(size=(60, 2)), [[9.0, 9.0]]])
            forest = iforest_fit(pts, seed=seed)
            hits += int(np.argmax(iforest_scores(forest, pts)) == 60)
        assert hits >= 95, f"planted outlier ranked top-1 in only {hits}/100 seeds"

        pts = np.random.default_rng(17).normal(size=(300, 3))
        f1 = iforest_fit(pts, seed=7, threads=1)
        f4 = iforest_fit(pts, seed=7, threads=4)
        for ta, tb in zip(f1.trees, f4.trees):
            assert np.array_equal(ta.feature, tb.feature)
            # leaf nodes store NaN thresholds
            assert np.array_equal(ta.threshold, tb.threshold, equal_nan=True)
            assert np.array_equal(ta.left, tb.left) and np.array_equal(ta.right, tb.right)
            assert np.array_equal(ta.size, tb.size)
        assert np.array_equal(iforest_scores(f1, pts), iforest_scores(f4, pts))
        detail["note"] = f"c(256) {c256:.5f}, planted top-1 {hits}/100"


def test_tamper_derangement():
    """Caption swaps never fix a point or borrow from the same image."""
    with criterion("tamper generator (derangement across 1000 seeds)") as detail:
        rng = np.random.default_rng(0)
        pkgs = []
        for i in range(12):
            pkgs.append(
                MediaPackage(
                    f"p{i:02d}",
                    f"im{i // 2:02d}",  # every image id shared by two packages
                    f"caption number {i} about image {i // 2}",
                    rng.normal(size=4),
                    rng.normal(size=3),
                )
            )
        ds = FeatureDataset(tuple(pkgs), 4, 3, name="derangement")
        original_caption = {p.package_id: p.caption_text for p in ds}
        by_caption = {p.caption_text: p for p in ds}

        for seed in range(1000):
            out = tamper(ds, 0.5, seed=seed)
            tampered = [p for p in out if p.label is Label.TAMPERED]
            clean = [p for p in out if p.label is Label.CLEAN]
            assert len(tampered) == 6 and len(clean) == 6, f"seed {seed}: label counts"
            for p in clean:
                assert p.caption_text == original_caption[p.package_id]
            for p in tampered:
                assert p.caption_text != original_caption[p.package_id], (
                    f"seed {seed}: fixed point at {p.package_id}"
                )
                donor = by_caption[p.caption_text]
                assert donor.image_id != p.image_id, (
                    f"seed {seed}: same-image donor for {p.package_id}"
                )
        # distinct image ids: ceil(rate*n) selection is always feasible
        distinct = FeatureDataset(
            tuple(
                MediaPackage(f"q{i}", f"solo{i}", f"text {i}", rng.normal(size=4),
                             rng.normal(size=3))
                for i in range(12)
            ),
            4, 3, name="distinct",
        )
        counts = [
            sum(p.label is Label.TAMPERED for p in tamper(distinct, rate, seed=1))
            for rate in (0.25, 0.5, 1.0)
        ]
        assert counts == [3, 6, 12], f"label counts off: {counts}"
        detail["note"] = "1000 seeds, zero fixed points, zero same-image donors"


def test_report_determinism(tmp_path):
    """Two identical evaluate runs emit byte-identical report JSON."""
    with criterion("report determinism (evaluate twice, one seed)") as detail:
        exp = {
            "model_kinds": ["mae"],
            "odm_kinds": ["ocsvm", "iforest"],
            "synthetic": {
                "latent_dim": 3, "d_img": 12, "d_cap": 8,
                "n_train": 120, "n_val": 30, "n_test": 60, "vocab_size": 12,
            },
            "model_configs": {"mae": {"hidden_dim": 12, "code_dim": 6, "epochs": 3}},
            "seed": 1,
        }
        cfg_path = tmp_path / "exp.json"
        with open(cfg_path, "w") as fh:
            json.dump(exp, fh)
        blobs = []
        for name in ("r1.json", "r2.json"):
            out = tmp_path / name
            rc = dispatch(["evaluate", "--config", str(cfg_path), "--out", str(out)])
            assert rc == 0
            blobs.append(open(out, "rb").read())
        assert blobs[0] == blobs[1], "report JSON bytes differ between runs"
        doc = json.loads(blobs[0])
        assert doc["format"] == "miverify-report/1"
        detail["note"] = f"{len(blobs[0])} bytes, identical"


def test_file_format_round_trip(tmp_path):
    """Every on-disk format survives save->load->save; bad lines are named."""
    with criterion("file formats (round trip + error line numbers)") as detail:
        spec = SyntheticSpec(
            latent_dim=3, d_img=10, d_cap=6, n_train=40, n_val=8, n_test=12, vocab_size=12
        )
        train, _, _ = make_synthetic(spec)

        p1, p2 = tmp_path / "a.fpk", tmp_path / "b.fpk"
        save_dataset(train, p1)
        loaded = load_dataset(p1)
        save_dataset(loaded, p2)
        assert open(p1, "rb").read() == open(p2, "rb").read()
        for orig, back in zip(train, loaded):
            assert orig.package_id == back.package_id
            assert orig.caption_text == back.caption_text
            assert orig.label is back.label
            assert np.array_equal(orig.image_features, back.image_features)
            assert np.array_equal(orig.caption_features, back.caption_features)

        model = train_model("mae", train, MaeConfig(hidden_dim=8, code_dim=4, epochs=2))
        m1, m2 = tmp_path / "m1.bin", tmp_path / "m2.bin"
        save_model(model, m1)
        save_model(load_model(m1), m2)
        assert open(m1, "rb").read() == open(m2, "rb").read()

        scores = score_dataset(model, train)
        for kind in ("ocsvm", "iforest"):
            det = odm_fit_on_scores(scores, kind, OdmConfig(seed=3))
            o1, o2 = tmp_path / f"{kind}1.bin", tmp_path / f"{kind}2.bin"
            save_odm(det, o1)
            save_odm(load_odm(o1), o2)
            assert open(o1, "rb").read() == open(o2, "rb").read()

        bad = tmp_path / "bad.fpk"
        lines = open(p1, encoding="utf-8").read().splitlines()
        lines[2] = '{"package_id": "broken"'
        bad.write_text("\n".join(lines) + "\n")
        with pytest.raises(Exception) as exc_info:
            load_dataset(bad)
        assert "line 3" in str(exc_info.value), f"error does not name line 3: {exc_info.value}"
        detail["note"] = "fpk/model/detector formats byte-stable"
