"""CLI subcommands, flag precedence, and exit codes."""

import json
import shutil
import subprocess

import pytest

from miverify.cli import dispatch
from miverify.datamodel import Label, load_dataset, save_dataset
from miverify.harness import SyntheticSpec, make_synthetic

SPEC = SyntheticSpec(
    latent_dim=3, d_img=12, d_cap=8, n_train=120, n_val=30, n_test=60, vocab_size=12
)
MAE_TINY = {"hidden_dim": 12, "code_dim": 6, "epochs": 3, "batch_size": 32}


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    """Shared workspace: splits on disk, one trained model, one fitted detector."""
    root = tmp_path_factory.mktemp("cli")
    paths = {"root": root}
    for name, ds in zip(("train", "val", "test"), make_synthetic(SPEC)):
        paths[name] = str(root / f"{name}.fpk")
        save_dataset(ds, paths[name])

    paths["mae_cfg"] = str(root / "mae.json")
    with open(paths["mae_cfg"], "w") as fh:
        json.dump(MAE_TINY, fh)

    paths["model"] = str(root / "model.bin")
    rc = dispatch(
        [
            "train-embed",
            "--train", paths["train"],
            "--val", paths["val"],
            "--model-kind", "mae",
            "--config", paths["mae_cfg"],
            "--seed", "3",
            "--out", paths["model"],
        ]
    )
    assert rc == 0

    paths["odm"] = str(root / "detector.bin")
    rc = dispatch(
        [
            "fit-odm",
            "--model", paths["model"],
            "--train", paths["train"],
            "--odm-kind", "ocsvm",
            "--out", paths["odm"],
        ]
    )
    assert rc == 0
    return paths


class TestParsing:
    def test_help_exits_zero(self):
        assert dispatch(["--help"]) == 0

    def test_subcommand_help_exits_zero(self):
        assert dispatch(["evaluate", "--help"]) == 0

    def test_unknown_subcommand(self):
        assert dispatch(["frobnicate"]) == 2

    def test_unknown_flag(self):
        assert dispatch(["validate", "--bogus", "x"]) == 2

    def test_missing_required_flag(self):
        assert dispatch(["validate"]) == 2

    def test_missing_input_file(self, tmp_path):
        assert dispatch(["validate", "--in", str(tmp_path / "nope.fpk")]) == 2


class TestValidate:
    def test_clean_dataset_passes(self, work, capsys):
        assert dispatch(["validate", "--in", work["train"]]) == 0
        out = capsys.readouterr().out
        assert "ok: 120 packages" in out

    def test_malformed_line_names_line(self, tmp_path, capsys):
        path = tmp_path / "bad.fpk"
        with open(path, "w") as fh:
            fh.write('{"format":"miverify-fpk/1","d_img":2,"d_cap":2,"name":"x"}\n')
            fh.write("not json at all\n")
        assert dispatch(["validate", "--in", str(path)]) == 2
        assert "line 2" in capsys.readouterr().err

    def test_duplicate_ids_reported(self, tmp_path, capsys):
        path = tmp_path / "dup.fpk"
        row = (
            '{"package_id":"p1","image_id":"im1","caption":"a b",'
            '"image_features":[0.0,1.0],"caption_features":[0.5,0.5],"label":"clean"}\n'
        )
        with open(path, "w") as fh:
            fh.write('{"format":"miverify-fpk/1","d_img":2,"d_cap":2,"name":"x"}\n')
            fh.write(row)
            fh.write(row)
        assert dispatch(["validate", "--in", str(path)]) == 2
        assert "p1" in capsys.readouterr().err


class TestSynthSplitTamper:
    def test_synth_writes_three_files(self, tmp_path, capsys):
        spec_path = tmp_path / "spec.json"
        with open(spec_path, "w") as fh:
            json.dump(
                {"latent_dim": 3, "d_img": 12, "d_cap": 8,
                 "n_train": 40, "n_val": 10, "n_test": 20, "vocab_size": 12},
                fh,
            )
        out_dir = tmp_path / "synth"
        rc = dispatch(["synth", "--spec", str(spec_path), "--out-dir", str(out_dir)])
        assert rc == 0
        sizes = [len(load_dataset(out_dir / f"{n}.fpk")) for n in ("train", "val", "test")]
        assert sizes == [40, 10, 20]
        assert "[miverify] synth" in capsys.readouterr().err

    def test_split_partitions_dataset(self, work, tmp_path):
        out_dir = tmp_path / "parts"
        rc = dispatch(
            ["split", "--in", work["train"], "--out-dir", str(out_dir), "--seed", "4"]
        )
        assert rc == 0
        parts = [load_dataset(out_dir / f"{n}.fpk") for n in ("train", "val", "test")]
        assert sum(len(p) for p in parts) == 120
        ids = [p.package_id for part in parts for p in part]
        assert len(set(ids)) == 120

    def test_tamper_swaps_captions(self, work, tmp_path, capsys):
        out = tmp_path / "tampered.fpk"
        rc = dispatch(
            ["tamper", "--in", work["test"], "--out", str(out), "--tamper-rate", "0.5"]
        )
        assert rc == 0
        ds = load_dataset(out)
        n_tampered = sum(1 for p in ds if p.label is Label.TAMPERED)
        assert n_tampered == 30
        assert "30 tampered" in capsys.readouterr().out

    def test_tamper_bad_rate(self, work, tmp_path):
        out = tmp_path / "t.fpk"
        rc = dispatch(
            ["tamper", "--in", work["test"], "--out", str(out), "--tamper-rate", "2.0"]
        )
        assert rc == 2


class TestModelPipeline:
    def test_model_file_written(self, work):
        with open(work["model"], "rb") as fh:
            header = json.loads(fh.readline())
        assert header["format"] == "miverify-model/1"
        assert header["model_kind"] == "mae"

    def test_seed_flag_overrides_config(self, work, tmp_path, capsys):
        cfg = dict(MAE_TINY, seed=5, epochs=1)
        cfg_path = tmp_path / "m.json"
        with open(cfg_path, "w") as fh:
            json.dump(cfg, fh)
        rc = dispatch(
            [
                "train-embed",
                "--train", work["train"],
                "--model-kind", "mae",
                "--config", str(cfg_path),
                "--seed", "9",
                "--out", str(tmp_path / "m.bin"),
            ]
        )
        assert rc == 0
        assert '"seed": 9' in capsys.readouterr().err

    def test_bad_config_key_rejected(self, work, tmp_path, capsys):
        cfg_path = tmp_path / "m.json"
        with open(cfg_path, "w") as fh:
            json.dump({"no_such_knob": 1}, fh)
        rc = dispatch(
            [
                "train-embed",
                "--train", work["train"],
                "--config", str(cfg_path),
                "--out", str(tmp_path / "m.bin"),
            ]
        )
        assert rc == 2
        assert "no_such_knob" in capsys.readouterr().err

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_exits_three(self, work, tmp_path, capsys):
        cfg_path = tmp_path / "hot.json"
        # step size big enough to overflow float64 in the next forward pass
        with open(cfg_path, "w") as fh:
            json.dump(dict(MAE_TINY, learning_rate=1e160, epochs=2), fh)
        rc = dispatch(
            [
                "train-embed",
                "--train", work["train"],
                "--model-kind", "mae",
                "--config", str(cfg_path),
                "--out", str(tmp_path / "m.bin"),
            ]
        )
        assert rc == 3
        assert "diverged" in capsys.readouterr().err

    def test_score_ndjson(self, work, tmp_path):
        out = tmp_path / "scores.ndjson"
        rc = dispatch(
            ["score", "--model", work["model"], "--in", work["test"], "--out", str(out)]
        )
        assert rc == 0
        lines = [json.loads(l) for l in open(out)]
        assert len(lines) == 60
        assert all(list(l) == ["package_id", "iccs"] for l in lines)
        assert all(isinstance(l["iccs"], float) for l in lines)

    def test_score_to_stdout(self, work, capsys):
        rc = dispatch(["score", "--model", work["model"], "--in", work["test"]])
        assert rc == 0
        lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        assert len(lines) == 60

    def test_assess_verdict_lines(self, work, tmp_path):
        tampered = tmp_path / "tampered.fpk"
        assert dispatch(["tamper", "--in", work["test"], "--out", str(tampered)]) == 0
        out = tmp_path / "verdicts.ndjson"
        rc = dispatch(
            [
                "assess",
                "--model", work["model"],
                "--odm", work["odm"],
                "--in", str(tampered),
                "--out", str(out),
            ]
        )
        assert rc == 0
        lines = [json.loads(l) for l in open(out)]
        assert len(lines) == 60
        assert all(list(l) == ["package_id", "iccs", "verdict"] for l in lines)
        assert all(l["verdict"] in ("inlier", "outlier") for l in lines)
        assert any(l["verdict"] == "outlier" for l in lines)

    def test_assess_deterministic(self, work, tmp_path):
        outs = []
        for name in ("a", "b"):
            out = tmp_path / f"{name}.ndjson"
            rc = dispatch(
                [
                    "assess",
                    "--model", work["model"],
                    "--odm", work["odm"],
                    "--in", work["test"],
                    "--out", str(out),
                ]
            )
            assert rc == 0
            outs.append(open(out).read())
        assert outs[0] == outs[1]


@pytest.fixture(scope="module")
def exp_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("eval")
    cfg = {
        "model_kinds": ["mae"],
        "odm_kinds": ["ocsvm", "iforest"],
        "synthetic": {
            "latent_dim": 3, "d_img": 12, "d_cap": 8,
            "n_train": 120, "n_val": 30, "n_test": 60, "vocab_size": 12,
        },
        "model_configs": {"mae": MAE_TINY},
        "seed": 2,
    }
    path = root / "exp.json"
    with open(path, "w") as fh:
        json.dump(cfg, fh)
    return str(path)


class TestEvaluate:
    def test_table_and_report(self, exp_config, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        rc = dispatch(["evaluate", "--config", exp_config, "--out", str(report_path)])
        assert rc == 0
        out = capsys.readouterr().out
        assert "f1_tampered/f1_clean" in out
        assert "mae" in out
        doc = json.loads(open(report_path).read())
        assert doc["format"] == "miverify-report/1"
        assert {c["odm_kind"] for c in doc["cells"]} == {"ocsvm", "iforest"}

    def test_report_bytes_stable(self, exp_config, tmp_path):
        contents = []
        for name in ("r1.json", "r2.json"):
            path = tmp_path / name
            assert dispatch(["evaluate", "--config", exp_config, "--out", str(path)]) == 0
            contents.append(open(path, "rb").read())
        assert contents[0] == contents[1]

    def test_odm_kind_flag_restricts_grid(self, exp_config, tmp_path, capsys):
        report_path = tmp_path / "report.json"
        rc = dispatch(
            [
                "evaluate",
                "--config", exp_config,
                "--odm-kind", "iforest",
                "--out", str(report_path),
            ]
        )
        assert rc == 0
        doc = json.loads(open(report_path).read())
        assert {c["odm_kind"] for c in doc["cells"]} == {"iforest"}

    def test_seed_flag_changes_report(self, exp_config, tmp_path):
        docs = []
        for seed in ("2", "3"):
            path = tmp_path / f"r{seed}.json"
            rc = dispatch(
                ["evaluate", "--config", exp_config, "--seed", seed, "--out", str(path)]
            )
            assert rc == 0
            docs.append(json.loads(open(path).read()))
        assert docs[0]["config"]["seed"] == 2
        assert docs[1]["config"]["seed"] == 3

    def test_master_seed_logged(self, exp_config, tmp_path, capsys):
        rc = dispatch(["evaluate", "--config", exp_config])
        assert rc == 0
        err = capsys.readouterr().err
        assert "[miverify] evaluate" in err
        assert '"seed": 2' in err


@pytest.mark.skipif(shutil.which("miverify") is None, reason="console script not on PATH")
def test_console_script_help():
    proc = subprocess.run(
        ["miverify", "--help"], capture_output=True, text=True, timeout=60
    )
    assert proc.returncode == 0
    assert "assess" in proc.stdout
