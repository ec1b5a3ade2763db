import json
import shutil

import numpy as np
import pytest

from sandwich.cli import EXIT_IO, EXIT_OK, EXIT_PRIVACY, EXIT_VALIDATION, main
from sandwich.config import ConfigError, ExperimentConfig
from sandwich.experiment import prepare


@pytest.fixture(scope="module")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    assert main(["synth", "--preset", "beetl-mini", "--out", str(out)]) == EXIT_OK
    return out


def write_config(root, name, **changes):
    cfg = ExperimentConfig.load(root / "experiment.json")
    base = dict(backbone="shallow_conv", epochs=1, max_steps_per_epoch=2)
    cfg = cfg.replace(**{**base, **changes})
    path = root / name
    # keep dataset paths relative to the config file
    d = cfg.to_json()
    for e, orig in zip(d["datasets"], json.loads((root / "experiment.json").read_text())["datasets"]):
        e["path"] = orig["path"]
    path.write_text(json.dumps(d, indent=2))
    return path


@pytest.fixture(scope="module")
def trained(synth_dir):
    cfg = write_config(synth_dir, "multi.json", head="multi")
    out = synth_dir / "run_multi"
    assert main(["train", "--config", str(cfg), "--out", str(out)]) == EXIT_OK
    return cfg, out


class TestSynth:
    def test_layout(self, synth_dir):
        dirs = sorted(p.name for p in synth_dir.iterdir() if (p / "manifest.json").exists())
        assert dirs == ["src_bcic", "src_cho", "src_physio", "tgt_cybathlon"]
        assert (synth_dir / "synth_spec.json").exists()

    def test_same_seed_same_checksums(self, synth_dir, tmp_path):
        assert main(["synth", "--preset", "beetl-mini", "--out", str(tmp_path)]) == EXIT_OK
        for d in ("src_bcic", "tgt_cybathlon"):
            a = json.loads((synth_dir / d / "manifest.json").read_text())["blobs"]
            b = json.loads((tmp_path / d / "manifest.json").read_text())["blobs"]
            assert a == b

    def test_invalid_spec(self, synth_dir, tmp_path, capsys):
        spec = json.loads((synth_dir / "synth_spec.json").read_text())
        spec["datasets"][0]["n_subjects"] = 0
        (tmp_path / "bad.json").write_text(json.dumps(spec))
        code = main(["synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "o")])
        assert code == EXIT_VALIDATION
        assert "n_subjects" in capsys.readouterr().err

    def test_from_spec_file(self, synth_dir, tmp_path):
        code = main(["synth", "--config", str(synth_dir / "synth_spec.json"), "--out", str(tmp_path)])
        assert code == EXIT_OK
        a = json.loads((synth_dir / "src_cho" / "manifest.json").read_text())["blobs"]
        assert json.loads((tmp_path / "src_cho" / "manifest.json").read_text())["blobs"] == a


class TestConfig:
    def test_round_trip(self, synth_dir):
        cfg = ExperimentConfig.load(synth_dir / "experiment.json")
        again = ExperimentConfig.from_json(json.loads(cfg.dumps()))
        assert again == cfg

    def test_unknown_field(self, synth_dir):
        d = json.loads((synth_dir / "experiment.json").read_text())
        d["learning_rate"] = 0.1
        with pytest.raises(ConfigError, match="learning_rate"):
            ExperimentConfig.from_json(d)

    def test_two_targets(self, synth_dir):
        d = json.loads((synth_dir / "experiment.json").read_text())
        d["datasets"][0]["role"] = "target"
        with pytest.raises(ConfigError, match="target"):
            ExperimentConfig.from_json(d)


class TestTrain:
    def test_multi_report(self, trained):
        _, out = trained
        report = json.loads((out / "report.json").read_text())
        assert report["audit"]["label_bearing_messages"] == 0
        assert report["audit"]["violations"] == []
        assert report["checkpoint_written"] and (out / "checkpoints" / "server").is_dir()
        assert {"timestamp", "version"} <= set(report["header"])

    def test_unified_mmd_terms(self, synth_dir, tmp_path):
        cfg = write_config(synth_dir, "mmd.json", head="unified", transfer="mmd")
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["steps"] and all(len(s["mmd"]) == 2 * 3 for s in report["steps"])

    def test_zero_epochs(self, synth_dir, tmp_path):
        cfg = write_config(synth_dir, "zero.json", epochs=0)
        assert main(["train", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_OK
        report = json.loads((tmp_path / "report.json").read_text())
        assert report["epochs"] == [] and not report["checkpoint_written"]
        assert not (tmp_path / "checkpoints").exists()

    def test_missing_dataset(self, synth_dir, tmp_path):
        d = json.loads((synth_dir / "experiment.json").read_text())
        d["datasets"][0]["path"] = "nowhere"
        (tmp_path / "c.json").write_text(json.dumps(d))
        assert main(["train", "--config", str(tmp_path / "c.json"), "--out", str(tmp_path)]) == EXIT_IO


class TestEval:
    def test_oracle_predictions(self, trained, tmp_path):
        cfg, _ = trained
        labels = prepare(ExperimentConfig.load(cfg)).test["tgt_cybathlon"].labels
        (tmp_path / "p.json").write_text(json.dumps(labels.tolist()))
        out = tmp_path / "eval.json"
        assert main(["eval", "--config", str(cfg), "--predictions", str(tmp_path / "p.json"),
                     "--out", str(out)]) == EXIT_OK
        r = json.loads(out.read_text())["results"]["tgt_cybathlon"]
        assert r["accuracy"] == 1.0
        assert r["scoring"]["A"]["merged_weighted_accuracy"] == 1.0
        assert r["scoring"]["B"]["merged_weighted_accuracy"] == 1.0

    def test_checkpoint(self, trained, tmp_path):
        cfg, run = trained
        out = tmp_path / "eval.json"
        assert main(["eval", "--config", str(cfg), "--checkpoint", str(run / "checkpoints"),
                     "--out", str(out)]) == EXIT_OK
        r = json.loads(out.read_text())["results"]["tgt_cybathlon"]
        assert r["n_trials"] == 60 and 0 <= r["accuracy"] <= 1
        assert np.array(r["scoring"]["A"]["confusion"]).sum() == 60

    def test_missing_head(self, trained, tmp_path, capsys):
        cfg, run = trained
        ck = tmp_path / "ck"
        shutil.copytree(run / "checkpoints", ck)
        shutil.rmtree(ck / "node-tgt_cybathlon")
        code = main(["eval", "--config", str(cfg), "--checkpoint", str(ck)])
        assert code == EXIT_VALIDATION
        assert "tgt_cybathlon" in capsys.readouterr().err

    def test_bad_prediction_count(self, trained, tmp_path):
        cfg, _ = trained
        (tmp_path / "p.json").write_text("[0, 1]")
        assert main(["eval", "--config", str(cfg), "--predictions", str(tmp_path / "p.json"),
                     "--out", str(tmp_path / "e.json")]) == EXIT_VALIDATION


class TestExport:
    def test_pre_common(self, trained, tmp_path):
        cfg, run = trained
        out = tmp_path / "f.csv"
        assert main(["export", "--config", str(cfg), "--checkpoint", str(run / "checkpoints"),
                     "--tap", "pre_common", "--out", str(out)]) == EXIT_OK
        lines = out.read_text().splitlines()
        assert lines[0].startswith("trial_id,dataset_id,label,set_index,f0")
        ids = {l.split(",")[1] for l in lines[1:]}
        assert ids == {"src_bcic", "src_cho", "src_physio", "tgt_cybathlon"}
        # unbalanced trial counts: 3x60 + 4x50 + 6x40 + 3x120
        assert len(lines) - 1 == 180 + 200 + 240 + 360


class TestAudit:
    def test_clean_log(self, trained):
        _, run = trained
        assert main(["audit", "--log", str(run / "audit.ndjson")]) == EXIT_OK

    def test_tampered_log(self, trained, tmp_path, capsys):
        _, run = trained
        lines = (run / "audit.ndjson").read_text().splitlines()
        rec = json.loads(lines[1])
        rec["fields"].append("labels")
        rec["shapes"]["labels"] = rec["shapes"]["features"][:1]
        lines[1] = json.dumps(rec)
        (tmp_path / "a.ndjson").write_text("\n".join(lines) + "\n")
        assert main(["audit", "--log", str(tmp_path / "a.ndjson")]) == EXIT_PRIVACY
        assert "labels crossed the boundary" in capsys.readouterr().out

    def test_missing_log(self, tmp_path):
        assert main(["audit", "--log", str(tmp_path / "none.ndjson")]) == EXIT_IO
