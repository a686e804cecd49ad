"""
End-to-end tests of the command-line surface on small synthetic data.
"""
import json

import numpy as np
import pytest

from connlearn.cli import main
from connlearn.storage.checkpoint import load_checkpoint
from connlearn.storage.datasets import read_matrix_csv

TINY_FLAGS = [
    "--iterations", "1", "--heads", "2", "--states", "2", "--hidden", "4",
    "--te-bins", "3", "--batch-size", "4", "--lr", "0.01",
]


@pytest.fixture
def labeled_dir(tmp_path):
    out = tmp_path / "labeled"
    assert main(["--quiet", "synth", "--subjects", "8", "--rois", "5", "--timepoints", "30", "--seed", "3", "--out", str(out)]) == 0
    return out


@pytest.fixture
def pretrained(tmp_path, labeled_dir):
    ckpt = tmp_path / "ckpt"
    code = main(["--quiet", "pretrain", "--data", str(labeled_dir), "--out", str(ckpt), "--epochs", "2", *TINY_FLAGS])
    assert code == 0
    return ckpt


def test_synth_writes_dataset_and_is_byte_stable(tmp_path):
    args = ["synth", "--subjects", "60", "--rois", "16", "--timepoints", "200", "--classes", "2", "--seed", "7"]
    assert main([*args, "--out", str(tmp_path / "a")]) == 0
    assert main([*args, "--out", str(tmp_path / "b")]) == 0
    csvs = sorted((tmp_path / "a" / "subjects").glob("*.csv"))
    assert len(csvs) == 60
    manifest = json.loads((tmp_path / "a" / "manifest.json").read_text())
    assert manifest["n_regions"] == 16 and manifest["labeled"]
    for path in csvs:
        assert path.read_bytes() == (tmp_path / "b" / "subjects" / path.name).read_bytes()
    assert (tmp_path / "a" / "manifest.json").read_bytes() == (tmp_path / "b" / "manifest.json").read_bytes()


def test_synth_rejects_three_classes(tmp_path):
    code = main(["synth", "--subjects", "4", "--rois", "4", "--timepoints", "20", "--classes", "3", "--out", str(tmp_path)])
    assert code == 2


def test_pretrain_outputs(tmp_path, pretrained):
    ckpt = load_checkpoint(pretrained)
    assert ckpt.manifest.stage == "pretrained"
    assert ckpt.manifest.config["epochs"] == 2
    # fields not given on the command line keep their defaults
    assert ckpt.manifest.config["gamma"] == 0.01
    assert ckpt.manifest.encoder == "multi-state-gcn (stand-in)"
    log = (tmp_path / "ckpt-train.jsonl").read_text().splitlines()
    assert len(log) == 2
    assert [json.loads(line)["epoch"] for line in log] == [1, 2]
    assert not [p for p in tmp_path.iterdir() if ".tmp-" in p.name]


def test_pretrain_config_file_and_flag_precedence(tmp_path, labeled_dir):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"epochs": 1, "alpha": 0.5, "hidden": 4}))
    out = tmp_path / "ck"
    code = main(["--quiet", "pretrain", "--data", str(labeled_dir), "--config", str(cfg), "--out", str(out),
                 "--alpha", "0.25", "--iterations", "1", "--heads", "2", "--states", "2", "--te-bins", "3"])
    assert code == 0
    config = load_checkpoint(out).manifest.config
    assert (config["epochs"], config["alpha"], config["hidden"]) == (1, 0.25, 4)


def test_finetune_results_json(tmp_path, labeled_dir, pretrained):
    out = tmp_path / "results.json"
    code = main(["--quiet", "finetune", "--data", str(labeled_dir), "--ckpt", str(pretrained), "--folds", "2",
                 "--finetune-epochs", "2", "--out", str(out), "--save-folds", str(tmp_path / "folds")])
    assert code == 0
    results = json.loads(out.read_text())
    assert len(results["folds"]) == 2
    assert {"acc", "sen", "spe", "auc"} <= set(results["aggregate"])
    assert results["aggregate"]["acc"]["formatted"].endswith(")")
    assert results["checkpoint_sha256"] == load_checkpoint(pretrained).sha256
    assert results["config"]["hidden"] == 4

    fold_ckpt = tmp_path / "folds" / "fold-0"
    assert load_checkpoint(fold_ckpt).manifest.stage == "finetuned"
    again = main(["--quiet", "finetune", "--data", str(labeled_dir), "--ckpt", str(fold_ckpt), "--folds", "2",
                  "--out", str(tmp_path / "nope.json")])
    assert again == 2
    assert not (tmp_path / "nope.json").exists()


def test_pretrain_and_finetune_reruns_are_byte_identical(tmp_path, labeled_dir):
    for run in ("a", "b"):
        ckpt = tmp_path / run / "ckpt"
        assert main(["--quiet", "pretrain", "--data", str(labeled_dir), "--out", str(ckpt), "--epochs", "2", *TINY_FLAGS]) == 0
        assert main(["--quiet", "finetune", "--data", str(labeled_dir), "--ckpt", str(ckpt), "--folds", "2",
                     "--finetune-epochs", "2", "--out", str(tmp_path / run / "results.json")]) == 0
    for rel in ("ckpt/params.bin", "ckpt/manifest.json", "ckpt-train.jsonl", "results.json"):
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel


def test_finetune_needs_checkpoint_or_scratch(tmp_path, labeled_dir):
    code = main(["--quiet", "finetune", "--data", str(labeled_dir), "--out", str(tmp_path / "r.json")])
    assert code == 2
    code = main(["--quiet", "finetune", "--data", str(labeled_dir), "--from-scratch", "--folds", "2",
                 "--finetune-epochs", "1", "--out", str(tmp_path / "r.json"), *TINY_FLAGS])
    assert code == 0
    assert json.loads((tmp_path / "r.json").read_text())["from_scratch"]


def test_export_graph(tmp_path, labeled_dir, pretrained, capsys):
    out = tmp_path / "ec.csv"
    code = main(["export-graph", "--ckpt", str(pretrained), "--data", str(labeled_dir), "--subject", "sub-0001",
                 "--view", "ec", "--iteration", "1", "--out", str(out)])
    assert code == 0
    matrix = read_matrix_csv(out)
    assert matrix.shape == (5, 5)
    sums = matrix.sum(axis=1)
    assert np.all((np.abs(sums - 1) <= 1e-9) | (sums == 0))
    assert np.all(np.diag(matrix) == 0)

    code = main(["export-graph", "--ckpt", str(pretrained), "--data", str(labeled_dir), "--subject", "sub-9999",
                 "--out", str(tmp_path / "x.csv")])
    assert code == 1
    assert "sub-9999" in capsys.readouterr().err
    code = main(["export-graph", "--ckpt", str(pretrained), "--data", str(labeled_dir), "--subject", "sub-0001",
                 "--iteration", "7", "--out", str(tmp_path / "x.csv")])
    assert code == 2


def test_export_prior(tmp_path, labeled_dir):
    out = tmp_path / "pearson.csv"
    assert main(["export-prior", "--data", str(labeled_dir), "--subject", "sub-0000", "--out", str(out)]) == 0
    pearson = read_matrix_csv(out)
    np.testing.assert_allclose(pearson, pearson.T, atol=1e-12)
    out = tmp_path / "te.csv"
    assert main(["export-prior", "--data", str(labeled_dir), "--subject", "sub-0000", "--kind", "transfer_entropy",
                 "--bins", "3", "--out", str(out)]) == 0
    assert read_matrix_csv(out).min() >= 0.0


def test_missing_input_exits_nonzero(tmp_path, capsys):
    code = main(["pretrain", "--data", str(tmp_path / "absent"), "--out", str(tmp_path / "c"), "--epochs", "1"])
    assert code == 1
    assert "absent" in capsys.readouterr().err


def test_gradcheck_command(tmp_path, capsys):
    out = tmp_path / "grad.json"
    assert main(["gradcheck", "--scale", "tiny", "--seed", "2", "--out", str(out)]) == 0
    report = json.loads(out.read_text())
    entries = report["reports"][0]["entries"]
    assert all("max_rel_error" in e and "parameter" in e for e in entries)

    code = main(["gradcheck", "--scale", "tiny", "--corrupt", "encoders.ec.b2"])
    assert code == 1
    assert "encoders.ec.b2" in capsys.readouterr().err


def test_ablate_command(tmp_path, labeled_dir):
    out = tmp_path / "ablation.json"
    code = main(["--quiet", "ablate", "--pretrain-data", str(labeled_dir), "--data", str(labeled_dir),
                 "--seeds", "0", "--variants", "full", "single_state", "--epochs", "1", "--finetune-epochs", "1",
                 "--folds", "2", "--out", str(out), *TINY_FLAGS])
    assert code == 0
    report = json.loads(out.read_text())
    assert [v["variant"] for v in report["variants"]] == ["full", "single_state"]
    assert all(v["seeds"] == [0] for v in report["variants"])
    assert main(["ablate", "--pretrain-data", str(labeled_dir), "--data", str(labeled_dir),
                 "--variants", "bogus", "--out", str(out)]) == 2
