import csv
import json
import shutil
import subprocess
import sys
import wave

import numpy as np
import pytest

from brainaudio.cli import main
from conftest import run_pipeline, tiny_config_file, tree_bytes


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = tiny_config_file(root / "config.json")
    out = root / "out"
    run_pipeline(out, cfg)
    return out, cfg


def test_layout(workspace):
    out, _ = workspace
    for rel in ("bundle/manifest.json", "dataset/manifest.json", "semantic/manifest.json",
                "acoustic/c2f-p0.25/manifest.json", "ldm/fine-p0.25/manifest.json",
                "recon/c2f-p0.25-none/index.json", "reports/compare.json", "reports/compare.csv",
                "reports/prompt_sweep.json", "reports/probe.json", "plots/methods.svg", "plots/tsne_semantic.json"):
        assert (out / rel).exists(), rel


def test_generate_is_idempotent(workspace, capsys):
    out, cfg = workspace
    before = tree_bytes(out / "dataset")
    assert main(["generate", "--config", str(cfg), "--out", str(out)]) == 0
    assert tree_bytes(out / "dataset") == before


def test_evaluate_before_reconstruct(tmp_path, workspace, capsys):
    out, cfg = workspace
    fresh = tmp_path / "fresh"
    for stage in ("bundle", "dataset", "semantic", "acoustic", "ldm"):
        shutil.copytree(out / stage, fresh / stage)
    assert main(["evaluate", "--config", str(cfg), "--out", str(fresh)]) == 1
    assert "run reconstruct" in capsys.readouterr().err


def test_missing_upstream_names_stage(tmp_path, capsys):
    assert main(["train-semantic", "--out", str(tmp_path)]) == 1
    assert "run build-bundle first" in capsys.readouterr().err


def test_lineage_mismatch_prints_both_hashes(workspace, tmp_path, capsys):
    out, cfg = workspace
    raw = json.loads(cfg.read_text())
    raw["ridge"]["lam"] = 5.0
    other = tmp_path / "other.json"
    other.write_text(json.dumps(raw))
    assert main(["train-acoustic", "--config", str(other), "--out", str(out)]) == 1
    err = capsys.readouterr().err
    assert "expected lineage" in err and "found" in err
    hashes = [w.strip(",") for w in err.split() if len(w.strip(",")) == 64]
    assert len(set(hashes)) == 2


def test_bad_config_exit_codes(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"ldm": {"guidance": 2.0}}))  # unknown key
    assert main(["generate", "--config", str(bad), "--out", str(tmp_path)]) == 1
    assert main(["train-acoustic", "--p-gt", "2", "--out", str(tmp_path)]) == 1


def test_malformed_config_is_a_validation_error(tmp_path, capsys):
    broken = tmp_path / "cfg.json"
    broken.write_text("{not json")
    assert main(["generate", "--config", str(broken), "--out", str(tmp_path)]) == 1
    assert "not valid JSON" in capsys.readouterr().err


def test_runtime_error_exit_code(tmp_path, monkeypatch, capsys):
    import brainaudio.cli as cli

    def boom(ws, args):
        raise RuntimeError("disk on fire")

    monkeypatch.setitem(cli.HANDLERS, "generate", boom)
    assert main(["generate", "--out", str(tmp_path)]) == 2
    assert "disk on fire" in capsys.readouterr().err


def test_plot_rejects_empty_report(tmp_path, capsys):
    (tmp_path / "reports").mkdir()
    (tmp_path / "reports/compare.json").write_text(json.dumps({"methods": {}, "acoustic_pcc": {}}))
    assert main(["plot", "--out", str(tmp_path)]) == 1
    assert "no method rows" in capsys.readouterr().err


def test_compare_rows(workspace):
    out, _ = workspace
    cmp = json.loads((out / "reports/compare.json").read_text())
    assert set(cmp["methods"]) == {"c2f_ldm", "fine_ldm", "c2f_decoder", "lir", "mlp", "bilstm",
                                   "transformer_direct"}
    assert {"c2f", "fine", "linear"} == set(cmp["acoustic_pcc"])
    with open(out / "reports/compare.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["method"] for r in rows] == cmp["method_order"]


def test_prompt_sweep_grid_and_consistency(workspace):
    out, _ = workspace
    sweep = json.loads((out / "reports/prompt_sweep.json").read_text())
    cells = [(p, k) for p, row in sweep["grid"].items() for k in row]
    assert len(cells) == 9
    plain = json.loads((out / "reports/evaluate-c2f-p0.25-none.json").read_text())
    for key in ("pcc", "ssim", "fd", "fad", "kl", "kl_s"):
        assert sweep["grid"]["0.25"]["none"][key] == plain[key]


def test_reconstruct_outputs(workspace):
    out, _ = workspace
    index = json.loads((out / "recon/c2f-p0.25-none/index.json").read_text())
    assert len(index["samples"]) == 20
    with wave.open(str(out / "recon/c2f-p0.25-none" / index["samples"][0]["wav"])) as fh:
        assert (fh.getframerate(), fh.getnchannels(), fh.getsampwidth()) == (16000, 1, 2)
        assert fh.getnframes() == 32000


def test_plots(workspace):
    out, cfg = workspace
    cmp = json.loads((out / "reports/compare.json").read_text())
    side = json.loads((out / "plots/methods.json").read_text())
    assert side["n_bars"] == len(cmp["methods"])
    svg = (out / "plots/methods.svg").read_text()
    assert "<svg" in svg and "Date" not in svg
    tsne = json.loads((out / "plots/tsne_semantic.json").read_text())
    assert tsne["seed"] == 0 and tsne["perplexity"] == 15.0
    before = tree_bytes(out / "plots")
    assert main(["plot", "--config", str(cfg), "--out", str(out)]) == 0
    assert tree_bytes(out / "plots") == before


def test_plot_requires_reports(tmp_path, capsys):
    assert main(["plot", "--out", str(tmp_path)]) == 1
    assert "run compare first" in capsys.readouterr().err


def test_tsne_purity_on_ground_truth_semantics(bundle):
    from brainaudio.config import ExperimentConfig
    from brainaudio.datagen import build_dataset
    from brainaudio.plots import knn_purity, tsne_embed

    ds = build_dataset(ExperimentConfig().replace(data__n_train=64, data__n_test=64), bundle)
    emb = tsne_embed(ds.get("s_gt", "test"), 15.0, 0)
    assert knn_purity(emb, ds.get("labels", "test")) >= 0.8


def test_knn_purity_oracle():
    from brainaudio.plots import knn_purity

    pts = np.array([[0, 0], [0, 1], [1, 0], [10, 10], [10, 11], [11, 10]], dtype=float)
    assert knn_purity(pts, np.array([0, 0, 0, 1, 1, 1]), k=2) == 1.0
    assert knn_purity(pts, np.array([0, 1, 0, 1, 0, 1]), k=2) < 0.5


def test_console_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "brainaudio.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "prompt-sweep" in res.stdout
