import csv
import json
from pathlib import Path

import numpy as np
import pytest
import yaml

from lamps.cli import main

SMALL = dict(
    image_pixels=48, grid_size=6, n1=4, n2=3, batch_size=4, epochs=2, warmup_epochs=1,
    decoder_layers=1, phantom_images=8,
)


def write_config(path, **kw):
    path.write_text(yaml.safe_dump({**SMALL, **kw}))
    return path


@pytest.fixture(scope="module")
def pretrained(tmp_path_factory):
    root = tmp_path_factory.mktemp("pre")
    cfg = write_config(root / "desk.yaml")
    assert main(["pretrain", "--config", str(cfg), "--data", "phantom", "--out", str(root / "run")]) == 0
    return root / "run"


def read_manifest(out):
    return json.loads((Path(out) / "manifest.json").read_text())


def test_pretrain_writes_artifacts_and_manifest(pretrained):
    manifest = read_manifest(pretrained)
    assert manifest["command"] == "pretrain" and manifest["seed"] == 0
    assert manifest["config"]["image_pixels"] == 48
    assert manifest["started"] <= manifest["finished"]
    for path in manifest["artifacts"]:
        assert Path(path).exists(), path
    names = {Path(p).name for p in manifest["artifacts"]}
    assert {"loss_log.csv", "loss_curves.png", "config.yaml", "ckpt_epoch2.bin"} <= names
    assert len(list(pretrained.glob("manifest*.json"))) == 1


def test_resume_with_mismatched_config_exits_2(pretrained, tmp_path, capsys):
    cfg = write_config(tmp_path / "other.yaml", lam=0.5)
    code = main(["pretrain", "--config", str(cfg), "--data", "phantom", "--out", str(tmp_path / "r"),
                 "--resume", str(pretrained / "ckpt_epoch1.bin")])
    assert code == 2
    assert "lam" in capsys.readouterr().err


def test_config_schema_violation_exits_2(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("epochs: 2\nlearning_rate: 3\n")
    assert main(["pretrain", "--config", str(cfg), "--data", "phantom", "--out", str(tmp_path)]) == 2
    assert "learning_rate" in capsys.readouterr().err
    assert main(["pretrain", "--config", str(write_config(tmp_path / "e.yaml", epochs=0)), "--data", "phantom",
                 "--out", str(tmp_path)]) == 2


def test_runtime_error_exits_1(tmp_path, capsys):
    assert main(["eval-dna", "--ckpt", str(tmp_path / "missing.bin"), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


def test_corrupt_checkpoint_version_exits_2(pretrained, tmp_path):
    import torch

    archive = torch.load(pretrained / "ckpt_epoch2.bin", weights_only=True)
    archive["format_version"] = 7
    torch.save(archive, tmp_path / "v7.bin")
    assert main(["eval-dna", "--ckpt", str(tmp_path / "v7.bin"), "--out", str(tmp_path / "o")]) == 2


def test_eval_dna_report(pretrained, tmp_path, capsys):
    out = tmp_path / "dna"
    assert main(["eval-dna", "--ckpt", str(pretrained / "ckpt_epoch2.bin"), "--trials", "40", "--out", str(out)]) == 0
    assert "DNA-test accuracy" in capsys.readouterr().out
    report = dict(line.split("\t") for line in (out / "dna_report.txt").read_text().splitlines() if "\t" in line)
    assert int(report["trials"]) == 40
    assert int(report["trials_inside_c1"]) == int(report["trials_inside_complement"]) == 20
    assert float(report["ci95_low"]) <= float(report["dna_accuracy"]) <= float(report["ci95_high"])
    assert "88.54" in (out / "dna_report.txt").read_text()
    with open(out / "dna_trials.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 40
    assert np.mean([int(r["correct"]) for r in rows]) == pytest.approx(float(report["dna_accuracy"]), abs=1e-4)
    assert (out / "dna_similarities.png").stat().st_size > 0
    # reproducible from the same flags
    again = tmp_path / "dna2"
    main(["eval-dna", "--ckpt", str(pretrained / "ckpt_epoch2.bin"), "--trials", "40", "--out", str(again)])
    assert (again / "dna_trials.csv").read_text() == (out / "dna_trials.csv").read_text()


def test_eval_correspondence_phantom(pretrained, tmp_path):
    out = tmp_path / "corr"
    code = main(["eval-correspondence", "--ckpt", str(pretrained / "ckpt_epoch2.bin"), "--images", "6",
                 "--out", str(out)])
    assert code == 0
    text = (out / "correspondence_report.txt").read_text()
    assert "stride\t8" in text and "mean±std_px\t" in text and "68.17±44.45" in text
    with open(out / "correspondence_landmarks.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 13
    with open(out / "correspondence_predictions.csv") as fh:
        assert len(list(csv.DictReader(fh))) == 3 * 13
    assert (out / "correspondence_example.png").exists() and (out / "correspondence_errors.png").exists()
    assert read_manifest(out)["command"] == "eval-correspondence"


def test_folder_workflow_with_exported_phantoms(pretrained, tmp_path):
    data = tmp_path / "ph"
    assert main(["make-phantoms", "--out", str(data), "--n", "4", "--pixels", "96", "--seed", "3"]) == 0
    out = tmp_path / "corr"
    ckpt = str(pretrained / "ckpt_epoch2.bin")
    code = main(["eval-correspondence", "--ckpt", ckpt, "--data", str(data), "--landmarks", str(data / "landmarks.csv"),
                 "--pairs", str(data / "pairs.csv"), "--out", str(out)])
    assert code == 0
    with open(out / "correspondence_predictions.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 * 13
    assert all(0 <= int(r["true_x"]) < 48 and 0 <= int(r["true_y"]) < 48 for r in rows)
    # folder data without landmarks is a configuration error
    assert main(["eval-correspondence", "--ckpt", ckpt, "--data", str(data), "--out", str(out)]) == 2


def test_extract_embeddings_row_count(pretrained, tmp_path):
    out = tmp_path / "emb.csv"
    code = main(["extract-embeddings", "--ckpt", str(pretrained / "ckpt_epoch2.bin"), "--images", "5", "--out", str(out)])
    assert code == 0
    with open(out) as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    assert header[:2] == ["image_id", "landmark_name"] and len(header) == 2 + 32
    assert len(body) == 5 * 9
    assert len({r[1] for r in body}) == 9
    assert np.isfinite(np.array([r[2:] for r in body], float)).all()
    code = main(["extract-embeddings", "--ckpt", str(pretrained / "ckpt_epoch2.bin"), "--images", "2",
                 "--vocabulary", "heart_apex", "left_rib4_peak", "--out", str(out)])
    with open(out) as fh:
        assert sum(1 for _ in fh) == 1 + 2 * 2


def test_ablate_emits_five_rows(tmp_path, capsys):
    cfg = write_config(tmp_path / "abl.yaml", epochs=1)
    out = tmp_path / "abl"
    code = main(["ablate", "--config", str(cfg), "--out", str(out), "--dna-images", "4",
                 "--dna-trials-per-image", "2", "--pairs", "2"])
    assert code == 0
    with open(out / "ablation.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert [r["mode"] for r in rows] == ["single:extrap", "single:shuffle", "single:compdecomp", "direct_sum", "cyclic"]
    assert all(set(r) >= {"dna_test", "corr_error"} for r in rows)
    assert all(r["seeds"] == "1" for r in rows)
    md = (out / "ablation.md").read_text().splitlines()
    assert len(md) == 2 + 5 and md[-1].startswith("| All | Cyclic training |")
    assert capsys.readouterr().out.splitlines()[-5:] == md[-5:]
    assert (out / "ablation.png").exists() and (out / "ablation_reference.csv").exists()


def test_default_out_root_from_environment(pretrained, tmp_path, monkeypatch):
    monkeypatch.setenv("LAMPS_OUT_ROOT", str(tmp_path / "root"))
    assert main(["eval-dna", "--ckpt", str(pretrained / "ckpt_epoch2.bin"), "--trials", "4"]) == 0
    (run,) = (tmp_path / "root").iterdir()
    assert run.name.startswith("eval-dna-") and (run / "manifest.json").exists()
