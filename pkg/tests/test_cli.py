"""Command-level behavior: exit codes, manifests, and declared outputs."""

import csv
import json
import shutil
from pathlib import Path

import pytest
from PIL import Image

from conftest import group_ref_paths
from dras.dataset import read_manifest

GROUPS_WITH_FLIPS = {0, 1, 8, 9}


def read_rows(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- ingest -------------------------------------------------------------------

def test_ingest_conserves_records(run_cli, utk_dir, tmp_path):
    code, out, err = run_cli("ingest", utk_dir, "--out", tmp_path / "data")
    assert code == 0 and not err
    parts = {
        name: read_manifest(tmp_path / "data" / f"{name}.csv")
        for name in ("train", "val", "test")
    }
    originals = [r for part in parts.values() for r in part if not r.flipped]
    assert len(originals) == 40  # every corpus image lands in exactly one split
    assert (len(parts["val"]), len(parts["test"])) == (4, 4)
    assert not any(r.flipped for r in parts["val"] + parts["test"])
    flips = [r for r in parts["train"] if r.flipped]
    assert flips and all(r.age_group in GROUPS_WITH_FLIPS for r in flips)
    assert "ingested 40 records" in out


def test_ingest_histogram(run_cli, utk_dir, tmp_path):
    code, _, _ = run_cli("ingest", utk_dir, "--out", tmp_path / "data")
    assert code == 0
    rows = read_rows(tmp_path / "data" / "age_histogram.csv")
    counts = {int(r["age_group"]): int(r["count"]) for r in rows}
    assert sum(counts.values()) == 40  # histogram covers the raw corpus
    assert all(counts[g] == 4 for g in range(10))


def test_ingest_writes_manifest_first(run_cli, tmp_path):
    empty = tmp_path / "empty"
    empty.mkdir()
    out_dir = tmp_path / "data"
    code, _, err = run_cli("ingest", empty, "--out", out_dir)
    assert code == 1 and "EmptyDataset" in err
    manifest = json.loads((out_dir / "run_manifest.json").read_text())
    assert manifest["command"] == "ingest"
    assert manifest["outputs"] == ["train.csv", "val.csv", "test.csv",
                                   "age_histogram.csv"]
    assert not (out_dir / "train.csv").exists()


def test_ingest_manifest_fields(run_cli, utk_dir, tmp_path):
    out_dir = tmp_path / "data"
    code, _, _ = run_cli("ingest", utk_dir, "--out", out_dir, "--seed", 3)
    assert code == 0
    manifest = json.loads((out_dir / "run_manifest.json").read_text())
    assert manifest["seed"] == 3
    assert manifest["inputs"] == [str(utk_dir)]
    assert manifest["tool_version"]
    for name in manifest["outputs"]:
        assert (out_dir / name).exists()


def test_ingest_reports_malformed_but_continues(run_cli, utk_dir, tmp_path):
    corpus = tmp_path / "corpus"
    corpus.mkdir()
    for src in sorted(utk_dir.iterdir())[:12]:
        shutil.copy(src, corpus / src.name)
    shutil.copy(next(utk_dir.iterdir()), corpus / "nolabel.png")
    code, _, err = run_cli("ingest", corpus, "--out", tmp_path / "data")
    assert code == 1
    assert "1 malformed" in err and "nolabel.png" in err
    # the good records were still ingested
    assert (tmp_path / "data" / "train.csv").exists()
    originals = [
        r
        for name in ("train", "val", "test")
        for r in read_manifest(tmp_path / "data" / f"{name}.csv")
        if not r.flipped
    ]
    assert len(originals) == 12


def test_ingest_cacd_rank_filter(run_cli, cacd_csv, tmp_path):
    augmented_csv = tmp_path / "meta.csv"
    lines = cacd_csv.read_text().splitlines()
    lines.append(lines[1].rsplit(",", 1)[0] + ",6")
    lines.append(lines[2].rsplit(",", 1)[0] + ",9")
    augmented_csv.write_text("\n".join(lines) + "\n")
    code, out, _ = run_cli("ingest", augmented_csv, "--format", "cacd_csv",
                           "--out", tmp_path / "data")
    assert code == 0
    assert "excluded 2 rows with rank > 5" in out
    total = sum(
        len(read_manifest(tmp_path / "data" / f"{n}.csv"))
        for n in ("val", "test")
    ) + len([r for r in read_manifest(tmp_path / "data" / "train.csv")
             if not r.flipped])
    assert total == 24


def test_ingest_cacd_keeps_identity_tags(run_cli, cacd_csv, tmp_path):
    code, _, _ = run_cli("ingest", cacd_csv, "--format", "cacd_csv",
                         "--out", tmp_path / "data")
    assert code == 0
    test_split = read_manifest(tmp_path / "data" / "test.csv")
    assert test_split and all(r.identity for r in test_split)


def test_ingest_missing_directory(run_cli, tmp_path):
    code, _, err = run_cli("ingest", tmp_path / "nope", "--out", tmp_path / "d")
    assert code == 1 and "not a directory" in err


# -- train --------------------------------------------------------------------

def test_train_pipeline_outputs(cli_pipeline):
    train_dir = cli_pipeline.train_dir
    manifest = json.loads((train_dir / "run_manifest.json").read_text())
    assert manifest["command"] == "train"
    for name in manifest["outputs"]:
        assert (train_dir / name).exists()
    rows = read_rows(train_dir / "losses.csv")
    assert {r["stage"] for r in rows} == {"stage1", "stage2"}
    assert (train_dir / "config.yaml").exists()
    assert cli_pipeline.ckpt.is_dir()


def test_train_stage2_needs_checkpoint(run_cli, cli_pipeline, tmp_path):
    code, _, err = run_cli(
        "train", "--stage", "2", "--config", cli_pipeline.config,
        "--data", cli_pipeline.data_dir, "--out", tmp_path / "out")
    assert code == 1 and "WrongStageCheckpoint" in err


def test_train_stage2_resumes_from_checkpoint(run_cli, cli_pipeline, tmp_path):
    stage1 = cli_pipeline.train_dir / "ckpt" / "stage1" / "epoch_2"
    code, out, _ = run_cli(
        "train", "--stage", "2", "--config", cli_pipeline.config,
        "--data", cli_pipeline.data_dir, "--checkpoint", stage1,
        "--out", tmp_path / "out")
    assert code == 0
    rows = read_rows(tmp_path / "out" / "losses.csv")
    assert rows and all(r["stage"] == "stage2" for r in rows)
    assert "final checkpoint: stage2-" in out


def test_train_same_seed_same_losses(run_cli, cli_pipeline, tmp_path, monkeypatch):
    monkeypatch.setenv("DRAS_CACHE", str(tmp_path / "cache"))
    outs = []
    for name in ("a", "b"):
        code, _, _ = run_cli(
            "train", "--config", cli_pipeline.config,
            "--data", cli_pipeline.data_dir, "--out", tmp_path / name)
        assert code == 0
        outs.append((tmp_path / name / "losses.csv").read_bytes())
    assert outs[0] == outs[1]
    assert list((tmp_path / "cache").glob("*.npy"))  # preprocess cache was used


def test_train_seed_override(run_cli, cli_pipeline, tmp_path):
    import yaml

    code, _, _ = run_cli(
        "train", "--config", cli_pipeline.config, "--seed", 77,
        "--data", cli_pipeline.data_dir, "--out", tmp_path / "out")
    assert code == 0
    saved = yaml.safe_load((tmp_path / "out" / "config.yaml").read_text())
    assert saved["seed"] == 77


# -- synthesize ---------------------------------------------------------------

def test_synthesize_grid_and_cells(run_cli, cli_pipeline, tmp_path):
    refs = group_ref_paths(cli_pipeline.corpus, groups=(0, 4))
    identity = group_ref_paths(cli_pipeline.corpus, groups=(2,))[0]
    out_dir = tmp_path / "synth"
    code, _, _ = run_cli(
        "synthesize", "--checkpoint", cli_pipeline.ckpt,
        "--identity", identity, "--age-refs", *refs, "--out", out_dir)
    assert code == 0
    with Image.open(out_dir / "grid.png") as grid:
        # 1 body row, 2 body columns: (rows+1) x (cols+1) cells plus gutters
        assert grid.size == (3 * 128 + 2 * 2, 2 * 128 + 1 * 2)
    for i in range(2):
        with Image.open(out_dir / "cells" / f"cell_0_{i}.png") as cell:
            assert cell.size == (128, 128)
    manifest = json.loads((out_dir / "run_manifest.json").read_text())
    assert manifest["checkpoint_id"].startswith("stage2-")
    assert manifest["inputs"] == [identity] + refs


def test_synthesize_identity_as_its_own_age_ref(run_cli, cli_pipeline, tmp_path):
    identity = group_ref_paths(cli_pipeline.corpus, groups=(3,))[0]
    out_dir = tmp_path / "recon"
    code, _, _ = run_cli(
        "synthesize", "--checkpoint", cli_pipeline.ckpt,
        "--identity", identity, "--age-refs", identity, "--out", out_dir)
    assert code == 0
    with Image.open(out_dir / "grid.png") as grid:
        assert grid.size == (2 * 128 + 2, 2 * 128 + 2)
    assert (out_dir / "cells" / "cell_0_0.png").exists()


def test_synthesize_requires_age_refs(cli_pipeline, tmp_path, capsys):
    from dras.cli import main as cli_main

    with pytest.raises(SystemExit) as err:
        cli_main(["synthesize", "--checkpoint", str(cli_pipeline.ckpt),
                  "--identity", "x.png", "--age-refs",
                  "--out", str(tmp_path / "o")])
    assert err.value.code == 2
    capsys.readouterr()


# -- evaluate -----------------------------------------------------------------

def test_evaluate_age_acc_oracle(run_cli, cli_pipeline, tmp_path):
    refs = group_ref_paths(cli_pipeline.corpus)
    out_dir = tmp_path / "eval"
    code, out, _ = run_cli(
        "evaluate", "--protocol", "age_acc",
        "--checkpoint", cli_pipeline.ckpt, "--data", cli_pipeline.data_dir,
        "--age-refs", *refs, "--classifier", "oracle", "--out", out_dir)
    assert code == 0
    rows = read_rows(out_dir / "age_accuracy.csv")
    per_group = [r for r in rows if r["age_group"] != "average"]
    assert len(per_group) == 10
    assert all(float(r["accuracy"]) == 1.0 for r in rows)
    assert "average accuracy: 1.0000" in out


def test_evaluate_age_acc_needs_classifier(run_cli, cli_pipeline, tmp_path):
    refs = group_ref_paths(cli_pipeline.corpus)
    code, _, err = run_cli(
        "evaluate", "--protocol", "age_acc",
        "--checkpoint", cli_pipeline.ckpt, "--data", cli_pipeline.data_dir,
        "--age-refs", *refs, "--out", tmp_path / "eval")
    assert code == 1 and "MissingClassifier" in err


def test_evaluate_consistency_deterministic(run_cli, cli_pipeline, tmp_path):
    refs = group_ref_paths(cli_pipeline.corpus, groups=(1, 6))
    tables = []
    for name in ("a", "b"):
        out_dir = tmp_path / name
        code, _, _ = run_cli(
            "evaluate", "--protocol", "consistency",
            "--checkpoint", cli_pipeline.ckpt, "--data", cli_pipeline.data_dir,
            "--age-refs", *refs, "--samples-per-group", 2, "--out", out_dir)
        assert code == 0
        tables.append((out_dir / "consistency.csv").read_bytes())
    assert tables[0] == tables[1]
    text = tables[0].decode()
    assert text.startswith("age_group,grp_1,grp_6")


def test_evaluate_id_features(run_cli, cli_pipeline, cacd_csv, tmp_path):
    data_dir = tmp_path / "data"
    code, _, _ = run_cli("ingest", cacd_csv, "--format", "cacd_csv",
                         "--out", data_dir)
    assert code == 0
    # the protocol only needs a trained bundle, not one trained on this corpus
    ref = group_ref_paths(Path(cacd_csv).parent, groups=(4,))[0]
    out_dir = tmp_path / "eval"
    code, out, _ = run_cli(
        "evaluate", "--protocol", "id_features",
        "--checkpoint", cli_pipeline.ckpt,
        "--data", data_dir, "--age-refs", ref, "--out", out_dir)
    assert code == 0
    rows = read_rows(out_dir / "identity_features.csv")
    n_test = len(read_manifest(data_dir / "test.csv"))
    assert len(rows) == 2 * n_test  # originals plus one synthesis per ref group
    assert sum(r["is_synthesized"] == "1" for r in rows) == n_test
    assert all(f"f{i}" in rows[0] for i in range(50))
    assert f"exported {2 * n_test} feature rows" in out


def test_evaluate_id_features_requires_tags(run_cli, cli_pipeline, tmp_path):
    # UTKFace-style corpora carry no identity labels
    code, _, err = run_cli(
        "evaluate", "--protocol", "id_features",
        "--checkpoint", cli_pipeline.ckpt, "--data", cli_pipeline.data_dir,
        "--out", tmp_path / "eval")
    assert code == 1 and "MissingIdentityTags" in err


def test_evaluate_http_requires_endpoint(run_cli, cli_pipeline, tmp_path):
    refs = group_ref_paths(cli_pipeline.corpus, groups=(1, 6))
    code, _, err = run_cli(
        "evaluate", "--protocol", "consistency", "--client", "http",
        "--checkpoint", cli_pipeline.ckpt, "--data", cli_pipeline.data_dir,
        "--age-refs", *refs, "--out", tmp_path / "eval")
    assert code == 1 and "http-endpoint" in err


# -- parser -------------------------------------------------------------------

def test_version_flag(capsys):
    from dras.cli import main as cli_main

    with pytest.raises(SystemExit) as err:
        cli_main(["--version"])
    assert err.value.code == 0
    assert "dras" in capsys.readouterr().out


def test_unknown_command(capsys):
    from dras.cli import main as cli_main

    with pytest.raises(SystemExit) as err:
        cli_main(["frobnicate"])
    assert err.value.code == 2
    capsys.readouterr()
