"""Shared fixtures.

The expensive pieces are session-scoped: one full-length two-stage toy run
(reused by the training-behavior and acceptance tests) and one quick CLI
pipeline (ingest -> train -> checkpoint) for command-level tests.
"""

import sys
import time
from pathlib import Path
from types import SimpleNamespace

import pytest
import torch
import yaml

from dras.cli import main as cli_main
from dras.synthetic import toy_training_data, write_toy_cacd_csv, write_toy_corpus
from dras.training import (
    TrainConfig,
    build_models,
    seed_everything,
    train_stage1,
    train_stage2,
)

TOY_SEED = 7  # corpus
RUN_SEED = 0  # full-length training run


@pytest.fixture(scope="session")
def toy32():
    """32 in-memory toy images at both pipeline resolutions."""
    return toy_training_data(32, seed=TOY_SEED)


@pytest.fixture(scope="session")
def two_stage(toy32, tmp_path_factory):
    """Full-length two-stage run on the 32-image toy set.

    batch_size 8 gives 4 steps per epoch, enough optimizer steps for the
    reconstruction loss to drop well below half its epoch-1 mean.
    """
    out = tmp_path_factory.mktemp("two_stage")
    cfg = TrainConfig(batch_size=8, seed=RUN_SEED)
    t0 = time.perf_counter()
    ckpt1 = train_stage1(cfg, toy32, out)
    ckpt2 = train_stage2(cfg, ckpt1, toy32, out)
    runtime_s = time.perf_counter() - t0
    return SimpleNamespace(
        out_dir=out,
        config=cfg,
        data=toy32,
        ckpt2=ckpt2,
        stage1_dir=out / "ckpt" / "stage1" / f"epoch_{cfg.epochs_stage1}",
        stage2_root=out / "ckpt" / "stage2",
        runtime_s=runtime_s,
    )


@pytest.fixture(scope="session")
def fresh_models():
    """Untrained desk-scale bundle in eval mode; treat as read-only."""
    seed_everything(123)
    return build_models(TrainConfig()).eval()


@pytest.fixture(scope="session")
def utk_dir(tmp_path_factory) -> Path:
    """40 toy PNGs with UTKFace-style names, four per age group."""
    directory = tmp_path_factory.mktemp("utk_corpus")
    write_toy_corpus(directory, 40, seed=11)
    return directory


@pytest.fixture(scope="session")
def cacd_csv(tmp_path_factory) -> Path:
    """Toy CACD tree (24 images, 4 identities) plus its sidecar CSV."""
    directory = tmp_path_factory.mktemp("cacd_corpus")
    return write_toy_cacd_csv(directory, 24, seed=13)


@pytest.fixture()
def run_cli(capsys):
    """Invoke the CLI in-process; returns (exit_code, stdout, stderr)."""

    def run(*argv):
        code = cli_main([str(a) for a in argv])
        captured = capsys.readouterr()
        return code, captured.out, captured.err

    return run


QUICK_TRAIN = dict(batch_size=8, epochs_stage1=2, epochs_stage2=2, seed=5)


def write_quick_config(path: Path) -> Path:
    with open(path, "w") as fh:
        yaml.safe_dump(QUICK_TRAIN, fh)
    return path


@pytest.fixture(scope="session")
def cli_pipeline(utk_dir, tmp_path_factory):
    """ingest + quick two-stage train, shared by synthesize/evaluate tests."""
    root = tmp_path_factory.mktemp("cli_pipeline")
    data_dir = root / "data"
    train_dir = root / "train"
    assert cli_main(["ingest", str(utk_dir), "--out", str(data_dir)]) == 0
    config = write_quick_config(root / "config.yaml")
    assert cli_main([
        "train", "--config", str(config),
        "--data", str(data_dir), "--out", str(train_dir),
    ]) == 0
    ckpt = train_dir / "ckpt" / "stage2" / f"epoch_{QUICK_TRAIN['epochs_stage2']}"
    assert ckpt.is_dir()
    return SimpleNamespace(
        root=root, corpus=utk_dir, data_dir=data_dir,
        train_dir=train_dir, ckpt=ckpt, config=config,
    )


def group_ref_paths(corpus: Path, groups=range(10)) -> list[str]:
    """One corpus image per requested age group (files cycle through groups)."""
    from dras.synthetic import GROUP_AGES

    return [
        str(corpus / f"{GROUP_AGES[g]}_{g % 2}_{g % 5}_{g:05d}.png")
        for g in groups
    ]


@pytest.fixture(scope="session")
def quick_batch(toy32):
    """Small image batch for forward-pass tests."""
    return toy32.images128[:8], toy32.images224[:8]


def pytest_terminal_summary(terminalreporter):
    """Render the acceptance checklist after the run, outside output capture."""
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "CRITERION_RESULTS", []) if mod else []
    if results:
        terminalreporter.section("acceptance criteria")
        for n, status, summary in sorted(results):
            terminalreporter.write_line(f"criterion {n}: {status} — {summary}")
