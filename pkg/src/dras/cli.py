"""Command-line surface: ingest, train, synthesize, evaluate.

Every command writes a ``run_manifest.json`` into the output directory before
any other output, capturing the command line, config, seed, checkpoint id and
declared outputs; re-running with the same inputs and seed reproduces the
outputs byte-identically (with the local verification client).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import __version__
from .dataset import (
    ImageRecord,
    assign_age_group,
    load_image,
    preprocess,
    read_cacd_csv,
    read_manifest,
    scan_utkface,
    split_records,
    write_group_histogram,
    write_manifest,
    augment,
)
from .errors import DivergenceDetected, DrasError, EmptyDataset
from .evaluation import (
    FeatureEntry,
    HttpVerificationClient,
    LocalCosineClient,
    OracleClassifier,
    RandomClassifier,
    age_group_accuracy,
    build_synthesized_sets,
    export_identity_features,
    identity_consistency_matrix,
    load_age_classifier,
)
from .gan import export_png, to_uint8
from .training import (
    Checkpoint,
    TrainConfig,
    TrainingData,
    train_stage1,
    train_stage2,
)

CELL_SIZE = 128
GUTTER = 2  # pixels between adjacent grid cells


def _write_run_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                        outputs: list[str], checkpoint_id: Optional[str] = None,
                        inputs: Optional[list[str]] = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": getattr(args, "config", None),
        "seed": getattr(args, "seed", None),
        "checkpoint_id": checkpoint_id,
        "inputs": inputs or [],
        "outputs": outputs,
        "tool_version": __version__,
    }
    (out_dir / "run_manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _check_outputs(out_dir: Path, outputs: list[str]) -> list[str]:
    return [name for name in outputs if not (out_dir / name).exists()]


def _load_config(args: argparse.Namespace) -> TrainConfig:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    if getattr(args, "scale", None) is not None:
        config = replace(config, scale=f"{args.scale}_scale")
    return config


def _image_tensor(path: str, target: int, crop: bool = True) -> torch.Tensor:
    arr = preprocess(load_image(path), target, crop=crop)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


# -- ingest -------------------------------------------------------------------

def cmd_ingest(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    outputs = ["train.csv", "val.csv", "test.csv", "age_histogram.csv"]
    _write_run_manifest(out_dir, "ingest", args, outputs, inputs=[args.dataset])

    if args.format == "utkface":
        if not os.path.isdir(args.dataset):
            print(f"error: {args.dataset} is not a directory", file=sys.stderr)
            return 1
        records, bad = scan_utkface(args.dataset)
        excluded = 0
    else:
        records, excluded, bad = read_cacd_csv(args.dataset)

    if not records:
        print("error: EmptyDataset: no usable records found", file=sys.stderr)
        return 1

    train, val, test = split_records(records, seed=args.seed)
    train = augment(train)
    write_manifest(out_dir / "train.csv", train)
    write_manifest(out_dir / "val.csv", val)
    write_manifest(out_dir / "test.csv", test)
    # histogram over the original (pre-augmentation) corpus
    write_group_histogram(out_dir / "age_histogram.csv", records)

    print(f"ingested {len(records)} records -> train {len(train)} (with flips), "
          f"val {len(val)}, test {len(test)}")
    if excluded:
        print(f"excluded {excluded} rows with rank > 5")
    if bad:
        print(f"warning: {len(bad)} malformed records skipped:", file=sys.stderr)
        for name, reason in bad:
            print(f"  {name}: {reason}", file=sys.stderr)
        return 1
    return 0


# -- train --------------------------------------------------------------------

def cmd_train(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    config = _load_config(args)
    outputs = ["losses.csv", "config.yaml"]
    _write_run_manifest(out_dir, "train", args, outputs,
                        inputs=[args.data, args.checkpoint or ""])

    records = read_manifest(Path(args.data) / "train.csv", split="train")
    if not records:
        print("error: EmptyDataset: train manifest is empty", file=sys.stderr)
        return 1
    data = TrainingData.from_records(
        records, crop=config.center_crop, cache_dir=os.environ.get("DRAS_CACHE")
    )
    config.to_file(out_dir / "config.yaml")

    try:
        if args.stage in ("1", "both"):
            ckpt = train_stage1(config, data, out_dir)
        else:
            if not args.checkpoint:
                print("error: WrongStageCheckpoint: stage 2 needs --checkpoint",
                      file=sys.stderr)
                return 1
            ckpt = Checkpoint.load(args.checkpoint)
        if args.stage in ("2", "both"):
            ckpt = train_stage2(config, ckpt, data, out_dir)
    except DivergenceDetected as exc:
        print(f"error: DivergenceDetected: {exc}", file=sys.stderr)
        if exc.last_checkpoint:
            print(f"last good checkpoint: {exc.last_checkpoint}", file=sys.stderr)
        return 1
    except DrasError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1

    missing = _check_outputs(out_dir, outputs)
    if missing:
        print(f"error: missing outputs {missing}", file=sys.stderr)
        return 1
    print(f"final checkpoint: {ckpt.checkpoint_id()}")
    return 0


# -- synthesize ---------------------------------------------------------------

def _blank_cell() -> np.ndarray:
    return np.full((CELL_SIZE, CELL_SIZE, 3), 255, dtype=np.uint8)


def build_grid(top_row: list[np.ndarray], left_col: list[np.ndarray],
               body: list[list[np.ndarray]]) -> np.ndarray:
    """Assemble uint8 cells into the reference/synthesis grid.

    Layout: blank corner + age references across the top, identity references
    down the left, synthesized cells in the body. With R body rows and C body
    columns the grid measures ((R+1)*128 + R*2) x ((C+1)*128 + C*2) pixels:
    128px cells separated by 2px white gutters.
    """
    rows = [[_blank_cell()] + top_row]
    for ref, cells in zip(left_col, body):
        rows.append([ref] + cells)
    n_rows, n_cols = len(rows), len(rows[0])
    height = n_rows * CELL_SIZE + (n_rows - 1) * GUTTER
    width = n_cols * CELL_SIZE + (n_cols - 1) * GUTTER
    grid = np.full((height, width, 3), 255, dtype=np.uint8)
    for r, row in enumerate(rows):
        for c, cell in enumerate(row):
            y = r * (CELL_SIZE + GUTTER)
            x = c * (CELL_SIZE + GUTTER)
            grid[y : y + CELL_SIZE, x : x + CELL_SIZE] = cell
    return grid


def cmd_synthesize(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    ckpt = Checkpoint.load(args.checkpoint)
    models = ckpt.models.eval()
    crop = not args.no_crop
    outputs = ["grid.png"] + [f"cells/cell_0_{i}.png" for i in range(len(args.age_refs))]
    _write_run_manifest(out_dir, "synthesize", args, outputs,
                        checkpoint_id=ckpt.checkpoint_id(),
                        inputs=[args.identity] + list(args.age_refs))

    identity128 = _image_tensor(args.identity, 128, crop)
    refs224 = [_image_tensor(p, 224, crop) for p in args.age_refs]
    refs128 = [_image_tensor(p, 128, crop) for p in args.age_refs]

    with torch.no_grad():
        z_id = models.identity_encoder(identity128.unsqueeze(0))
        cells = []
        for ref in refs224:
            z_age = models.age_encoder(ref.unsqueeze(0))
            joint = torch.cat([z_id, z_age], dim=-1)
            cells.append(models.generator(joint)[0])

    (out_dir / "cells").mkdir(parents=True, exist_ok=True)
    for i, cell in enumerate(cells):
        export_png(cell, out_dir / "cells" / f"cell_0_{i}.png")
    grid = build_grid(
        top_row=[to_uint8(r) for r in refs128],
        left_col=[to_uint8(identity128)],
        body=[[to_uint8(c) for c in cells]],
    )
    export_png(grid, out_dir / "grid.png")

    missing = _check_outputs(out_dir, outputs)
    if missing:
        print(f"error: missing outputs {missing}", file=sys.stderr)
        return 1
    return 0


# -- evaluate -----------------------------------------------------------------

def _age_refs_by_group(paths: Sequence[str], crop: bool) -> dict[int, torch.Tensor]:
    refs: dict[int, torch.Tensor] = {}
    for path in paths:
        from .dataset import parse_utkface_name

        age, _, _ = parse_utkface_name(Path(path).name)
        refs[assign_age_group(age)] = _image_tensor(path, 224, crop)
    return refs


def _make_classifier(spec: Optional[str], seed: int):
    if spec is None:
        return None  # age_group_accuracy reports MissingClassifier
    if spec == "oracle":
        return OracleClassifier()
    if spec == "random":
        return RandomClassifier(seed=seed)
    return load_age_classifier(spec)


def cmd_evaluate(args: argparse.Namespace) -> int:
    out_dir = Path(args.out)
    ckpt = Checkpoint.load(args.checkpoint)
    models = ckpt.models.eval()
    crop = not args.no_crop
    protocol_outputs = {
        "age_acc": ["age_accuracy.csv"],
        "id_features": ["identity_features.csv"],
        "consistency": ["consistency.csv"],
    }
    outputs = protocol_outputs[args.protocol]
    _write_run_manifest(out_dir, f"evaluate:{args.protocol}", args, outputs,
                        checkpoint_id=ckpt.checkpoint_id(),
                        inputs=[args.data or ""] + list(args.age_refs or []))

    records = read_manifest(Path(args.data) / "test.csv", split="test") if args.data else []

    try:
        if args.protocol == "age_acc":
            images = _stack_images(records, crop)
            refs = _age_refs_by_group(args.age_refs or [], crop)
            classifier = _make_classifier(args.classifier, args.seed or 0)
            table = age_group_accuracy(models, images, refs, classifier)
            table.to_csv(out_dir / "age_accuracy.csv")
            print(f"average accuracy: {table.average:.4f}")
        elif args.protocol == "id_features":
            entries = [
                FeatureEntry(identity=r.identity or "", age=r.age, is_synthesized=False,
                             image128=_image_tensor(r.path, 128, crop))
                for r in records
            ]
            if args.age_refs:
                refs = _age_refs_by_group(args.age_refs, crop)
                base = list(entries)
                for g in sorted(refs):
                    for e in base:
                        with torch.no_grad():
                            z_id = models.identity_encoder(e.image128.unsqueeze(0))
                            z_age = models.age_encoder(refs[g].unsqueeze(0))
                            synth = models.generator(torch.cat([z_id, z_age], dim=-1))[0]
                        entries.append(FeatureEntry(
                            identity=e.identity, age=e.age, is_synthesized=True,
                            image128=synth))
            n = export_identity_features(models, entries, out_dir / "identity_features.csv")
            print(f"exported {n} feature rows")
        else:
            images = _stack_images(records, crop)
            refs = _age_refs_by_group(args.age_refs or [], crop)
            client = _make_client(args, models)
            sets = build_synthesized_sets(models, images, refs,
                                          samples_per_group=args.samples_per_group)
            matrix = identity_consistency_matrix(sets, client)
            matrix.to_csv(out_dir / "consistency.csv")
            print(f"consistency cells: {len(matrix.entries)}")
    except DrasError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1

    missing = _check_outputs(out_dir, outputs)
    if missing:
        print(f"error: missing outputs {missing}", file=sys.stderr)
        return 1
    return 0


def _stack_images(records: list[ImageRecord], crop: bool) -> torch.Tensor:
    if not records:
        raise EmptyDataset("no test records; pass --data with a test.csv manifest")
    return torch.stack([_image_tensor(r.path, 128, crop) for r in records])


def _make_client(args: argparse.Namespace, models):
    if args.client == "http":
        if not args.http_endpoint:
            raise DrasError("--client http requires --http-endpoint")
        return HttpVerificationClient(args.http_endpoint)
    return LocalCosineClient(models)


# -- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dras",
        description="Dual-reference age synthesis: train, synthesize, evaluate.",
    )
    parser.add_argument("--version", action="version", version=f"dras {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="scan a corpus into split manifests")
    p.add_argument("dataset", help="UTKFace directory or CACD sidecar CSV")
    p.add_argument("--format", choices=["utkface", "cacd_csv"], default="utkface")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", help="run the two-stage training schedule")
    p.add_argument("--config", help="key-value YAML config file")
    p.add_argument("--stage", choices=["1", "2", "both"], default="both")
    p.add_argument("--data", required=True, help="ingest output directory")
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", help="stage-1 checkpoint dir (stage 2 only)")
    p.add_argument("--seed", type=int, help="override config seed")
    p.add_argument("--scale", choices=["paper", "desk"], help="override config scale")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synthesize", help="synthesize an identity at reference ages")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--identity", required=True, help="identity reference image")
    p.add_argument("--age-refs", nargs="+", required=True, help="age reference images")
    p.add_argument("--out", required=True)
    p.add_argument("--no-crop", action="store_true", help="skip center cropping")
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="run a measurement protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--protocol", choices=["age_acc", "id_features", "consistency"],
                   required=True)
    p.add_argument("--data", help="ingest output directory (test.csv)")
    p.add_argument("--age-refs", nargs="*", help="one age reference image per group")
    p.add_argument("--classifier", default=None,
                   help="'oracle', 'random', or a classifier blob path")
    p.add_argument("--client", choices=["local", "http"], default="local")
    p.add_argument("--http-endpoint")
    p.add_argument("--samples-per-group", type=int, default=5)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-crop", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DrasError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
