#!/usr/bin/env python3
"""End-to-end desk-scale demo on the built-in synthetic corpus.

Writes a small labelled face corpus, ingests it into split manifests, runs
the two-stage training schedule, synthesizes an aging grid for one face, and
scores the run with the age-accuracy and identity-consistency protocols.
Finishes in a few minutes on CPU; every artifact lands under --out.
"""

import argparse
import sys
from pathlib import Path

import yaml

from dras.cli import main as dras
from dras.synthetic import GROUP_AGES, write_toy_corpus


def step(title: str, argv: list[str]) -> None:
    print(f"\n== {title}: dras {' '.join(argv)}")
    code = dras(argv)
    if code != 0:
        sys.exit(f"step '{title}' failed with exit code {code}")


def main(argv=None) -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[1])
    parser.add_argument("--out", type=Path, default=Path("toy_run"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--images", type=int, default=40,
                        help="corpus size (spread over the 10 age groups)")
    parser.add_argument("--epochs", type=int, default=15,
                        help="epochs per training stage")
    args = parser.parse_args(argv)

    corpus = args.out / "corpus"
    corpus.mkdir(parents=True, exist_ok=True)
    write_toy_corpus(corpus, args.images, seed=args.seed)
    print(f"wrote {args.images} toy images to {corpus}")

    data_dir = args.out / "data"
    step("ingest", ["ingest", str(corpus), "--out", str(data_dir),
                    "--seed", str(args.seed)])

    config = args.out / "config.yaml"
    config.write_text(yaml.safe_dump({
        "scale": "desk_scale",
        "batch_size": 8,
        "epochs_stage1": args.epochs,
        "epochs_stage2": args.epochs,
        "seed": args.seed,
    }))
    train_dir = args.out / "train"
    step("train", ["train", "--config", str(config),
                   "--data", str(data_dir), "--out", str(train_dir)])
    ckpt = train_dir / "ckpt" / "stage2" / f"epoch_{args.epochs}"

    # one reference image per age group; corpus filenames cycle group 0..9
    refs = [str(corpus / f"{GROUP_AGES[g]}_{g % 2}_{g % 5}_{g:05d}.png")
            for g in range(10)]
    step("synthesize", ["synthesize", "--checkpoint", str(ckpt),
                        "--identity", refs[2], "--age-refs", *refs,
                        "--out", str(args.out / "grid")])

    step("age accuracy", ["evaluate", "--protocol", "age_acc",
                          "--checkpoint", str(ckpt), "--data", str(data_dir),
                          "--age-refs", *refs, "--classifier", "oracle",
                          "--out", str(args.out / "age_acc")])

    step("consistency", ["evaluate", "--protocol", "consistency",
                         "--checkpoint", str(ckpt), "--data", str(data_dir),
                         "--age-refs", *refs, "--samples-per-group", "2",
                         "--out", str(args.out / "consistency")])

    print(f"\ndone — inspect {args.out / 'grid' / 'grid.png'} and the CSVs "
          f"under {args.out}")


if __name__ == "__main__":
    main()
