"""Seeded synthetic face-stand-in images for desk-scale runs and tests.

The images are smooth low-frequency color fields (sinusoid + gradient + blob),
easy for a small autoencoder to reconstruct, which keeps toy training runs
short and stable.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .dataset import ImageRecord, preprocess
from .training import TrainingData

# One representative age per group, used round-robin when writing corpora.
GROUP_AGES = [3, 8, 13, 18, 25, 35, 45, 55, 65, 75]


def toy_image(rng: np.random.Generator, size: int = 224) -> np.ndarray:
    """One smooth random uint8 HxWx3 image.

    A single low-frequency luminance pattern (sinusoid + gradient + blob) with
    a random per-channel tint; channels are correlated on purpose so a small
    decoder can fit a 32-image corpus within a short training budget.
    """
    yy, xx = np.meshgrid(
        np.linspace(0.0, 1.0, size), np.linspace(0.0, 1.0, size), indexing="ij"
    )
    cx, cy = rng.uniform(0.2, 0.8, 2)
    sigma = rng.uniform(0.2, 0.45)
    blob = np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2 * sigma**2))
    fx, fy = rng.uniform(0.3, 1.0, 2)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    base = 0.6 * np.sin(2 * np.pi * (fx * xx + fy * yy) + phase)
    gx, gy = rng.uniform(-1.0, 1.0, 2)
    base += 0.5 * (gx * xx + gy * yy) + rng.uniform(0.3, 0.9) * blob
    tint = rng.uniform(0.4, 1.0, 3)
    img = base[..., None] * tint[None, None, :]
    img = (img - img.min()) / (np.ptp(img) + 1e-9)
    return (img * 255.0).astype(np.uint8)


def toy_training_data(n: int, seed: int = 0) -> TrainingData:
    """In-memory toy set preprocessed at both pipeline resolutions."""
    rng = np.random.default_rng(seed)
    a128, a224 = [], []
    for _ in range(n):
        raw = toy_image(rng, size=224)
        a128.append(preprocess(raw, 128))
        a224.append(preprocess(raw, 224))
    return TrainingData.from_arrays(np.stack(a128), np.stack(a224))


def write_toy_corpus(
    directory: str | Path,
    n: int,
    seed: int = 0,
    size: int = 160,
    identities: int | None = None,
) -> list[ImageRecord]:
    """Write UTKFace-named PNGs covering all ten age groups.

    With ``identities`` set, images cycle through that many identity tags
    (returned on the records; filenames stay UTKFace-style).
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n):
        age = GROUP_AGES[i % len(GROUP_AGES)]
        name = f"{age}_{i % 2}_{i % 5}_{i:05d}.png"
        path = directory / name
        Image.fromarray(toy_image(rng, size=size)).save(path, format="PNG")
        identity = f"id{i % identities}" if identities else None
        records.append(ImageRecord(path=str(path), age=age, identity=identity))
    return records


def write_toy_cacd_csv(
    directory: str | Path, n: int, seed: int = 0, identities: int = 4
) -> Path:
    """Toy CACD-style tree plus sidecar CSV (all ranks within the keep range)."""
    directory = Path(directory)
    records = write_toy_corpus(directory, n, seed=seed, identities=identities)
    csv_path = directory / "metadata.csv"
    rng = np.random.default_rng(seed + 1)
    with open(csv_path, "w", newline="") as fh:
        fh.write("path,identity,age,rank\n")
        for r in records:
            rank = int(rng.integers(1, 6))
            fh.write(f"{Path(r.path).name},{r.identity},{r.age},{rank}\n")
    return csv_path
