"""Corpus ingestion, age-group binning, augmentation, splitting and preprocessing.

Supported corpora:
  * UTKFace-style directories, ages parsed from ``[age]_[gender]_[race]_[date].jpg``
    filenames.
  * CACD-style trees described by a sidecar CSV with header
    ``path,identity,age,rank``; rows with rank > 5 are dropped at ingestion.

Images are center-cropped to a square, resized to 128 (identity/GAN path) or
224 (age path) and mapped to [-1, 1] via v / 127.5 - 1.
"""

from __future__ import annotations

import csv
import hashlib
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from random import Random
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import (
    DecodeError,
    MalformedFilename,
    NegativeAge,
    NonRGBInput,
    TooFewRecords,
)

# Closed integer bins; ages of 71 and above all land in the last group.
AGE_GROUP_BOUNDS = [
    (0, 5), (6, 10), (11, 15), (16, 20), (21, 30),
    (31, 40), (41, 50), (51, 60), (61, 70), (71, None),
]
NUM_AGE_GROUPS = len(AGE_GROUP_BOUNDS)

# Babies, children and seniors get a mirrored copy to balance the corpus.
FLIP_AUGMENTED_GROUPS = frozenset({0, 1, 8, 9})

MAX_CACD_RANK = 5
SUPPORTED_SIZES = (128, 224)
IMAGE_EXTENSIONS = (".jpg", ".jpeg", ".png")

CACHE_ENV_VAR = "DRAS_CACHE"

_INT_FIELD = re.compile(r"^\d+$")


@dataclass
class ImageRecord:
    """One face image plus the metadata the pipeline needs."""

    path: str
    age: int
    identity: Optional[str] = None
    rank: Optional[int] = None
    age_group: int = -1
    split: Optional[str] = None  # "train" | "val" | "test"
    flipped: bool = False

    def __post_init__(self):
        if self.age_group < 0:
            self.age_group = assign_age_group(self.age)
        elif self.age_group != assign_age_group(self.age):
            raise ValueError(
                f"age_group {self.age_group} inconsistent with age {self.age}"
            )
        if self.rank is not None and self.rank > MAX_CACD_RANK:
            raise ValueError(f"rank {self.rank} exceeds {MAX_CACD_RANK}")


def parse_utkface_name(filename: str) -> tuple[int, int, int]:
    """Parse ``[age]_[gender]_[race]_[date]`` metadata from a UTKFace filename.

    Returns (age, gender, race). Raises MalformedFilename when the first three
    underscore-separated fields are not plain nonnegative integers.
    """
    stem = Path(filename).name
    for ext in IMAGE_EXTENSIONS:
        if stem.lower().endswith(ext):
            stem = stem[: -len(ext)]
            break
    fields = stem.split("_")
    if len(fields) < 3:
        raise MalformedFilename(f"{filename!r}: expected >= 3 '_'-separated fields")
    head = fields[:3]
    if not all(_INT_FIELD.match(f) for f in head):
        raise MalformedFilename(f"{filename!r}: non-integer leading fields {head}")
    age, gender, race = (int(f) for f in head)
    return age, gender, race


def assign_age_group(age: int) -> int:
    """Map an integer age to one of the ten canonical groups."""
    if age < 0:
        raise NegativeAge(f"age {age} is negative")
    for group, (lo, hi) in enumerate(AGE_GROUP_BOUNDS):
        if hi is None or lo <= age <= hi:
            return group
    raise AssertionError("unreachable: bins cover all nonnegative ages")


def augment(
    records: Sequence[ImageRecord],
    groups: Iterable[int] = FLIP_AUGMENTED_GROUPS,
) -> list[ImageRecord]:
    """Append a horizontally-mirrored copy of every record in ``groups``.

    Output order is the input order followed by the flips in input order.
    """
    groups = frozenset(groups)
    flips = [
        replace(r, flipped=True)
        for r in records
        if r.age_group in groups and not r.flipped
    ]
    return list(records) + flips


def flip_pixels(pixels: np.ndarray) -> np.ndarray:
    """Mirror an HxWxC array left-right. Exact involution."""
    return np.ascontiguousarray(pixels[:, ::-1])


def load_image(path: str | Path) -> np.ndarray:
    """Decode an image file into an HxWx3 uint8 array."""
    try:
        with Image.open(path) as img:
            if img.mode != "RGB":
                raise NonRGBInput(f"{path}: mode {img.mode}, expected RGB")
            return np.asarray(img, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"{path}: {exc}") from exc


def preprocess(image: np.ndarray, target: int, crop: bool = True) -> np.ndarray:
    """Center-crop to a square, resize to target x target, scale to [-1, 1].

    ``image`` is an 8-bit HxWx3 array; output is float32 target x target x 3.
    """
    if target not in SUPPORTED_SIZES:
        raise ValueError(f"target {target} not in {SUPPORTED_SIZES}")
    if image.ndim != 3 or image.shape[2] != 3:
        raise NonRGBInput(f"expected HxWx3 input, got shape {image.shape}")
    if crop:
        h, w = image.shape[:2]
        side = min(h, w)
        top = (h - side) // 2
        left = (w - side) // 2
        image = image[top : top + side, left : left + side]
    if image.shape[0] != target or image.shape[1] != target:
        pil = Image.fromarray(image)
        image = np.asarray(pil.resize((target, target), Image.BILINEAR))
    return image.astype(np.float32) / 127.5 - 1.0


def split_records(
    records: Sequence[ImageRecord], seed: int
) -> tuple[list[ImageRecord], list[ImageRecord], list[ImageRecord]]:
    """Deterministic shuffled 80/10/10 partition keyed by seed."""
    n = len(records)
    if n < 10:
        raise TooFewRecords(f"need at least 10 records to split, got {n}")
    order = list(range(n))
    Random(seed).shuffle(order)
    n_train = int(n * 0.8)
    n_val = int(n * 0.1)
    buckets = {
        "train": order[:n_train],
        "val": order[n_train : n_train + n_val],
        "test": order[n_train + n_val :],
    }
    out = {
        name: [replace(records[i], split=name) for i in idx]
        for name, idx in buckets.items()
    }
    return out["train"], out["val"], out["test"]


def scan_utkface(
    directory: str | Path,
) -> tuple[list[ImageRecord], list[tuple[str, str]]]:
    """Collect records from a UTKFace-style directory.

    Returns (records, bad) where ``bad`` lists (filename, reason) for files
    whose names could not be parsed. Scanning continues past bad files.
    """
    records: list[ImageRecord] = []
    bad: list[tuple[str, str]] = []
    directory = Path(directory)
    for name in sorted(os.listdir(directory)):
        if not name.lower().endswith(IMAGE_EXTENSIONS):
            continue
        try:
            age, _gender, _race = parse_utkface_name(name)
            records.append(ImageRecord(path=str(directory / name), age=age))
        except MalformedFilename as exc:
            bad.append((name, str(exc)))
    return records, bad


def read_cacd_csv(
    csv_path: str | Path, base_dir: Optional[str | Path] = None
) -> tuple[list[ImageRecord], int, list[tuple[str, str]]]:
    """Read a CACD sidecar CSV with header ``path,identity,age,rank``.

    Returns (records, n_excluded_by_rank, bad). Rows with rank > 5 are counted
    and dropped; rows that do not parse go to ``bad``.
    """
    records: list[ImageRecord] = []
    bad: list[tuple[str, str]] = []
    excluded = 0
    base = Path(base_dir) if base_dir is not None else Path(csv_path).parent
    with open(csv_path, newline="") as fh:
        reader = csv.DictReader(fh)
        expected = {"path", "identity", "age", "rank"}
        if reader.fieldnames is None or not expected.issubset(reader.fieldnames):
            raise MalformedFilename(
                f"{csv_path}: header must contain {sorted(expected)}"
            )
        for lineno, row in enumerate(reader, start=2):
            try:
                age = int(row["age"])
                rank = int(row["rank"])
                if age < 0:
                    raise ValueError("negative age")
            except (TypeError, ValueError) as exc:
                bad.append((f"line {lineno}", f"{row}: {exc}"))
                continue
            if rank > MAX_CACD_RANK:
                excluded += 1
                continue
            path = row["path"]
            if not os.path.isabs(path):
                path = str(base / path)
            records.append(
                ImageRecord(path=path, age=age, identity=row["identity"], rank=rank)
            )
    return records, excluded, bad


MANIFEST_COLUMNS = ["path", "age", "age_group", "identity", "flipped"]


def write_manifest(path: str | Path, records: Sequence[ImageRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_COLUMNS)
        for r in records:
            writer.writerow(
                [r.path, r.age, r.age_group, r.identity or "", int(r.flipped)]
            )


def read_manifest(path: str | Path, split: Optional[str] = None) -> list[ImageRecord]:
    records = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            records.append(
                ImageRecord(
                    path=row["path"],
                    age=int(row["age"]),
                    identity=row["identity"] or None,
                    split=split,
                    flipped=bool(int(row["flipped"])),
                )
            )
    return records


def write_group_histogram(path: str | Path, records: Sequence[ImageRecord]) -> None:
    """Per-group counts, the data behind the corpus age-distribution figure."""
    counts = [0] * NUM_AGE_GROUPS
    for r in records:
        counts[r.age_group] += 1
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["age_group", "count"])
        for g, c in enumerate(counts):
            writer.writerow([g, c])


def _cache_key(record: ImageRecord, target: int, crop: bool) -> str:
    st = os.stat(record.path)
    raw = f"{os.path.abspath(record.path)}|{st.st_mtime_ns}|{st.st_size}|{target}|{crop}|{record.flipped}"
    return hashlib.sha1(raw.encode()).hexdigest()


def preprocess_record(
    record: ImageRecord,
    target: int,
    crop: bool = True,
    cache_dir: Optional[str | Path] = None,
) -> np.ndarray:
    """Load, (optionally) flip and preprocess one record.

    When ``cache_dir`` is given (or DRAS_CACHE is set) the result is memoised
    as an .npy file keyed by path, mtime, size and preprocessing options.
    """
    if cache_dir is None:
        cache_dir = os.environ.get(CACHE_ENV_VAR)
    cache_path = None
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        cache_path = Path(cache_dir) / f"{_cache_key(record, target, crop)}.npy"
        if cache_path.exists():
            return np.load(cache_path)
    pixels = load_image(record.path)
    if record.flipped:
        pixels = flip_pixels(pixels)
    out = preprocess(pixels, target, crop=crop)
    if cache_path is not None:
        tmp = cache_path.with_suffix(".tmp.npy")
        np.save(tmp, out)
        os.replace(tmp, cache_path)
    return out


def preprocess_batch(
    records: Sequence[ImageRecord],
    target: int,
    crop: bool = True,
    cache_dir: Optional[str | Path] = None,
    workers: int = 1,
) -> np.ndarray:
    """Preprocess many records into an (N, target, target, 3) float32 stack.

    Results are collated in input order regardless of worker count.
    """
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            arrays = list(
                pool.map(lambda r: preprocess_record(r, target, crop, cache_dir), records)
            )
    else:
        arrays = [preprocess_record(r, target, crop, cache_dir) for r in records]
    return np.stack(arrays) if arrays else np.empty((0, target, target, 3), np.float32)
