"""Corpus parsing, binning, augmentation, preprocessing and splitting."""

import csv
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dras.dataset import (
    AGE_GROUP_BOUNDS,
    FLIP_AUGMENTED_GROUPS,
    ImageRecord,
    MANIFEST_COLUMNS,
    NUM_AGE_GROUPS,
    assign_age_group,
    augment,
    flip_pixels,
    parse_utkface_name,
    preprocess,
    preprocess_record,
    read_cacd_csv,
    read_manifest,
    scan_utkface,
    split_records,
    write_group_histogram,
    write_manifest,
)
from dras.errors import (
    MalformedFilename,
    NegativeAge,
    NonRGBInput,
    TooFewRecords,
)


def rec(age: int, **kw) -> ImageRecord:
    return ImageRecord(path=f"img_{age}_{kw.get('identity', '')}.png", age=age, **kw)


# -- filename parsing ---------------------------------------------------------

def test_parse_utkface_example():
    assert parse_utkface_name("25_0_1_20170113.jpg") == (25, 0, 1)


@pytest.mark.parametrize("name", [
    "25_0.jpg",            # too few fields
    "abc_0_1_x.jpg",       # non-integer age
    "25_x_1_20170113.jpg", # non-integer gender
    "-3_0_1_20170113.jpg", # sign makes the field non-integer
])
def test_parse_utkface_malformed(name):
    with pytest.raises(MalformedFilename):
        parse_utkface_name(name)


def test_parse_utkface_extensions_and_paths():
    assert parse_utkface_name("some/dir/8_1_0_x.png") == (8, 1, 0)
    assert parse_utkface_name("8_1_0_x.JPEG") == (8, 1, 0)


# -- age-group binning --------------------------------------------------------

def test_group_examples():
    assert assign_age_group(5) == 0
    assert assign_age_group(21) == 4
    assert assign_age_group(99) == 9


def test_group_bounds_are_closed_intervals():
    for group, (lo, hi) in enumerate(AGE_GROUP_BOUNDS):
        assert assign_age_group(lo) == group
        if hi is not None:
            assert assign_age_group(hi) == group


def test_group_negative_age():
    with pytest.raises(NegativeAge):
        assign_age_group(-1)


@given(st.integers(min_value=0, max_value=300), st.integers(min_value=0, max_value=300))
def test_group_monotone(a, b):
    if a <= b:
        assert assign_age_group(a) <= assign_age_group(b)


@given(st.integers(min_value=0, max_value=300))
def test_group_in_range(age):
    assert 0 <= assign_age_group(age) < NUM_AGE_GROUPS


# -- augmentation -------------------------------------------------------------

def test_augment_single_group0_record():
    r = rec(3)
    out = augment([r])
    assert len(out) == 2
    assert out[0] is r and not out[0].flipped
    assert out[1].flipped and out[1].path == r.path


def test_augment_counts():
    records = [rec(3) for _ in range(10)] + [rec(25) for _ in range(20)]
    out = augment(records)
    assert len(out) == 40  # group 0 doubled, group 4 untouched
    assert sum(r.flipped for r in out) == 10


def test_augment_only_listed_groups_and_order():
    ages = [3, 8, 13, 25, 65, 75]  # groups 0, 1, 2, 4, 8, 9
    records = [rec(a) for a in ages]
    out = augment(records)
    assert out[: len(records)] == records
    flipped_groups = [r.age_group for r in out[len(records):]]
    assert flipped_groups == [0, 1, 8, 9]
    assert set(flipped_groups) <= FLIP_AUGMENTED_GROUPS


def test_augment_does_not_reflip():
    doubled = augment([rec(3)])
    assert len(augment(doubled)) == 3  # only the original gains another copy


@given(arrays(np.uint8, (6, 5, 3), elements=st.integers(0, 255)))
def test_flip_is_involution(pixels):
    assert np.array_equal(flip_pixels(flip_pixels(pixels)), pixels)


# -- preprocessing ------------------------------------------------------------

def test_preprocess_extremes():
    zeros = np.zeros((128, 128, 3), np.uint8)
    full = np.full((128, 128, 3), 255, np.uint8)
    assert np.all(preprocess(zeros, 128) == -1.0)
    assert np.all(preprocess(full, 128) == 1.0)


def test_preprocess_midpoint():
    gray = np.full((128, 128, 3), 128, np.uint8)
    out = preprocess(gray, 128)
    assert out.shape == (128, 128, 3) and out.dtype == np.float32
    assert np.allclose(out, 128 / 127.5 - 1.0, atol=1e-6)


def test_preprocess_center_crop():
    # 128x160 with a distinct center square: crop keeps the middle columns
    img = np.zeros((128, 160, 3), np.uint8)
    img[:, 16:144] = 200
    out = preprocess(img, 128)
    assert np.all(out == 200 / 127.5 - 1.0)


def test_preprocess_resizes():
    img = np.full((64, 64, 3), 10, np.uint8)
    assert preprocess(img, 224).shape == (224, 224, 3)


def test_preprocess_rejects_bad_inputs():
    with pytest.raises(NonRGBInput):
        preprocess(np.zeros((128, 128), np.uint8), 128)
    with pytest.raises(ValueError):
        preprocess(np.zeros((128, 128, 3), np.uint8), 100)


@given(arrays(np.uint8, (32, 48, 3), elements=st.integers(0, 255)))
@settings(max_examples=25, deadline=None)
def test_preprocess_output_range(pixels):
    out = preprocess(pixels, 128)
    assert out.min() >= -1.0 and out.max() <= 1.0


# -- splitting ----------------------------------------------------------------

def test_split_sizes_and_partition():
    records = [rec(a % 80) for a in range(100)]
    train, val, test = split_records(records, seed=17)
    assert (len(train), len(val), len(test)) == (80, 10, 10)
    paths = [r.path for part in (train, val, test) for r in part]
    assert sorted(paths) == sorted(r.path for r in records)
    assert all(r.split == "train" for r in train)
    assert all(r.split == "test" for r in test)


def test_split_deterministic(tmp_path):
    records = [rec(a % 80) for a in range(40)]
    out = []
    for run in range(2):
        train, val, test = split_records(records, seed=17)
        path = tmp_path / f"run{run}.csv"
        write_manifest(path, train + val + test)
        out.append(path.read_bytes())
    assert out[0] == out[1]


def test_split_seed_changes_assignment():
    records = [rec(a % 80) for a in range(40)]
    a = [r.path for r in split_records(records, seed=1)[0]]
    b = [r.path for r in split_records(records, seed=2)[0]]
    assert a != b


def test_split_too_few():
    with pytest.raises(TooFewRecords):
        split_records([rec(5)] * 9, seed=0)


# -- corpus scanning ----------------------------------------------------------

def test_scan_utkface(utk_dir):
    records, bad = scan_utkface(utk_dir)
    assert len(records) == 40 and not bad
    assert {r.age_group for r in records} == set(range(10))


def test_scan_utkface_reports_bad_files(tmp_path, utk_dir):
    for name in ("3_0_1_a.png", "25_1_0_b.png"):
        (tmp_path / name).write_bytes((utk_dir / "3_0_0_00000.png").read_bytes())
    (tmp_path / "portrait.png").write_bytes(b"junk")
    records, bad = scan_utkface(tmp_path)
    assert len(records) == 2
    assert [name for name, _ in bad] == ["portrait.png"]


def test_read_cacd_csv_rank_filter(tmp_path):
    path = tmp_path / "meta.csv"
    rows = [f"img{i}.png,id{i % 2},{20 + i},{i}" for i in range(1, 9)]
    path.write_text("path,identity,age,rank\n" + "\n".join(rows) + "\n")
    records, excluded, bad = read_cacd_csv(path)
    assert len(records) == 5 and excluded == 3 and not bad
    assert all(r.rank <= 5 for r in records)
    assert records[0].identity == "id1"


def test_read_cacd_csv_bad_rows(tmp_path):
    path = tmp_path / "meta.csv"
    path.write_text("path,identity,age,rank\nimg.png,id0,notanage,1\n")
    records, excluded, bad = read_cacd_csv(path)
    assert not records and excluded == 0 and len(bad) == 1


def test_read_cacd_csv_bad_header(tmp_path):
    path = tmp_path / "meta.csv"
    path.write_text("file,age\nx.png,5\n")
    with pytest.raises(MalformedFilename):
        read_cacd_csv(path)


def test_cacd_relative_paths_resolve(cacd_csv):
    records, excluded, bad = read_cacd_csv(cacd_csv)
    assert len(records) == 24 and excluded == 0 and not bad
    assert all(Path(r.path).exists() for r in records)
    assert all(r.identity for r in records)


# -- manifests ----------------------------------------------------------------

def test_manifest_round_trip(tmp_path):
    records = [rec(3), rec(25, identity="alice"), rec(75)]
    records = augment(records)
    path = tmp_path / "m.csv"
    write_manifest(path, records)
    back = read_manifest(path, split="train")
    assert [(r.path, r.age, r.identity, r.flipped) for r in back] == [
        (r.path, r.age, r.identity, r.flipped) for r in records
    ]
    assert all(r.split == "train" for r in back)
    with open(path, newline="") as fh:
        assert next(csv.reader(fh)) == MANIFEST_COLUMNS


def test_group_histogram(tmp_path):
    records = [rec(3)] * 3 + [rec(25)] * 2 + [rec(99)]
    path = tmp_path / "hist.csv"
    write_group_histogram(path, records)
    with open(path, newline="") as fh:
        rows = {int(r["age_group"]): int(r["count"]) for r in csv.DictReader(fh)}
    assert rows[0] == 3 and rows[4] == 2 and rows[9] == 1
    assert sum(rows.values()) == 6 and len(rows) == NUM_AGE_GROUPS


# -- record preprocessing and cache -------------------------------------------

def test_preprocess_record_flip(utk_dir):
    base = ImageRecord(path=str(utk_dir / "3_0_0_00000.png"), age=3)
    flipped = ImageRecord(path=base.path, age=3, flipped=True)
    a = preprocess_record(base, 128)
    b = preprocess_record(flipped, 128)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, b[:, ::-1])


def test_preprocess_record_cache(utk_dir, tmp_path):
    record = ImageRecord(path=str(utk_dir / "3_0_0_00000.png"), age=3)
    first = preprocess_record(record, 128, cache_dir=tmp_path)
    cached = list(tmp_path.glob("*.npy"))
    assert len(cached) == 1
    second = preprocess_record(record, 128, cache_dir=tmp_path)
    assert np.array_equal(first, second)
    uncached = preprocess_record(record, 128)
    assert np.array_equal(first, uncached)


def test_record_validates_group_consistency():
    with pytest.raises(ValueError):
        ImageRecord(path="x.png", age=25, age_group=3)
