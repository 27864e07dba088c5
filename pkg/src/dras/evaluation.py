"""Measurement protocols: age-group accuracy, feature export, verification.

All protocols run on a trained model bundle at configurable scale. The
verification client defaults to a local cosine-similarity comparator over
identity features (deterministic, offline); an HTTP adapter speaking a minimal
JSON compare API is available for external services.
"""

from __future__ import annotations

import base64
import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import nn

from .age_agent import AgeEncoder
from .dataset import NUM_AGE_GROUPS
from .errors import (
    EmptyGroup,
    MissingClassifier,
    MissingIdentityTags,
    MissingReference,
    ServiceUnavailable,
)
from .gan import compose_joint_feature, to_uint8
from .training import ModelBundle

DEFAULT_VERIFICATION_THRESHOLD = 73.975
EVAL_BATCH_SIZE = 100


# -- synthesis helpers --------------------------------------------------------

def synthesize_batch(
    models: ModelBundle, identity_images128: torch.Tensor, age_ref224: torch.Tensor
) -> torch.Tensor:
    """Generate one image per identity image, all conditioned on one age ref."""
    with torch.no_grad():
        z_id = models.identity_encoder(identity_images128)
        z_age = models.age_encoder(age_ref224.unsqueeze(0) if age_ref224.dim() == 3 else age_ref224)
        if z_age.dim() == 1:
            z_age = z_age.unsqueeze(0)
        z_age = z_age.expand(len(z_id), -1)
        return models.generator(compose_joint_feature(z_id, z_age))


# -- age-group classification -------------------------------------------------

class AgeGroupClassifier:
    """Interface: map a batch of 128px images to age-group predictions.

    ``reference_group`` carries the target group of the age reference used for
    synthesis; real classifiers ignore it, the oracle echoes it.
    """

    def predict(self, images: torch.Tensor, reference_group: Optional[int] = None) -> np.ndarray:
        raise NotImplementedError


class OracleClassifier(AgeGroupClassifier):
    """Always answers with the reference group (upper-bound control)."""

    def predict(self, images, reference_group=None):
        if reference_group is None:
            raise MissingReference("oracle classifier needs the reference group")
        return np.full(len(images), reference_group, dtype=np.int64)


class RandomClassifier(AgeGroupClassifier):
    """Uniform-random group predictions (chance-level control)."""

    def __init__(self, seed: int = 0, n_groups: int = NUM_AGE_GROUPS):
        self.rng = np.random.default_rng(seed)
        self.n_groups = n_groups

    def predict(self, images, reference_group=None):
        return self.rng.integers(0, self.n_groups, size=len(images))


class ConvnetAgeClassifier(nn.Module, AgeGroupClassifier):
    """Small convnet over 128px images; desk-scale stand-in for a finetuned
    large backbone."""

    def __init__(self, n_groups: int = NUM_AGE_GROUPS):
        super().__init__()
        self.n_groups = n_groups
        layers = []
        channels = [3, 16, 32, 64]
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
        layers += [nn.AdaptiveAvgPool2d(4), nn.Flatten(), nn.Linear(64 * 16, n_groups)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)

    def predict(self, images, reference_group=None):
        with torch.no_grad():
            return self.net(images).argmax(dim=1).cpu().numpy()


def train_age_classifier(
    images128: torch.Tensor,
    groups: Sequence[int],
    n_groups: int = NUM_AGE_GROUPS,
    epochs: int = 20,
    lr: float = 1e-3,
    batch_size: int = 32,
    seed: int = 0,
) -> ConvnetAgeClassifier:
    """Supervised cross-entropy training of the desk-scale classifier."""
    torch.manual_seed(seed)
    clf = ConvnetAgeClassifier(n_groups=n_groups)
    opt = torch.optim.Adam(clf.parameters(), lr=lr)
    targets = torch.as_tensor(list(groups), dtype=torch.long)
    gen = torch.Generator().manual_seed(seed)
    for _ in range(epochs):
        order = torch.randperm(len(images128), generator=gen)
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            opt.zero_grad()
            loss = nn.functional.cross_entropy(clf(images128[idx]), targets[idx])
            loss.backward()
            opt.step()
    clf.eval()
    return clf


def save_age_classifier(clf: ConvnetAgeClassifier, path: str | Path) -> None:
    torch.save({"state": clf.state_dict(), "n_groups": clf.n_groups}, path)


def load_age_classifier(path: str | Path) -> ConvnetAgeClassifier:
    blob = torch.load(path, weights_only=True)
    clf = ConvnetAgeClassifier(n_groups=int(blob["n_groups"]))
    clf.load_state_dict(blob["state"])
    clf.eval()
    return clf


# -- age-group accuracy protocol ----------------------------------------------

@dataclass
class AgeAccuracyTable:
    per_group: dict[int, float]
    average: float = field(init=False)

    def __post_init__(self):
        self.average = float(np.mean(list(self.per_group.values())))

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["age_group", "accuracy"])
            for g in sorted(self.per_group):
                writer.writerow([g, repr(self.per_group[g])])
            writer.writerow(["average", repr(self.average)])


def age_group_accuracy(
    models: ModelBundle,
    test_images128: torch.Tensor,
    age_refs224: dict[int, torch.Tensor],
    classifier: Optional[AgeGroupClassifier],
    n_groups: int = NUM_AGE_GROUPS,
    batch_size: int = EVAL_BATCH_SIZE,
) -> AgeAccuracyTable:
    """Synthesize every test identity at every reference group and measure the
    fraction classified into the reference's group."""
    if classifier is None:
        raise MissingClassifier("age_group_accuracy needs a classifier")
    missing = [g for g in range(n_groups) if g not in age_refs224]
    if missing:
        raise MissingReference(f"no age reference for groups {missing}")
    per_group: dict[int, float] = {}
    for g in range(n_groups):
        hits = 0
        for start in range(0, len(test_images128), batch_size):
            chunk = test_images128[start : start + batch_size]
            synth = synthesize_batch(models, chunk, age_refs224[g])
            preds = classifier.predict(synth, reference_group=g)
            hits += int((np.asarray(preds) == g).sum())
        per_group[g] = hits / len(test_images128)
    return AgeAccuracyTable(per_group=per_group)


# -- identity feature export --------------------------------------------------

@dataclass
class FeatureEntry:
    identity: str
    age: int
    is_synthesized: bool
    image128: torch.Tensor


def export_identity_features(
    models: ModelBundle,
    entries: Sequence[FeatureEntry],
    out_path: str | Path,
    batch_size: int = EVAL_BATCH_SIZE,
) -> int:
    """Write one row per entry: identity, age, is_synthesized, f0..f{z-1}.

    The CSV feeds external embedding/visualization tools; returns row count.
    """
    untagged = [i for i, e in enumerate(entries) if not e.identity]
    if untagged:
        raise MissingIdentityTags(f"entries without identity tags at {untagged[:5]}")
    z_dim = models.identity_encoder.z_dim
    with open(out_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["identity", "age", "is_synthesized"] + [f"f{i}" for i in range(z_dim)])
        for start in range(0, len(entries), batch_size):
            chunk = entries[start : start + batch_size]
            batch = torch.stack([e.image128 for e in chunk])
            with torch.no_grad():
                feats = models.identity_encoder(batch).cpu().numpy()
            for entry, row in zip(chunk, feats):
                writer.writerow(
                    [entry.identity, entry.age, int(entry.is_synthesized)]
                    + [repr(float(v)) for v in row]
                )
    return len(entries)


# -- verification clients -----------------------------------------------------

def cosine_confidence(f1: np.ndarray, f2: np.ndarray) -> float:
    """Affine map of cosine similarity to [0, 100]; equal vectors score 100."""
    f1 = np.asarray(f1, dtype=np.float64).ravel()
    f2 = np.asarray(f2, dtype=np.float64).ravel()
    if np.array_equal(f1, f2):  # postcondition: self-comparison is exactly 100
        return 100.0
    denom = np.linalg.norm(f1) * np.linalg.norm(f2)
    if denom == 0:
        return 50.0  # degenerate zero vector: neutral midpoint
    cos = float(np.clip(np.dot(f1, f2) / denom, -1.0, 1.0))
    return (cos + 1.0) * 50.0


class LocalCosineClient:
    """Deterministic comparator over identity-encoder features."""

    kind = "local_cosine"

    def __init__(self, models: ModelBundle, threshold: float = DEFAULT_VERIFICATION_THRESHOLD):
        self.models = models
        self.threshold = threshold

    def _embed(self, image128: torch.Tensor) -> np.ndarray:
        if image128.dim() == 3:
            image128 = image128.unsqueeze(0)
        with torch.no_grad():
            return self.models.identity_encoder(image128)[0].cpu().numpy()

    def confidence(self, a: torch.Tensor, b: torch.Tensor) -> float:
        return cosine_confidence(self._embed(a), self._embed(b))

    def same_person(self, a: torch.Tensor, b: torch.Tensor) -> bool:
        return self.confidence(a, b) >= self.threshold


class HttpVerificationClient:
    """Adapter for an external compare service.

    POSTs ``{"image_a": <b64 PNG>, "image_b": <b64 PNG>}`` and expects
    ``{"confidence": <float>}``. Failures are retried a bounded number of
    times, then surfaced as ServiceUnavailable.
    """

    kind = "external_http"

    def __init__(self, endpoint: str, threshold: float = DEFAULT_VERIFICATION_THRESHOLD,
                 max_retries: int = 3, timeout: float = 10.0, retry_delay: float = 0.5):
        self.endpoint = endpoint
        self.threshold = threshold
        self.max_retries = max_retries
        self.timeout = timeout
        self.retry_delay = retry_delay

    @staticmethod
    def _encode(image: torch.Tensor) -> str:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(to_uint8(image)).save(buf, format="PNG")
        return base64.b64encode(buf.getvalue()).decode("ascii")

    def confidence(self, a: torch.Tensor, b: torch.Tensor) -> float:
        import requests

        payload = {"image_a": self._encode(a), "image_b": self._encode(b)}
        last_error: Optional[Exception] = None
        for attempt in range(self.max_retries):
            try:
                resp = requests.post(self.endpoint, json=payload, timeout=self.timeout)
                resp.raise_for_status()
                return float(resp.json()["confidence"])
            except Exception as exc:  # noqa: BLE001 - any transport failure retries
                last_error = exc
                if attempt + 1 < self.max_retries:
                    time.sleep(self.retry_delay)
        raise ServiceUnavailable(f"{self.endpoint}: {last_error}")

    def same_person(self, a, b) -> bool:
        return self.confidence(a, b) >= self.threshold


# -- identity consistency across age groups -----------------------------------

@dataclass
class ConsistencyMatrix:
    """Upper-triangular (i < j) mean/std of cross-group verification
    confidence, plus per-group aggregates over all pairs touching a group."""

    entries: dict[tuple[int, int], tuple[float, float]]
    group_stats: dict[int, tuple[float, float]]

    def to_csv(self, path: str | Path) -> None:
        groups = sorted(self.group_stats)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["age_group"] + [f"grp_{g}" for g in groups])
            for gi in groups:
                row = [f"grp_{gi}"]
                for gj in groups:
                    if gi < gj:
                        mean, std = self.entries[(gi, gj)]
                        row.append(f"{mean:.2f}±{std:.2f}")
                    else:
                        row.append("-")
                writer.writerow(row)
            avg_row = ["average"]
            for g in groups:
                mean, std = self.group_stats[g]
                avg_row.append(f"{mean:.2f}±{std:.2f}")
            writer.writerow(avg_row)


def identity_consistency_matrix(
    synthesized_sets: dict[int, torch.Tensor],
    client,
) -> ConsistencyMatrix:
    """All cross pairs between the synthesized sets of distinct groups.

    Stds are population stds (ddof=0). Pairs are unordered, so the result does
    not depend on group enumeration order.
    """
    for g, images in synthesized_sets.items():
        if len(images) == 0:
            raise EmptyGroup(f"group {g} has no synthesized images")
    groups = sorted(synthesized_sets)
    entries: dict[tuple[int, int], tuple[float, float]] = {}
    pooled: dict[int, list[float]] = {g: [] for g in groups}
    for ai, gi in enumerate(groups):
        for gj in groups[ai + 1 :]:
            confs = [
                client.confidence(a, b)
                for a in synthesized_sets[gi]
                for b in synthesized_sets[gj]
            ]
            entries[(gi, gj)] = (float(np.mean(confs)), float(np.std(confs)))
            pooled[gi].extend(confs)
            pooled[gj].extend(confs)
    group_stats = {
        g: (float(np.mean(v)), float(np.std(v))) for g, v in pooled.items() if v
    }
    return ConsistencyMatrix(entries=entries, group_stats=group_stats)


def build_synthesized_sets(
    models: ModelBundle,
    identity_images128: torch.Tensor,
    age_refs224: dict[int, torch.Tensor],
    samples_per_group: Optional[int] = None,
) -> dict[int, torch.Tensor]:
    """Synthesize each identity at each reference group; optionally subsample
    identities to bound the pairwise comparison cost."""
    imgs = identity_images128
    if samples_per_group is not None:
        imgs = imgs[:samples_per_group]
    return {g: synthesize_batch(models, imgs, ref) for g, ref in sorted(age_refs224.items())}
