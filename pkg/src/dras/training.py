"""Two-stage training over the five-term hybrid objective.

Stage 1 (reconstruction stage) ties the identity and age references to the
same image. Per step:
  1. prior-discriminator step on the latent matching loss,
  2. image-discriminator step on the three-term adversarial loss,
  3. a joint autoencoder step: reconstruction + encoder-side prior loss train
     the identity encoder and generator, age preservation trains the age head
     (the synthesis branch is detached there, so it never moves the generator),
  4. a generator step on the non-saturating adversarial loss at a reduced rate.

Stage 2 freezes the identity encoder, age encoder and prior discriminator,
draws identity/age references as independent random pairs, and optimizes the
generator with adversarial + identity-preservation + age-preservation losses
against the discriminator's adversarial loss.

Every step appends a row to ``losses.csv``
(``stage,epoch,step,adv,z_I,rec,id,age,total,lr``); the logged ``total`` is
always the lambda-weighted recombination of the logged components. Checkpoints
are written per epoch under ``ckpt/stage{1,2}/epoch_{N}/``.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import random
import shutil
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
import yaml

from .age_agent import AgeEncoder, AgeEncoderConfig, age_preservation_loss, resize_for_age_input
from .dataset import ImageRecord, preprocess_batch
from .errors import (
    DivergenceDetected,
    EmptyDataset,
    InvalidConfig,
    NonFiniteLoss,
    WrongStageCheckpoint,
)
from .gan import (
    Generator,
    ImageDiscriminator,
    compose_joint_feature,
    image_adversarial_loss,
)
from .identity_agent import (
    IdentityEncoder,
    PriorDiscriminator,
    identity_preservation_loss,
    prior_adversarial_loss,
    prior_sample_from,
    reconstruction_loss,
)

log = logging.getLogger(__name__)

STAGE1 = "stage1"
STAGE2 = "stage2"
LOSS_CSV_COLUMNS = ["stage", "epoch", "step", "adv", "z_I", "rec", "id", "age", "total", "lr"]
MODEL_NAMES = [
    "identity_encoder",
    "age_encoder",
    "prior_discriminator",
    "generator",
    "image_discriminator",
]
# Keep sigmoid outputs away from exact 0/1 before taking logs in the loop.
SCORE_EPS = 1e-7
# The generator's adversarial refinement runs as its own optimizer sub-step at
# a reduced rate so it cannot overpower the reconstruction path at small scale.
G_ADV_LR_SCALE = 0.1


@dataclass
class TrainConfig:
    lambda_adv: float = 1.0
    lambda_id: float = 1e-3
    lambda_age: float = 1e-2
    lr: float = 2e-3
    lr_decay: float = 0.97
    batch_size: int = 100
    epochs_stage1: int = 30
    epochs_stage2: int = 30
    seed: int = 0
    scale: str = "desk_scale"  # "desk_scale" | "paper_scale"
    z_dim: int = 50
    backbone_frozen: bool = True
    retain_reconstruction_stage2: bool = False
    center_crop: bool = True

    def __post_init__(self):
        if min(self.lambda_adv, self.lambda_id, self.lambda_age) <= 0:
            raise InvalidConfig("all lambda weights must be > 0")
        if self.lr <= 0:
            raise InvalidConfig("lr must be > 0")
        if not 0 < self.lr_decay < 1:
            raise InvalidConfig("lr_decay must lie in (0, 1)")
        if self.batch_size < 2:
            raise InvalidConfig("batch_size must be >= 2")
        if self.scale not in ("desk_scale", "paper_scale"):
            raise InvalidConfig(f"unknown scale {self.scale!r}")
        if self.z_dim < 1:
            raise InvalidConfig("z_dim must be >= 1")

    @classmethod
    def from_file(cls, path: str | Path) -> "TrainConfig":
        """Read a flat key-value (YAML) config file mirroring the fields."""
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise InvalidConfig(f"{path}: expected a flat key-value mapping")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise InvalidConfig(f"{path}: unknown config keys {sorted(unknown)}")
        return cls(**raw)

    def to_file(self, path: str | Path) -> None:
        with open(path, "w") as fh:
            yaml.safe_dump(dataclasses.asdict(self), fh, sort_keys=True)

    def lr_at(self, epoch: int) -> float:
        """Exponential per-epoch schedule; epoch is 1-based, lr(1) = lr."""
        return self.lr * self.lr_decay ** (epoch - 1)


def total_objective(adv: float, z_I: float, rec: float, id: float, age: float,
                    config: TrainConfig) -> float:
    """Weighted sum of the five loss components."""
    parts = (adv, z_I, rec, id, age)
    if not all(math.isfinite(float(p)) for p in parts):
        raise NonFiniteLoss(f"non-finite loss component in {parts}")
    return (
        config.lambda_adv * adv
        + config.lambda_id * (z_I + rec + id)
        + config.lambda_age * age
    )


@dataclass
class LossBundle:
    adv: float
    z_I: float
    rec: float
    id: float
    age: float
    total: float

    @classmethod
    def from_components(cls, *, adv: float, z_I: float, rec: float, id: float,
                        age: float, config: TrainConfig) -> "LossBundle":
        return cls(adv=adv, z_I=z_I, rec=rec, id=id, age=age,
                   total=total_objective(adv, z_I, rec, id, age, config))


@dataclass
class ModelBundle:
    identity_encoder: IdentityEncoder
    age_encoder: AgeEncoder
    prior_discriminator: PriorDiscriminator
    generator: Generator
    image_discriminator: ImageDiscriminator

    def named(self) -> dict[str, torch.nn.Module]:
        return {name: getattr(self, name) for name in MODEL_NAMES}

    def eval(self) -> "ModelBundle":
        for m in self.named().values():
            m.eval()
        return self


def build_models(config: TrainConfig) -> ModelBundle:
    """Construct the five networks (order fixed for seeded reproducibility)."""
    return ModelBundle(
        identity_encoder=IdentityEncoder(z_dim=config.z_dim, scale=config.scale),
        age_encoder=AgeEncoder(AgeEncoderConfig(
            backbone=config.scale, backbone_frozen=config.backbone_frozen)),
        prior_discriminator=PriorDiscriminator(z_dim=config.z_dim),
        generator=Generator(z_dim=config.z_dim, scale=config.scale),
        image_discriminator=ImageDiscriminator(scale=config.scale),
    )


def build_optimizers(models: ModelBundle, config: TrainConfig) -> dict[str, torch.optim.Adam]:
    """One adaptive-moment optimizer per network, plus a dedicated instance for
    the generator's adversarial sub-step.

    The adversarial refinement must not share moment estimates with the
    reconstruction path: its gradients are much larger, and a shared second
    moment would crush the reconstruction step sizes.
    """
    return {
        "identity_encoder": torch.optim.Adam(models.identity_encoder.parameters(), lr=config.lr),
        "age_encoder": torch.optim.Adam(models.age_encoder.trainable_parameters(), lr=config.lr),
        "prior_discriminator": torch.optim.Adam(models.prior_discriminator.parameters(), lr=config.lr),
        "generator": torch.optim.Adam(models.generator.parameters(), lr=config.lr),
        "generator_adv": torch.optim.Adam(models.generator.parameters(),
                                          lr=config.lr * G_ADV_LR_SCALE),
        "image_discriminator": torch.optim.Adam(models.image_discriminator.parameters(), lr=config.lr),
    }


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


def parameter_checksum(module: torch.nn.Module) -> str:
    """SHA-256 over the raw bytes of all parameters and buffers."""
    digest = hashlib.sha256()
    for key, tensor in sorted(module.state_dict().items()):
        digest.update(key.encode())
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


class TrainingData:
    """Aligned 128px and 224px preprocessed views of the training images."""

    def __init__(self, images128: torch.Tensor, images224: torch.Tensor):
        if len(images128) != len(images224):
            raise ValueError("image stacks must be aligned")
        self.images128 = images128.float()
        self.images224 = images224.float()

    def __len__(self) -> int:
        return len(self.images128)

    @classmethod
    def from_arrays(cls, hwc128: np.ndarray, hwc224: np.ndarray) -> "TrainingData":
        """From (N, H, W, 3) float arrays in [-1, 1]."""
        to_nchw = lambda a: torch.from_numpy(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))
        return cls(to_nchw(hwc128), to_nchw(hwc224))

    @classmethod
    def from_records(
        cls,
        records: Sequence[ImageRecord],
        crop: bool = True,
        cache_dir: Optional[str | Path] = None,
        workers: int = 1,
    ) -> "TrainingData":
        a128 = preprocess_batch(records, 128, crop=crop, cache_dir=cache_dir, workers=workers)
        a224 = preprocess_batch(records, 224, crop=crop, cache_dir=cache_dir, workers=workers)
        return cls.from_arrays(a128, a224)


class Checkpoint:
    """Serialized parameters + optimizer state + stage marker + config."""

    def __init__(self, models: ModelBundle, optimizers: dict, stage: str,
                 epoch: int, config: TrainConfig):
        self.models = models
        self.optimizers = optimizers
        self.stage = stage
        self.epoch = epoch
        self.config = config

    @property
    def seed(self) -> int:
        return self.config.seed

    def checkpoint_id(self) -> str:
        digest = hashlib.sha256()
        for name in MODEL_NAMES:
            digest.update(parameter_checksum(getattr(self.models, name)).encode())
        return f"{self.stage}-epoch{self.epoch}-{digest.hexdigest()[:12]}"

    def save(self, directory: str | Path) -> Path:
        """Atomic write: stage into a sibling temp dir, then rename."""
        directory = Path(directory)
        tmp = directory.with_name(directory.name + ".tmp")
        if tmp.exists():
            shutil.rmtree(tmp)
        tmp.mkdir(parents=True)
        for name, module in self.models.named().items():
            torch.save(module.state_dict(), tmp / f"{name}.pt")
        torch.save({k: v.state_dict() for k, v in self.optimizers.items()},
                   tmp / "optimizers.pt")
        meta = {
            "stage": self.stage,
            "epoch": self.epoch,
            "seed": self.seed,
            "config": dataclasses.asdict(self.config),
        }
        (tmp / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))
        if directory.exists():
            shutil.rmtree(directory)
        tmp.rename(directory)
        return directory

    @classmethod
    def load(cls, directory: str | Path) -> "Checkpoint":
        directory = Path(directory)
        meta = json.loads((directory / "meta.json").read_text())
        config = TrainConfig(**meta["config"])
        with torch.random.fork_rng():  # model construction must not disturb global RNG
            models = build_models(config)
        for name, module in models.named().items():
            module.load_state_dict(torch.load(directory / f"{name}.pt", weights_only=True))
        optimizers = build_optimizers(models, config)
        opt_states = torch.load(directory / "optimizers.pt", weights_only=False)
        for name, opt in optimizers.items():
            opt.load_state_dict(opt_states[name])
        return cls(models, optimizers, meta["stage"], meta["epoch"], config)


def sample_reference_pairs(n_records: int, count: int, seed: int) -> np.ndarray:
    """Independent uniform (identity_index, age_index) pairs, shape (count, 2).

    Indices are drawn independently, so a pair hits the same record with
    probability 1/n_records.
    """
    rng = np.random.default_rng(seed)
    return rng.integers(0, n_records, size=(count, 2))


class _LossWriter:
    def __init__(self, out_dir: Path, truncate: bool):
        out_dir.mkdir(parents=True, exist_ok=True)
        self.path = out_dir / "losses.csv"
        mode = "w" if truncate or not self.path.exists() else "a"
        self.fh = open(self.path, mode, newline="")
        self.writer = csv.writer(self.fh)
        if mode == "w":
            self.writer.writerow(LOSS_CSV_COLUMNS)

    def write(self, stage: str, epoch: int, step: int, bundle: LossBundle, lr: float):
        self.writer.writerow([
            stage, epoch, step,
            repr(bundle.adv), repr(bundle.z_I), repr(bundle.rec),
            repr(bundle.id), repr(bundle.age), repr(bundle.total), repr(lr),
        ])
        self.fh.flush()

    def close(self):
        self.fh.close()


def read_loss_csv(path: str | Path) -> list[dict]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            parsed = {"stage": row["stage"], "epoch": int(row["epoch"]), "step": int(row["step"])}
            for key in ("adv", "z_I", "rec", "id", "age", "total", "lr"):
                parsed[key] = float(row[key])
            rows.append(parsed)
    return rows


def _set_lr(optimizers: dict, names: Sequence[str], lr: float) -> None:
    for name in names:
        for group in optimizers[name].param_groups:
            group["lr"] = lr


def _clamp_scores(s: torch.Tensor) -> torch.Tensor:
    return s.clamp(SCORE_EPS, 1.0 - SCORE_EPS)


def _check_finite(bundle: LossBundle, last_checkpoint: Optional[Path]) -> None:
    values = (bundle.adv, bundle.z_I, bundle.rec, bundle.id, bundle.age, bundle.total)
    if not all(math.isfinite(v) for v in values):
        raise DivergenceDetected(
            f"non-finite loss {bundle}; last good checkpoint: {last_checkpoint}",
            last_checkpoint=last_checkpoint,
        )


def _epoch_batches(n: int, batch_size: int, generator: torch.Generator):
    order = torch.randperm(n, generator=generator)
    for start in range(0, n, batch_size):
        batch = order[start : start + batch_size]
        if len(batch) == 1 and n > 1:  # batch-norm in train mode needs >= 2
            continue
        yield batch


def train_stage1(config: TrainConfig, data: TrainingData, out_dir: str | Path) -> Checkpoint:
    """Reconstruction stage with tied references; returns the final checkpoint."""
    if len(data) == 0:
        raise EmptyDataset("stage 1 requires a nonempty training split")
    out_dir = Path(out_dir)
    seed_everything(config.seed)
    models = build_models(config)
    optimizers = build_optimizers(models, config)
    e_i, e_a = models.identity_encoder, models.age_encoder
    d_i, gen, d_img = models.prior_discriminator, models.generator, models.image_discriminator

    g_data = torch.Generator().manual_seed(config.seed)
    g_prior = torch.Generator().manual_seed(config.seed + 1)
    writer = _LossWriter(out_dir, truncate=True)
    last_ckpt_path: Optional[Path] = None
    checkpoint = Checkpoint(models, optimizers, STAGE1, 0, config)
    lam_adv, lam_id, lam_age = config.lambda_adv, config.lambda_id, config.lambda_age

    try:
        for epoch in range(1, config.epochs_stage1 + 1):
            lr = config.lr_at(epoch)
            _set_lr(optimizers, MODEL_NAMES, lr)
            _set_lr(optimizers, ["generator_adv"], lr * G_ADV_LR_SCALE)
            epoch_rec = []
            for step, idx in enumerate(_epoch_batches(len(data), config.batch_size, g_data), start=1):
                x128 = data.images128[idx]
                x224 = data.images224[idx]

                # 1. prior discriminator
                optimizers["prior_discriminator"].zero_grad()
                with torch.no_grad():
                    z_detached = e_i(x128)
                z_prior = prior_sample_from(g_prior, len(idx), config.z_dim)
                loss_di, _ = prior_adversarial_loss(
                    _clamp_scores(d_i(z_prior)), _clamp_scores(d_i(z_detached))
                )
                (lam_id * loss_di).backward()
                optimizers["prior_discriminator"].step()

                # 2. image discriminator (both references are the same image here)
                optimizers["image_discriminator"].zero_grad()
                with torch.no_grad():
                    synth_detached = gen(compose_joint_feature(z_detached, e_a(x224)))
                d_real = _clamp_scores(d_img(x128))
                d_fake = _clamp_scores(d_img(synth_detached))
                loss_d, _ = image_adversarial_loss(d_real, d_real, d_fake)
                (lam_adv * loss_d).backward()
                optimizers["image_discriminator"].step()

                # 3. joint autoencoder step: identity encoder + age head + generator.
                # Each component loss enters this sub-step at unit weight: the
                # adaptive optimizer normalizes overall gradient scale per step,
                # so the configured lambdas control the logged totals while the
                # sub-step partition controls which parameters each loss moves.
                for name in ("identity_encoder", "age_encoder", "generator"):
                    optimizers[name].zero_grad()
                z_id = e_i(x128)
                z_age = e_a(x224)
                synth = gen(compose_joint_feature(z_id, z_age))
                l_rec = reconstruction_loss(x128, synth)
                l_zi_enc = -torch.log(_clamp_scores(d_i(z_id))).mean()
                # age-preservation target acts as a ground-truth label for the
                # age head; the synthesis branch is detached so this gradient
                # trains the head only, never the generator
                l_age = age_preservation_loss(
                    z_age.detach(), e_a(resize_for_age_input(synth.detach()))
                )
                (l_rec + l_zi_enc + l_age).backward()
                for name in ("identity_encoder", "age_encoder", "generator"):
                    optimizers[name].step()

                # 4. generator adversarial step (own optimizer, reduced rate)
                optimizers["generator_adv"].zero_grad()
                with torch.no_grad():
                    joint = compose_joint_feature(e_i(x128), e_a(x224))
                synth_g = gen(joint)
                loss_g = -torch.log(_clamp_scores(d_img(synth_g))).mean()
                (lam_adv * loss_g).backward()
                optimizers["generator_adv"].step()

                bundle = LossBundle.from_components(
                    adv=loss_d.item(), z_I=loss_di.item(), rec=l_rec.item(),
                    id=0.0, age=l_age.item(), config=config,
                )
                _check_finite(bundle, last_ckpt_path)
                writer.write(STAGE1, epoch, step, bundle, lr)
                epoch_rec.append(bundle.rec)

            checkpoint = Checkpoint(models, optimizers, STAGE1, epoch, config)
            last_ckpt_path = checkpoint.save(out_dir / "ckpt" / STAGE1 / f"epoch_{epoch}")
            log.info("stage1 epoch %d/%d: mean rec %.4f  lr %.2e",
                     epoch, config.epochs_stage1, float(np.mean(epoch_rec)), lr)
    finally:
        writer.close()
    return checkpoint


def train_stage2(config: TrainConfig, stage1_checkpoint: Checkpoint,
                 data: TrainingData, out_dir: str | Path) -> Checkpoint:
    """Preservation stage: frozen agents, independent reference pairs."""
    if stage1_checkpoint.stage != STAGE1:
        raise WrongStageCheckpoint(
            f"stage 2 requires a stage-1 checkpoint, got {stage1_checkpoint.stage!r}"
        )
    if len(data) == 0:
        raise EmptyDataset("stage 2 requires a nonempty training split")
    out_dir = Path(out_dir)
    seed_everything(config.seed)
    models = stage1_checkpoint.models
    optimizers = stage1_checkpoint.optimizers
    e_i, e_a = models.identity_encoder, models.age_encoder
    d_i, gen, d_img = models.prior_discriminator, models.generator, models.image_discriminator

    frozen = {"identity_encoder": e_i, "age_encoder": e_a, "prior_discriminator": d_i}
    for module in frozen.values():
        module.eval()
        for p in module.parameters():
            p.requires_grad_(False)
    frozen_sums = {name: parameter_checksum(m) for name, m in frozen.items()}

    writer = _LossWriter(out_dir, truncate=False)
    last_ckpt_path: Optional[Path] = None
    checkpoint = Checkpoint(models, optimizers, STAGE2, 0, config)
    lam_adv, lam_id, lam_age = config.lambda_adv, config.lambda_id, config.lambda_age
    n = len(data)

    try:
        for epoch in range(1, config.epochs_stage2 + 1):
            lr = config.lr_at(epoch)
            _set_lr(optimizers, ["generator", "image_discriminator"], lr)
            pairs = sample_reference_pairs(n, n, seed=config.seed * 100003 + epoch)
            epoch_id = []
            step = 0
            for start in range(0, n, config.batch_size):
                batch = pairs[start : start + config.batch_size]
                if len(batch) == 1 and n > 1:  # batch-norm in train mode needs >= 2
                    continue
                step += 1
                idx_id = torch.from_numpy(batch[:, 0])
                idx_age = torch.from_numpy(batch[:, 1])
                x_id128 = data.images128[idx_id]
                x_id224 = data.images224[idx_id]
                x_age128 = data.images128[idx_age]
                x_age224 = data.images224[idx_age]

                # generator step: adversarial + both preservation losses
                optimizers["generator"].zero_grad()
                with torch.no_grad():
                    z_id = e_i(x_id128)
                    z_age = e_a(x_age224)
                synth = gen(compose_joint_feature(z_id, z_age))
                l_advg = -torch.log(_clamp_scores(d_img(synth))).mean()
                l_id = identity_preservation_loss(z_id, e_i(synth))
                l_age = age_preservation_loss(z_age, e_a(resize_for_age_input(synth)))
                g_loss = lam_adv * l_advg + lam_id * l_id + lam_age * l_age
                l_rec_val = 0.0
                if config.retain_reconstruction_stage2:
                    with torch.no_grad():
                        z_age_own = e_a(x_id224)
                    recon = gen(compose_joint_feature(z_id, z_age_own))
                    l_rec = reconstruction_loss(x_id128, recon)
                    g_loss = g_loss + lam_id * l_rec
                    l_rec_val = l_rec.item()
                g_loss.backward()
                optimizers["generator"].step()

                # discriminator step: identity ref, age ref real; synthesis fake
                optimizers["image_discriminator"].zero_grad()
                d_id_ref = _clamp_scores(d_img(x_id128))
                d_age_ref = _clamp_scores(d_img(x_age128))
                d_fake = _clamp_scores(d_img(synth.detach()))
                loss_d, _ = image_adversarial_loss(d_id_ref, d_age_ref, d_fake)
                (lam_adv * loss_d).backward()
                optimizers["image_discriminator"].step()

                bundle = LossBundle.from_components(
                    adv=loss_d.item(), z_I=0.0, rec=l_rec_val,
                    id=l_id.item(), age=l_age.item(), config=config,
                )
                _check_finite(bundle, last_ckpt_path)
                writer.write(STAGE2, epoch, step, bundle, lr)
                epoch_id.append(bundle.id)

            for name, module in frozen.items():
                if parameter_checksum(module) != frozen_sums[name]:
                    raise RuntimeError(f"frozen module {name} drifted during stage 2")
            checkpoint = Checkpoint(models, optimizers, STAGE2, epoch, config)
            last_ckpt_path = checkpoint.save(out_dir / "ckpt" / STAGE2 / f"epoch_{epoch}")
            log.info("stage2 epoch %d/%d: mean id %.4f  lr %.2e",
                     epoch, config.epochs_stage2, float(np.mean(epoch_id)), lr)
    finally:
        writer.close()
    return checkpoint
