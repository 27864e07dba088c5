"""Identity encoder, uniform-prior discriminator and their losses.

The encoder maps a 128x128x3 image in [-1, 1] to a z_dim identity feature in
[-1, 1] (tanh output). A small MLP discriminator pushes the encoded features
toward a Uniform(-1, 1) prior through the usual two-player objective; the
encoder side uses the non-saturating form. Reconstruction is a mean L1 pixel
loss, identity preservation a batch-averaged L2 feature distance.
"""

from __future__ import annotations

import torch
from torch import nn

from .errors import InvalidDim, LengthMismatch, ScoreOutOfRange, ShapeMismatch

IDENTITY_INPUT_SIZE = 128
DEFAULT_Z_DIM = 50

_DESK_CHANNELS = [3, 16, 32, 64, 64]
_PAPER_CHANNELS = [3, 64, 128, 256, 512, 1024]


class IdentityEncoder(nn.Module):
    """Strided conv blocks + FC to z_dim, tanh-bounded.

    Batch norm after every conv but the first keeps activations in range, and a
    non-affine batch norm on the code layer keeps the pre-tanh values from
    saturating or collapsing over long optimizer walks. Frozen/eval use relies
    on the tracked running statistics, so a frozen encoder stays bit-stable.
    """

    def __init__(self, z_dim: int = DEFAULT_Z_DIM, scale: str = "desk_scale"):
        super().__init__()
        if z_dim < 1:
            raise InvalidDim(f"z_dim must be >= 1, got {z_dim}")
        self.z_dim = z_dim
        channels = _DESK_CHANNELS if scale == "desk_scale" else _PAPER_CHANNELS
        layers = []
        for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:])):
            layers.append(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.BatchNorm2d(c_out))
            layers.append(nn.LeakyReLU(0.2))
        side = IDENTITY_INPUT_SIZE // 2 ** (len(channels) - 1)
        layers += [
            nn.Flatten(),
            nn.Linear(channels[-1] * side * side, z_dim),
            nn.BatchNorm1d(z_dim, affine=False),
            nn.Tanh(),
        ]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1:] != (3, IDENTITY_INPUT_SIZE, IDENTITY_INPUT_SIZE):
            raise ShapeMismatch(
                f"expected (B, 3, {IDENTITY_INPUT_SIZE}, {IDENTITY_INPUT_SIZE}), "
                f"got {tuple(x.shape)}"
            )
        z = self.net(x)
        return z.squeeze(0) if squeeze else z


class PriorDiscriminator(nn.Module):
    """4-layer MLP scoring whether a latent vector looks uniform-distributed."""

    def __init__(self, z_dim: int = DEFAULT_Z_DIM):
        super().__init__()
        self.net = nn.Sequential(
            nn.Linear(z_dim, 64), nn.LeakyReLU(0.2),
            nn.Linear(64, 32), nn.LeakyReLU(0.2),
            nn.Linear(32, 16), nn.LeakyReLU(0.2),
            nn.Linear(16, 1), nn.Sigmoid(),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z).squeeze(-1)


def sample_prior(
    z_dim: int, seed: int, count: int | None = None
) -> torch.Tensor:
    """Seed-deterministic element-wise Uniform(-1, 1) draw.

    Returns shape (z_dim,) or, with ``count``, (count, z_dim).
    """
    if z_dim < 1:
        raise InvalidDim(f"z_dim must be >= 1, got {z_dim}")
    gen = torch.Generator().manual_seed(seed)
    shape = (z_dim,) if count is None else (count, z_dim)
    return torch.rand(shape, generator=gen) * 2.0 - 1.0


def prior_sample_from(gen: torch.Generator, count: int, z_dim: int) -> torch.Tensor:
    """Uniform(-1, 1) batch from an existing generator (training loop use)."""
    return torch.rand((count, z_dim), generator=gen) * 2.0 - 1.0


def _check_scores(*score_batches: torch.Tensor) -> None:
    for s in score_batches:
        if s.numel() == 0 or (s <= 0).any() or (s >= 1).any():
            raise ScoreOutOfRange("scores must lie strictly inside (0, 1)")


def prior_adversarial_loss(
    d_real: torch.Tensor, d_fake: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Two-player losses for prior matching on the identity feature.

    d_real scores prior samples, d_fake scores encoded features; both are
    post-sigmoid probabilities. Returns (loss_D, loss_E) where
    loss_D = -mean[log d_real + log(1 - d_fake)] and the encoder side is the
    non-saturating loss_E = -mean[log d_fake].
    """
    _check_scores(d_real, d_fake)
    loss_d = -(torch.log(d_real).mean() + torch.log1p(-d_fake).mean())
    loss_e = -torch.log(d_fake).mean()
    return loss_d, loss_e


def reconstruction_loss(original: torch.Tensor, reconstructed: torch.Tensor) -> torch.Tensor:
    """Mean absolute pixel difference. Mean (not sum) keeps the value
    resolution-independent."""
    if original.shape != reconstructed.shape:
        raise ShapeMismatch(
            f"{tuple(original.shape)} vs {tuple(reconstructed.shape)}"
        )
    return (original - reconstructed).abs().mean()


def identity_preservation_loss(z_ref: torch.Tensor, z_syn: torch.Tensor) -> torch.Tensor:
    """L2 distance between identity features, averaged over the batch."""
    if z_ref.shape != z_syn.shape:
        raise LengthMismatch(f"{tuple(z_ref.shape)} vs {tuple(z_syn.shape)}")
    if z_ref.dim() == 1:
        z_ref, z_syn = z_ref.unsqueeze(0), z_syn.unsqueeze(0)
    return torch.linalg.vector_norm(z_ref - z_syn, dim=-1).mean()
