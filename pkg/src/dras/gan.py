"""Joint-feature generator and image discriminator.

The identity and age features are concatenated (identity first) and decoded by
a transpose-conv generator into a 128x128x3 image in [-1, 1]. The image
discriminator scores 128x128 images with a sigmoid head. The discriminator
treats BOTH reference images as real and the synthesized image as fake, so its
loss has three log terms; the generator side is non-saturating.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn
from PIL import Image

from .age_agent import AGE_FEATURE_DIM
from .errors import InvalidComponent, LengthMismatch, ScoreOutOfRange, ShapeMismatch
from .identity_agent import IDENTITY_INPUT_SIZE

OUTPUT_SIZE = IDENTITY_INPUT_SIZE


def compose_joint_feature(z_id: torch.Tensor, z_age: torch.Tensor) -> torch.Tensor:
    """Concatenate identity and age features, identity half first."""
    if z_id.dim() != z_age.dim() or z_id.dim() not in (1, 2):
        raise InvalidComponent(
            f"features must both be 1-D or 2-D, got {z_id.dim()}-D and {z_age.dim()}-D"
        )
    if z_id.dim() == 2 and z_id.shape[0] != z_age.shape[0]:
        raise InvalidComponent(
            f"batch sizes differ: {z_id.shape[0]} vs {z_age.shape[0]}"
        )
    if z_id.shape[-1] < 1 or z_age.shape[-1] < 1:
        raise InvalidComponent("empty feature vector")
    return torch.cat([z_id, z_age], dim=-1)


def split_joint_feature(
    joint: torch.Tensor, z_dim: int
) -> tuple[torch.Tensor, torch.Tensor]:
    """Inverse of compose_joint_feature."""
    if joint.shape[-1] != z_dim + AGE_FEATURE_DIM:
        raise LengthMismatch(
            f"joint length {joint.shape[-1]} != {z_dim} + {AGE_FEATURE_DIM}"
        )
    return joint[..., :z_dim], joint[..., z_dim:]


class Generator(nn.Module):
    """FC projection + strided transpose-conv stack up to 128x128, tanh output.

    Batch norm after every upsampling block except the last keeps the decoder
    stable over long optimizer walks at small batch sizes.
    """

    def __init__(self, z_dim: int = 50, scale: str = "desk_scale"):
        super().__init__()
        self.joint_dim = z_dim + AGE_FEATURE_DIM
        if scale == "desk_scale":
            channels, start = [256, 128, 64, 32], 8
        else:
            channels, start = [1024, 512, 256, 128, 64], 4
        self.start = start
        self.c0 = channels[0]
        self.fc = nn.Linear(self.joint_dim, channels[0] * start * start)
        blocks = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            blocks += [
                nn.ConvTranspose2d(c_in, c_out, 4, stride=2, padding=1),
                nn.BatchNorm2d(c_out),
                nn.ReLU(inplace=True),
            ]
        blocks += [
            nn.ConvTranspose2d(channels[-1], 3, 4, stride=2, padding=1),
            nn.Tanh(),
        ]
        self.net = nn.Sequential(*blocks)

    def forward(self, joint: torch.Tensor) -> torch.Tensor:
        squeeze = joint.dim() == 1
        if squeeze:
            joint = joint.unsqueeze(0)
        if joint.shape[-1] != self.joint_dim:
            raise LengthMismatch(
                f"joint feature length {joint.shape[-1]}, model expects {self.joint_dim}"
            )
        x = self.fc(joint).view(-1, self.c0, self.start, self.start)
        img = self.net(x)
        return img.squeeze(0) if squeeze else img


class ImageDiscriminator(nn.Module):
    """Strided conv stack + FC head, sigmoid probability per image."""

    def __init__(self, scale: str = "desk_scale"):
        super().__init__()
        channels = [3, 8, 16, 32, 64] if scale == "desk_scale" else [3, 16, 32, 64, 128]
        layers = []
        for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:])):
            layers.append(nn.Conv2d(c_in, c_out, 4, stride=2, padding=1))
            if i > 0:
                layers.append(nn.BatchNorm2d(c_out))
            layers.append(nn.LeakyReLU(0.2))
        side = OUTPUT_SIZE // 2 ** (len(channels) - 1)
        flat = channels[-1] * side * side
        if scale == "desk_scale":
            layers += [nn.Flatten(), nn.Linear(flat, 1), nn.Sigmoid()]
        else:
            layers += [
                nn.Flatten(),
                nn.Linear(flat, 1024), nn.LeakyReLU(0.2),
                nn.Linear(1024, 1), nn.Sigmoid(),
            ]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1:] != (3, OUTPUT_SIZE, OUTPUT_SIZE):
            raise ShapeMismatch(
                f"expected (B, 3, {OUTPUT_SIZE}, {OUTPUT_SIZE}), got {tuple(x.shape)}"
            )
        score = self.net(x).squeeze(-1)
        return score.squeeze(0) if squeeze else score


def image_adversarial_loss(
    d_id_ref: torch.Tensor, d_age_ref: torch.Tensor, d_fake: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Three-term discriminator loss and non-saturating generator loss.

    loss_D = -mean[log d_id_ref + log d_age_ref + log(1 - d_fake)]: both
    reference images count as real. loss_G = -mean[log d_fake].
    """
    for s in (d_id_ref, d_age_ref, d_fake):
        if s.numel() == 0 or (s <= 0).any() or (s >= 1).any():
            raise ScoreOutOfRange("scores must lie strictly inside (0, 1)")
    loss_d = -(
        torch.log(d_id_ref).mean()
        + torch.log(d_age_ref).mean()
        + torch.log1p(-d_fake).mean()
    )
    loss_g = -torch.log(d_fake).mean()
    return loss_d, loss_g


def to_uint8(pixels: torch.Tensor | np.ndarray) -> np.ndarray:
    """Map [-1, 1] pixels to 8-bit via round((v + 1) * 127.5), clamped.

    uint8 input is returned unchanged, so the mapping is idempotent.
    """
    if isinstance(pixels, torch.Tensor):
        pixels = pixels.detach().cpu().numpy()
    if pixels.dtype == np.uint8:
        return pixels
    if pixels.ndim == 3 and pixels.shape[0] == 3:  # CHW -> HWC
        pixels = np.transpose(pixels, (1, 2, 0))
    scaled = np.rint((pixels + 1.0) * 127.5)
    return np.clip(scaled, 0, 255).astype(np.uint8)


def export_png(pixels: torch.Tensor | np.ndarray, path) -> None:
    """Write a synthesized image as 8-bit PNG (byte-deterministic)."""
    Image.fromarray(to_uint8(pixels)).save(path, format="PNG")
