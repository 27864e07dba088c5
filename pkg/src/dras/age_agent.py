"""Apparent-age encoder and the age preservation loss.

The encoder maps a 224x224x3 image in [-1, 1] to a 50-dimensional age feature
in [-1, 1]: a convolutional backbone followed by a two-layer head
(FC-1024 -> FC-50, tanh). Two backbones are provided:

  * ``desk_scale``  - a small 4-block convnet, trains in seconds on CPU.
  * ``paper_scale`` - VGG-16-shaped; weights can be imported from a flat
    key->array .npz whose keys match ``backbone.state_dict()``.

By default only the head is optimized; the backbone stays frozen.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np
import torch
from torch import nn

from .errors import LengthMismatch, ShapeMismatch

AGE_FEATURE_DIM = 50
AGE_INPUT_SIZE = 224
HEAD_HIDDEN_DIM = 1024


@dataclass
class AgeEncoderConfig:
    backbone: str = "desk_scale"  # "desk_scale" | "paper_scale"
    backbone_frozen: bool = True

    # (1024, 50) is fixed; exposed for introspection only.
    @property
    def head_dims(self) -> tuple[int, int]:
        return (HEAD_HIDDEN_DIM, AGE_FEATURE_DIM)

    def __post_init__(self):
        if self.backbone not in ("desk_scale", "paper_scale"):
            raise ValueError(f"unknown backbone {self.backbone!r}")


def _desk_backbone() -> tuple[nn.Module, int]:
    layers = []
    channels = [3, 16, 32, 64, 64]
    for c_in, c_out in zip(channels[:-1], channels[1:]):
        layers += [nn.Conv2d(c_in, c_out, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
    layers += [nn.AdaptiveAvgPool2d(4), nn.Flatten()]
    return nn.Sequential(*layers), 64 * 4 * 4


# Standard VGG-16 convolutional configuration ("M" = 2x2 max pool).
_VGG16_CFG = [64, 64, "M", 128, 128, "M", 256, 256, 256, "M",
              512, 512, 512, "M", 512, 512, 512, "M"]


def _vgg16_backbone() -> tuple[nn.Module, int]:
    layers: list[nn.Module] = []
    c_in = 3
    for v in _VGG16_CFG:
        if v == "M":
            layers.append(nn.MaxPool2d(2, 2))
        else:
            layers += [nn.Conv2d(c_in, v, 3, padding=1), nn.ReLU(inplace=True)]
            c_in = v
    layers += [
        nn.Flatten(),
        nn.Linear(512 * 7 * 7, 4096),
        nn.ReLU(inplace=True),
        nn.Linear(4096, 4096),
        nn.ReLU(inplace=True),
    ]
    return nn.Sequential(*layers), 4096


class AgeEncoder(nn.Module):
    """Backbone + (FC-1024, FC-50) head with a saturating tanh output."""

    def __init__(self, config: AgeEncoderConfig | None = None):
        super().__init__()
        self.config = config or AgeEncoderConfig()
        if self.config.backbone == "desk_scale":
            self.backbone, feat_dim = _desk_backbone()
        else:
            self.backbone, feat_dim = _vgg16_backbone()
        self.head = nn.Sequential(
            nn.Linear(feat_dim, HEAD_HIDDEN_DIM),
            nn.ReLU(inplace=True),
            nn.Linear(HEAD_HIDDEN_DIM, AGE_FEATURE_DIM),
            nn.Tanh(),
        )
        if self.config.backbone_frozen:
            for p in self.backbone.parameters():
                p.requires_grad_(False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        if x.dim() != 4 or x.shape[1:] != (3, AGE_INPUT_SIZE, AGE_INPUT_SIZE):
            raise ShapeMismatch(
                f"expected (B, 3, {AGE_INPUT_SIZE}, {AGE_INPUT_SIZE}), got {tuple(x.shape)}"
            )
        z = self.head(self.backbone(x))
        return z.squeeze(0) if squeeze else z

    def head_parameters(self) -> Iterator[nn.Parameter]:
        return self.head.parameters()

    def trainable_parameters(self) -> Iterator[nn.Parameter]:
        if self.config.backbone_frozen:
            return self.head.parameters()
        return self.parameters()

    def load_backbone_arrays(self, source: str | dict) -> None:
        """Load backbone weights from a flat key->array mapping or .npz path.

        Keys must match ``self.backbone.state_dict()`` (e.g. "1.weight");
        array shapes must agree exactly.
        """
        if isinstance(source, str):
            with np.load(source) as data:
                arrays = {k: data[k] for k in data.files}
        else:
            arrays = dict(source)
        state = self.backbone.state_dict()
        missing = set(state) - set(arrays)
        if missing:
            raise KeyError(f"backbone import missing keys: {sorted(missing)[:5]}...")
        tensors = {}
        for key, ref in state.items():
            arr = torch.as_tensor(arrays[key], dtype=ref.dtype)
            if arr.shape != ref.shape:
                raise ShapeMismatch(
                    f"backbone key {key}: got {tuple(arr.shape)}, want {tuple(ref.shape)}"
                )
            tensors[key] = arr
        self.backbone.load_state_dict(tensors)


def age_preservation_loss(ref: torch.Tensor, syn: torch.Tensor) -> torch.Tensor:
    """L2 distance between age features, averaged over the batch.

    Accepts (50,) vectors or (B, 50) batches. Symmetric; zero iff equal.
    """
    if ref.shape != syn.shape:
        raise LengthMismatch(f"{tuple(ref.shape)} vs {tuple(syn.shape)}")
    if ref.dim() == 1:
        ref, syn = ref.unsqueeze(0), syn.unsqueeze(0)
    return torch.linalg.vector_norm(ref - syn, dim=-1).mean()


def resize_for_age_input(images: torch.Tensor) -> torch.Tensor:
    """Differentiably upsample 128x128 images to the 224x224 age-path size."""
    return torch.nn.functional.interpolate(
        images, size=(AGE_INPUT_SIZE, AGE_INPUT_SIZE), mode="bilinear", align_corners=False
    )
