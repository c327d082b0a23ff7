"""Fusion segmenters mapping a temporal window to per-pixel class logits.

Two fusion policies are supported:

* ``CE`` (channel enhancement): the instant, integral and derivative views are
  concatenated along channels and run through one shared encoder.
* ``FI`` (feature interaction): each view has its own encoder; the three
  feature maps are concatenated and mixed by a learned 1x1 convolution.

Both share the same decoder head. Logits are laid out ``(B, C, H, W)``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ShapeError

POLICIES = ("CE", "FI")


@dataclass(frozen=True)
class NetworkSpec:
    policy: str | None = "FI"
    num_classes: int = 8
    backbone_width: int = 16
    backbone_depth: int = 2
    input_channels: int = 3

    def validate(self) -> None:
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}, got {self.policy!r}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.backbone_width < 1 or self.backbone_depth < 1 or self.input_channels < 1:
            raise ConfigError("backbone_width, backbone_depth and input_channels must be >= 1")

    @property
    def stride(self) -> int:
        return 2**self.backbone_depth

    @property
    def backbone_in_channels(self) -> int:
        return 3 * self.input_channels if self.policy == "CE" else self.input_channels

    def check_resolution(self, height: int, width: int) -> None:
        if height % self.stride or width % self.stride:
            raise ConfigError(
                f"input {height}x{width} is not divisible by the encoder stride {self.stride}"
            )

    def to_dict(self) -> dict:
        return asdict(self)


class WindowBatch(NamedTuple):
    insu: torch.Tensor
    intu: torch.Tensor
    du: torch.Tensor
    labels: torch.Tensor


def collate(windows: Sequence, device: str | torch.device = "cpu") -> WindowBatch:
    """Stack windows into channel-first tensors."""

    def stack(name):
        arr = np.stack([getattr(w, name) for w in windows]).transpose(0, 3, 1, 2)
        return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32)).to(device)

    labels = torch.from_numpy(np.stack([w.label for w in windows]).astype(np.int64)).to(device)
    return WindowBatch(stack("insu"), stack("intu"), stack("du"), labels)


class Encoder(nn.Module):
    """Stem conv followed by ``depth`` stride-2 conv blocks."""

    def __init__(self, in_channels: int, width: int, depth: int):
        super().__init__()
        layers = [nn.Conv2d(in_channels, width, 3, padding=1), nn.ReLU(inplace=True)]
        for _ in range(depth):
            layers += [
                nn.Conv2d(width, width, 3, stride=2, padding=1),
                nn.ReLU(inplace=True),
                nn.Conv2d(width, width, 3, padding=1),
                nn.ReLU(inplace=True),
            ]
        self.body = nn.Sequential(*layers)

    def forward(self, x):
        return self.body(x)


class Head(nn.Module):
    def __init__(self, width: int, num_classes: int):
        super().__init__()
        self.conv = nn.Conv2d(width, width, 3, padding=1)
        self.classifier = nn.Conv2d(width, num_classes, 1)

    def forward(self, features, size):
        logits = self.classifier(F.relu(self.conv(features)))
        return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)


class FusionSegmenter(nn.Module):
    def __init__(self, spec: NetworkSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        w, d = spec.backbone_width, spec.backbone_depth
        if spec.policy == "CE":
            self.backbone = Encoder(3 * spec.input_channels, w, d)
        else:
            self.backbones = nn.ModuleDict(
                {name: Encoder(spec.input_channels, w, d) for name in ("insu", "intu", "du")}
            )
            self.mix = nn.Conv2d(3 * w, w, 1)
        self.head = Head(w, spec.num_classes)

    def _check(self, batch: WindowBatch) -> None:
        c = self.spec.input_channels
        for name in ("insu", "intu", "du"):
            t = getattr(batch, name)
            if t.ndim != 4 or t.shape[1] != c:
                raise ShapeError(f"{name} has shape {tuple(t.shape)}, expected (B, {c}, H, W)")
        self.spec.check_resolution(*batch.insu.shape[-2:])

    def forward(self, batch: WindowBatch) -> torch.Tensor:
        self._check(batch)
        size = batch.insu.shape[-2:]
        if self.spec.policy == "CE":
            features = self.backbone(torch.cat([batch.insu, batch.intu, batch.du], dim=1))
        else:
            parts = [self.backbones[name](getattr(batch, name)) for name in ("insu", "intu", "du")]
            features = F.relu(self.mix(torch.cat(parts, dim=1)))
        return self.head(features, size)


def build_model(spec: NetworkSpec) -> FusionSegmenter:
    return FusionSegmenter(spec)


def forward_ce(model: FusionSegmenter, batch: WindowBatch) -> torch.Tensor:
    if model.spec.policy != "CE":
        raise ConfigError(f"forward_ce called on a {model.spec.policy} model")
    return model(batch)


def forward_fi(model: FusionSegmenter, batch: WindowBatch) -> torch.Tensor:
    if model.spec.policy != "FI":
        raise ConfigError(f"forward_fi called on a {model.spec.policy} model")
    return model(batch)


def predict(model: FusionSegmenter, batch: WindowBatch, spec: NetworkSpec | None = None) -> torch.Tensor:
    """Logits for ``batch`` under the configured fusion policy."""
    spec = model.spec if spec is None else spec
    if spec.policy is None:
        raise ConfigError("fusion policy is not set")
    if spec.policy == "CE":
        return forward_ce(model, batch)
    if spec.policy == "FI":
        return forward_fi(model, batch)
    raise ConfigError(f"unknown fusion policy {spec.policy!r}")


def to_probability(logits: torch.Tensor) -> torch.Tensor:
    return torch.softmax(logits, dim=1)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
