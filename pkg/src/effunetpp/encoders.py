"""
Encoders producing five-stage feature pyramids (strides 2, 4, 8, 16, 32).

Registered ids:

* ``tiny`` - small strided double-conv encoder, trained from scratch.
* ``efficientnet-b0`` ... ``efficientnet-b7`` - torchvision EfficientNets.
  ImageNet weights are pulled through torchvision's weight cache
  (``TORCH_HOME``) when ``pretrained=True``.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable, Dict, List, Sequence

import torch
import torch.nn as nn

from .exceptions import ConfigError, ContractError

STRIDES = (2, 4, 8, 16, 32)
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


@dataclass
class FeaturePyramid:
    stages: List[torch.Tensor]
    channels: List[int]
    strides: Sequence[int] = STRIDES

    def __len__(self):
        return len(self.stages)


def check_divisible(height: int, width: int, factor: int = 32):
    if height % factor or width % factor:
        raise ContractError(f"input size {height}x{width} is not divisible by {factor}")


class Encoder(nn.Module):
    """Base class: subclasses set ``encoder_id``, ``out_channels`` and implement ``features``."""

    encoder_id: str = ""
    in_channels: int = 1
    out_channels: List[int]

    def __init__(self, pretrained: bool = False):
        super().__init__()
        self.pretrained = pretrained
        self.frozen = False

    def features(self, x: torch.Tensor) -> List[torch.Tensor]:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        check_divisible(x.shape[-2], x.shape[-1])
        return self.features(x)

    def freeze(self):
        for p in self.parameters():
            p.requires_grad_(False)
        self.frozen = True
        self.eval()
        return self

    def unfreeze(self):
        for p in self.parameters():
            p.requires_grad_(True)
        self.frozen = False
        return self

    def train(self, mode: bool = True):
        # frozen encoders keep batch norm on stored statistics
        return super().train(mode and not self.frozen)


class TinyEncoder(Encoder):
    def __init__(self, widths: Sequence[int] = (8, 16, 32, 64, 128), in_channels: int = 1):
        super().__init__(pretrained=False)
        widths = [int(w) for w in widths]
        if len(widths) != 5 or min(widths) <= 0:
            raise ContractError(f"tiny encoder needs 5 positive widths, got {widths}")
        self.encoder_id = "tiny"
        self.in_channels = in_channels
        self.out_channels = widths
        stages = []
        prev = in_channels
        for w in widths:
            stages.append(
                nn.Sequential(
                    nn.Conv2d(prev, w, 3, stride=2, padding=1, bias=False),
                    nn.BatchNorm2d(w),
                    nn.ReLU(inplace=True),
                    nn.Conv2d(w, w, 3, padding=1, bias=False),
                    nn.BatchNorm2d(w),
                    nn.ReLU(inplace=True),
                )
            )
            prev = w
        self.stages = nn.ModuleList(stages)

    def features(self, x):
        x = (x - 0.5) / 0.25
        out = []
        for stage in self.stages:
            x = stage(x)
            out.append(x)
        return out


class EfficientNetEncoder(Encoder):
    """torchvision EfficientNet truncated before its classification head."""

    # indices into ``model.features`` whose outputs sit at strides 2..32
    taps = (1, 2, 3, 5, 7)

    def __init__(self, variant: str = "b0", pretrained: bool = False):
        super().__init__(pretrained=pretrained)
        import torchvision.models as tvm

        builder = getattr(tvm, f"efficientnet_{variant}")
        weights = "DEFAULT" if pretrained else None
        net = builder(weights=weights)
        self.encoder_id = f"efficientnet-{variant}"
        self.in_channels = 1
        self.blocks = nn.Sequential(*list(net.features.children())[: self.taps[-1] + 1])
        self.register_buffer("mean", torch.tensor(IMAGENET_MEAN).view(1, 3, 1, 1), persistent=False)
        self.register_buffer("std", torch.tensor(IMAGENET_STD).view(1, 3, 1, 1), persistent=False)
        self.out_channels = [self._block_out_channels(self.blocks[i]) for i in self.taps]

    @staticmethod
    def _block_out_channels(block: nn.Module) -> int:
        convs = [m for m in block.modules() if isinstance(m, nn.Conv2d)]
        return convs[-1].out_channels

    def features(self, x):
        # grayscale replicated onto the RGB stem
        x = x.expand(-1, 3, -1, -1)
        x = (x - self.mean) / self.std
        out = []
        for i, block in enumerate(self.blocks):
            x = block(x)
            if i in self.taps:
                out.append(x)
        return out


def _efficientnet_factory(variant: str) -> Callable[..., Encoder]:
    def make(pretrained: bool = False, **_):
        return EfficientNetEncoder(variant, pretrained=pretrained)

    return make


def _tiny_factory(pretrained: bool = False, widths: Sequence[int] = (8, 16, 32, 64, 128), **_):
    if pretrained:
        raise ConfigError("the tiny encoder has no pretrained weights")
    return TinyEncoder(widths)


ENCODERS: Dict[str, Callable[..., Encoder]] = {"tiny": _tiny_factory}
for _v in ("b0", "b1", "b2", "b3", "b4", "b5", "b6", "b7"):
    ENCODERS[f"efficientnet-{_v}"] = _efficientnet_factory(_v)


def available_encoders() -> List[str]:
    return list(ENCODERS)


def build_encoder(encoder_id: str, pretrained: bool = False, **kwargs) -> Encoder:
    try:
        factory = ENCODERS[encoder_id]
    except KeyError:
        raise ConfigError(f"unknown encoder id {encoder_id!r}; available: {', '.join(ENCODERS)}") from None
    return factory(pretrained=pretrained, **kwargs)


def tiny_encoder(widths: Sequence[int] = (8, 16, 32, 64, 128)) -> TinyEncoder:
    return TinyEncoder(widths)


def extract_pyramid(encoder: Encoder, image: torch.Tensor) -> FeaturePyramid:
    """Run ``encoder`` on a ``(B, 1, H, W)`` batch and return its pyramid."""
    stages = encoder(image)
    return FeaturePyramid(stages=stages, channels=[s.shape[1] for s in stages])


def freeze(encoder: Encoder) -> Encoder:
    return encoder.freeze()


def weight_checksum(module: nn.Module) -> str:
    """SHA-256 over every floating-point parameter and buffer, in state-dict order."""
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        if t.is_floating_point():
            h.update(name.encode())
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
