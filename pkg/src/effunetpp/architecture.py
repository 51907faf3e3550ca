"""
UNet++ and EfficientUNet++ decoders over a five-stage encoder pyramid.

Decoder nodes are named ``x_{i}_{j}``: ``i`` is the depth (0 = stride 2,
3 = stride 16) and ``j >= 1`` the dense index. Node ``x_i_j`` consumes the
upsampled ``x_{i+1}_{j-1}`` concatenated with ``x_i_0`` (the encoder stage)
and every earlier node at its depth. A final full-resolution block and a
1x1 head read ``x_0_4``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoders import Encoder, build_encoder, check_divisible
from .exceptions import ConfigError, ContractError

DECODER_FAMILIES = ("unetpp", "efficient_unetpp")
ATTENTION_KINDS = ("none", "se", "sse", "scse")
DEFAULT_WIDTHS = (256, 128, 64, 32, 16)
WIDTH_PRESETS = {
    "small": (128, 64, 32, 16, 8),
    "default": DEFAULT_WIDTHS,
    "wide": (512, 256, 128, 64, 32),
}
PYRAMID_DEPTH = 5


class SCSE(nn.Module):
    """Channel (``se``), spatial (``sse``) or concurrent (``scse``) squeeze-and-excitation.

    ``scse`` returns ``x * channel_gate + x * spatial_gate``.
    """

    def __init__(self, channels: int, squeeze_ratio: int = 1, kind: str = "scse"):
        super().__init__()
        if kind not in ("se", "sse", "scse"):
            raise ContractError(f"unknown attention kind {kind!r}")
        if squeeze_ratio < 1 or channels < squeeze_ratio:
            raise ContractError(f"cannot squeeze {channels} channels by a ratio of {squeeze_ratio}")
        self.kind = kind
        hidden = channels // squeeze_ratio
        if kind in ("se", "scse"):
            self.fc1 = nn.Linear(channels, hidden)
            self.fc2 = nn.Linear(hidden, channels)
        if kind in ("sse", "scse"):
            self.spatial = nn.Conv2d(channels, 1, kernel_size=1)

    def channel_gate(self, x):
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return s[:, :, None, None]

    def spatial_gate(self, x):
        return torch.sigmoid(self.spatial(x))

    def forward(self, x):
        if self.kind == "se":
            return x * self.channel_gate(x)
        if self.kind == "sse":
            return x * self.spatial_gate(x)
        return x * self.channel_gate(x) + x * self.spatial_gate(x)


def make_attention(kind: str, channels: int, squeeze_ratio: int = 1) -> nn.Module:
    if kind == "none":
        return nn.Identity()
    return SCSE(channels, squeeze_ratio, kind)


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    bottleneck_ratio: float = 1.0
    groups: Optional[int] = None
    squeeze_ratio: int = 1
    attention: str = "scse"

    @property
    def hidden(self) -> int:
        return max(1, int(round(self.in_channels * self.bottleneck_ratio)))

    def validate(self):
        if self.bottleneck_ratio <= 0:
            raise ContractError("bottleneck ratio must be positive")
        groups = self.groups or self.hidden
        if self.hidden % groups:
            raise ContractError(f"groups={groups} does not divide the bottleneck width {self.hidden}")
        if self.squeeze_ratio < 1:
            raise ContractError("squeeze ratio must be >= 1")
        if self.attention not in ATTENTION_KINDS:
            raise ContractError(f"unknown attention kind {self.attention!r}")
        return groups


def conv_bn(cin, cout, kernel, groups=1):
    return [nn.Conv2d(cin, cout, kernel, padding=kernel // 2, groups=groups, bias=False), nn.BatchNorm2d(cout)]


class EfficientBlock(nn.Module):
    """Residual bottleneck: 1x1 expand, 3x3 depthwise, attention, 1x1 project.

    Every conv is followed by batch norm; the first two also by Hardswish.
    The skip is the identity when channel counts match, else a 1x1 conv + BN.
    """

    def __init__(self, cfg: BlockConfig):
        super().__init__()
        groups = cfg.validate()
        c, h, c_out = cfg.in_channels, cfg.hidden, cfg.out_channels
        self.cfg = cfg
        self.expand = nn.Sequential(*conv_bn(c, h, 1), nn.Hardswish())
        self.depthwise = nn.Sequential(*conv_bn(h, h, 3, groups=groups), nn.Hardswish())
        self.attention = make_attention(cfg.attention, h, cfg.squeeze_ratio)
        self.project = nn.Sequential(*conv_bn(h, c_out, 1))
        self.skip = nn.Identity() if c == c_out else nn.Sequential(*conv_bn(c, c_out, 1))

    def forward(self, x):
        if x.shape[1] != self.cfg.in_channels:
            raise ContractError(f"expected {self.cfg.in_channels} input channels, got {x.shape[1]}")
        y = self.project(self.attention(self.depthwise(self.expand(x))))
        return y + self.skip(x)


class UNetPPBlock(nn.Module):
    """Two 3x3 conv + BN + ReLU layers."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.in_channels = in_channels
        self.body = nn.Sequential(
            *conv_bn(in_channels, out_channels, 3),
            nn.ReLU(inplace=True),
            *conv_bn(out_channels, out_channels, 3),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        return self.body(x)


@dataclass
class ModelSpec:
    encoder_id: str = "tiny"
    decoder_family: str = "efficient_unetpp"
    decoder_widths: Sequence[int] = DEFAULT_WIDTHS
    attention: Optional[str] = None
    num_classes: int = 3
    pretrained: bool = False
    freeze_encoder: bool = False
    encoder_widths: Optional[Sequence[int]] = None
    bottleneck_ratio: float = 1.0
    squeeze_ratio: int = 1

    def __post_init__(self):
        if self.decoder_family not in DECODER_FAMILIES:
            raise ConfigError(f"model.decoder_family must be one of {DECODER_FAMILIES}, got {self.decoder_family!r}")
        if self.attention is None:
            self.attention = "scse" if self.decoder_family == "efficient_unetpp" else "none"
        if self.attention not in ATTENTION_KINDS:
            raise ConfigError(f"model.attention must be one of {ATTENTION_KINDS}, got {self.attention!r}")
        if self.decoder_family == "unetpp" and self.attention != "none":
            raise ConfigError("the UNet++ baseline has no attention variant")
        if isinstance(self.decoder_widths, str):
            if self.decoder_widths not in WIDTH_PRESETS:
                raise ConfigError(f"unknown width preset {self.decoder_widths!r}")
            self.decoder_widths = WIDTH_PRESETS[self.decoder_widths]
        self.decoder_widths = [int(w) for w in self.decoder_widths]
        if len(self.decoder_widths) != 5 or min(self.decoder_widths) <= 0:
            raise ConfigError(f"model.decoder_widths needs 5 positive ints, got {self.decoder_widths}")
        if self.num_classes < 2:
            raise ConfigError("model.num_classes must be >= 2")
        if self.encoder_widths is not None:
            self.encoder_widths = [int(w) for w in self.encoder_widths]

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model key(s): {', '.join(sorted(unknown))}")
        return cls(**d)


@dataclass
class DecoderNode:
    name: str
    depth: int
    index: int
    sources: List[str]
    in_channels: int
    out_channels: int


@dataclass
class DecoderGraph:
    nodes: List[DecoderNode]
    final_in: int
    final_out: int
    num_classes: int
    encoder_channels: List[int] = field(default_factory=list)

    @property
    def output_node(self) -> str:
        return self.nodes[-1].name

    def describe(self) -> str:
        lines = [f"encoder stages: " + ", ".join(f"x_{i}_0[{c}]" for i, c in enumerate(self.encoder_channels))]
        for n in self.nodes:
            lines.append(f"{n.name}: {n.in_channels} -> {n.out_channels}  <- {' + '.join(n.sources)}")
        lines.append(f"final: up({self.output_node}) {self.final_in} -> {self.final_out}")
        lines.append(f"head: {self.final_out} -> {self.num_classes}")
        return "\n".join(lines)


def node_width(widths: Sequence[int], depth: int) -> int:
    # widths run deepest (stride 16) to the full-resolution block
    return widths[3 - depth]


def build_decoder_graph(spec: ModelSpec, pyramid_channels: Sequence[int]) -> DecoderGraph:
    """Wire the nested triangle of decoder nodes in execution order."""
    pyramid_channels = list(pyramid_channels)
    if len(pyramid_channels) != PYRAMID_DEPTH:
        raise ContractError(f"decoder needs a {PYRAMID_DEPTH}-stage pyramid, got {len(pyramid_channels)}")
    channels: Dict[str, int] = {f"x_{i}_0": c for i, c in enumerate(pyramid_channels)}
    nodes = []
    top = PYRAMID_DEPTH - 1
    # column by column so every source exists before it is read
    for j in range(1, top + 1):
        for i in range(top - j, -1, -1):
            up = f"x_{i + 1}_{j - 1}"
            same = [f"x_{i}_{k}" for k in range(j)]
            sources = [up] + same
            cin = sum(channels[s] for s in sources)
            cout = node_width(spec.decoder_widths, i)
            name = f"x_{i}_{j}"
            channels[name] = cout
            nodes.append(DecoderNode(name, i, j, sources, cin, cout))
    out = nodes[-1]
    return DecoderGraph(nodes, out.out_channels, spec.decoder_widths[4], spec.num_classes, pyramid_channels)


def _make_block(spec: ModelSpec, cin: int, cout: int) -> nn.Module:
    if spec.decoder_family == "unetpp":
        return UNetPPBlock(cin, cout)
    return EfficientBlock(
        BlockConfig(cin, cout, spec.bottleneck_ratio, None, spec.squeeze_ratio, spec.attention)
    )


def upsample2(x):
    return F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)


class NestedDecoder(nn.Module):
    def __init__(self, spec: ModelSpec, encoder_channels: Sequence[int]):
        super().__init__()
        self.graph = build_decoder_graph(spec, encoder_channels)
        self.nodes = nn.ModuleDict({n.name: _make_block(spec, n.in_channels, n.out_channels) for n in self.graph.nodes})
        self.final = _make_block(spec, self.graph.final_in, self.graph.final_out)

    def forward(self, stages: Sequence[torch.Tensor]):
        if len(stages) != PYRAMID_DEPTH:
            raise ContractError(f"decoder needs {PYRAMID_DEPTH} stages, got {len(stages)}")
        feats = {f"x_{i}_0": s for i, s in enumerate(stages)}
        for node in self.graph.nodes:
            up, *same = node.sources
            x = torch.cat([upsample2(feats[up])] + [feats[s] for s in same], dim=1)
            feats[node.name] = self.nodes[node.name](x)
        return self.final(upsample2(feats[self.graph.output_node]))


class SegmentationModel(nn.Module):
    """Encoder + nested decoder + 1x1 classification head.

    ``forward`` takes a ``(B, 1, H, W)`` batch scaled to [0, 1] and returns
    logits; ``predict_proba`` applies the per-pixel softmax.
    """

    def __init__(self, spec: ModelSpec, encoder: Optional[Encoder] = None):
        super().__init__()
        self.spec = spec
        if encoder is None:
            kw = {"widths": spec.encoder_widths} if spec.encoder_widths else {}
            encoder = build_encoder(spec.encoder_id, pretrained=spec.pretrained, **kw)
        self.encoder = encoder
        self.decoder = NestedDecoder(spec, encoder.out_channels)
        self.head = nn.Conv2d(spec.decoder_widths[4], spec.num_classes, kernel_size=1)
        self.in_channels = 1
        if spec.freeze_encoder:
            self.encoder.freeze()

    def forward(self, x):
        check_divisible(x.shape[-2], x.shape[-1])
        return self.head(self.decoder(self.encoder(x)))

    def predict_proba(self, x):
        return torch.softmax(self.forward(x), dim=1)

    def decoder_parameters(self):
        return list(self.decoder.parameters()) + list(self.head.parameters())


def build_model(spec: ModelSpec) -> SegmentationModel:
    return SegmentationModel(spec)


def model_forward(image, model: SegmentationModel) -> torch.Tensor:
    """Probability map ``(B, num_classes, H, W)`` for grayscale input.

    Accepts ``(H, W)``, ``(1, H, W)`` or ``(B, 1, H, W)``; uint8 input is
    scaled to [0, 1].
    """
    x = torch.as_tensor(image)
    if x.dtype == torch.uint8:
        x = x.float() / 255.0
    x = x.float()
    while x.ndim < 4:
        x = x.unsqueeze(0)
    check_divisible(x.shape[-2], x.shape[-1])
    return model.predict_proba(x)
