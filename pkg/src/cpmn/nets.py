"""Pathway networks: a 3D EfficientNet-B0-style encoder feeding a U-Net-style
decoder for segmentation plus an auxiliary classification head on the deepest
encoder feature (global average pool -> linear -> ReLU -> linear).

Per-stage stride table, depth-major (d, h, w):

    stage    out_ch  kernel  stride     expansion  blocks
    stem         32       3  (2, 2, 2)          -       1
    1            16       3  (1, 1, 1)          1       1
    2            24       3  (2, 2, 2)          6       2
    3            40       5  (2, 2, 2)          6       2
    4            80       3  (2, 2, 2)          6       3
    5           112       5  (1, 1, 1)          6       3
    6           192       5  (1, 2, 2)          6       4
    7           320       3  (1, 1, 1)          6       1

Stage 6 keeps depth stride 1 so shallow anisotropic patches survive: total
downsampling is 16x along depth and 32x along height/width. All convolutions
use replicate padding and normalization uses per-instance statistics, so a
constant input maps to a spatially constant output and forward passes are
independent of batch composition.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core_types import CPMNConfig

DEPTH_DOWNSAMPLING = 16
HW_DOWNSAMPLING = 32

_STEM_CH = 32
_STAGE_CH = (16, 24, 40, 80, 112, 192, 320)
_STAGE_KERNEL = (3, 3, 5, 3, 5, 5, 3)
_STAGE_STRIDE = ((1, 1, 1), (2, 2, 2), (2, 2, 2), (2, 2, 2), (1, 1, 1), (1, 2, 2), (1, 1, 1))
_STAGE_EXPAND = (1, 6, 6, 6, 6, 6, 6)
_STAGE_BLOCKS = (1, 2, 2, 3, 3, 4, 1)
_HEAD_CH = 1280
_DECODER_CH = (112, 40, 24, 16, 16)


@dataclass(frozen=True)
class PathwayOutputs:
    """Everything one forward pass exposes to the objectives."""

    seg_logits: torch.Tensor  # (B, 2, D, H, W) at input resolution
    class_logits: torch.Tensor  # (B, 2)
    encoder_feature: torch.Tensor  # deepest encoder map (B, C', D', H', W')
    seg_feature: torch.Tensor  # last decoder map before the segmentation head


def _scaled(channels: int, width_scale: float) -> int:
    return max(4, int(round(channels * width_scale)))


def _norm(channels: int) -> nn.GroupNorm:
    # per-instance statistics over small channel groups: batch-independent like
    # instance norm, but deep stages with tiny spatial maps (e.g. 2x1x1 at a
    # 32^3 patch) keep magnitude information instead of collapsing to signs
    groups = max(g for g in range(1, min(8, channels) + 1) if channels % g == 0)
    return nn.GroupNorm(groups, channels)


def _conv_norm_act(in_ch: int, out_ch: int, kernel: int = 3, stride=(1, 1, 1)) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(
            in_ch, out_ch, kernel, stride=stride, padding=kernel // 2, padding_mode="replicate"
        ),
        _norm(out_ch),
        nn.SiLU(),
    )


class SqueezeExcite(nn.Module):
    def __init__(self, channels: int, reduced: int):
        super().__init__()
        self.reduce = nn.Conv3d(channels, reduced, 1)
        self.expand = nn.Conv3d(reduced, channels, 1)

    def forward(self, x):
        s = F.adaptive_avg_pool3d(x, 1)
        s = torch.sigmoid(self.expand(F.silu(self.reduce(s))))
        return x * s


class MBConv3d(nn.Module):
    """Inverted-residual block: expand -> depthwise -> squeeze-excite -> project."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride, expansion: int):
        super().__init__()
        mid = in_ch * expansion
        layers: list[nn.Module] = []
        if expansion != 1:
            layers += [nn.Conv3d(in_ch, mid, 1), _norm(mid), nn.SiLU()]
        layers += [
            nn.Conv3d(
                mid,
                mid,
                kernel,
                stride=stride,
                padding=kernel // 2,
                groups=mid,
                padding_mode="replicate",
            ),
            _norm(mid),
            nn.SiLU(),
            SqueezeExcite(mid, max(1, in_ch // 4)),
            nn.Conv3d(mid, out_ch, 1),
            _norm(out_ch),
        ]
        self.block = nn.Sequential(*layers)
        self.use_residual = stride == (1, 1, 1) and in_ch == out_ch

    def forward(self, x):
        out = self.block(x)
        return x + out if self.use_residual else out


class Encoder3d(nn.Module):
    def __init__(self, width_scale: float):
        super().__init__()
        stem_ch = _scaled(_STEM_CH, width_scale)
        self.stem = _conv_norm_act(1, stem_ch, kernel=3, stride=(2, 2, 2))
        stages = []
        in_ch = stem_ch
        for out_base, kernel, stride, expand, blocks in zip(
            _STAGE_CH, _STAGE_KERNEL, _STAGE_STRIDE, _STAGE_EXPAND, _STAGE_BLOCKS
        ):
            out_ch = _scaled(out_base, width_scale)
            mods = []
            for i in range(blocks):
                mods.append(
                    MBConv3d(in_ch, out_ch, kernel, stride if i == 0 else (1, 1, 1), expand)
                )
                in_ch = out_ch
            stages.append(nn.Sequential(*mods))
        self.stages = nn.ModuleList(stages)
        # 1x1 expansion ahead of the pooled classifier; without the trailing
        # activation a per-instance-normalized map is zero-mean over space and
        # its global average carries no information
        self.head = _conv_norm_act(in_ch, _scaled(_HEAD_CH, width_scale), kernel=1)

    def forward(self, x) -> list[torch.Tensor]:
        """Returns skip features [s1, s2, s3, s5], the bottleneck map, and the head map."""
        x = self.stem(x)
        skips = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i in (0, 1, 2, 4):
                skips.append(x)
        return skips + [x, self.head(x)]


class DecoderBlock(nn.Module):
    def __init__(self, in_ch: int, skip_ch: int, out_ch: int, up_stride):
        super().__init__()
        self.up_stride = tuple(float(s) for s in up_stride)
        self.conv1 = _conv_norm_act(in_ch + skip_ch, out_ch)
        self.conv2 = _conv_norm_act(out_ch, out_ch)

    def forward(self, x, skip=None):
        x = F.interpolate(x, scale_factor=self.up_stride, mode="trilinear", align_corners=False)
        if skip is not None:
            x = torch.cat([x, skip], dim=1)
        return self.conv2(self.conv1(x))


class Decoder3d(nn.Module):
    def __init__(self, width_scale: float):
        super().__init__()
        bottleneck = _scaled(_STAGE_CH[-1], width_scale)
        skip_chs = [_scaled(_STAGE_CH[i], width_scale) for i in (4, 2, 1, 0)] + [0]
        out_chs = [_scaled(c, width_scale) for c in _DECODER_CH]
        up_strides = [(1, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2), (2, 2, 2)]
        blocks = []
        in_ch = bottleneck
        for skip_ch, out_ch, stride in zip(skip_chs, out_chs, up_strides):
            blocks.append(DecoderBlock(in_ch, skip_ch, out_ch, stride))
            in_ch = out_ch
        self.blocks = nn.ModuleList(blocks)
        self.out_channels = in_ch

    def forward(self, bottleneck, skips):
        x = bottleneck
        ordered = [skips[3], skips[2], skips[1], skips[0], None]
        for block, skip in zip(self.blocks, ordered):
            x = block(x, skip)
        return x


class PathwayNetwork(nn.Module):
    """One encoder-decoder-classifier column; both pathways share this class."""

    def __init__(self, config: CPMNConfig, width_scale: float):
        super().__init__()
        d, h, w = config.patch_size
        if d % DEPTH_DOWNSAMPLING or h % HW_DOWNSAMPLING or w % HW_DOWNSAMPLING:
            raise ValueError(
                f"patch size {config.patch_size} must be divisible by "
                f"({DEPTH_DOWNSAMPLING}, {HW_DOWNSAMPLING}, {HW_DOWNSAMPLING})"
            )
        self.patch_size = config.patch_size
        self.width_scale = float(width_scale)
        self.encoder = Encoder3d(width_scale)
        self.decoder = Decoder3d(width_scale)
        self.bottleneck_channels = _scaled(_STAGE_CH[-1], width_scale)
        self.seg_channels = self.decoder.out_channels
        head_ch = _scaled(_HEAD_CH, width_scale)
        self.classifier = nn.Sequential(
            nn.AdaptiveAvgPool3d(1),
            nn.Flatten(),
            nn.Linear(head_ch, _scaled(_STAGE_CH[-1], width_scale)),
            nn.ReLU(),
            nn.Linear(_scaled(_STAGE_CH[-1], width_scale), 2),
        )
        self.seg_head = nn.Conv3d(self.seg_channels, 2, 1)

    def forward(self, batch: torch.Tensor) -> PathwayOutputs:
        if batch.ndim != 5 or batch.shape[1] != 1:
            raise ValueError(f"batch must be (B, 1, D, H, W), got {tuple(batch.shape)}")
        if tuple(batch.shape[2:]) != self.patch_size:
            raise ValueError(
                f"batch spatial extents {tuple(batch.shape[2:])} do not match "
                f"configured patch size {self.patch_size}"
            )
        *skips, bottleneck, head_feature = self.encoder(batch)
        class_logits = self.classifier(head_feature)
        seg_feature = self.decoder(bottleneck, skips)
        seg_logits = self.seg_head(seg_feature)
        return PathwayOutputs(
            seg_logits=seg_logits,
            class_logits=class_logits,
            encoder_feature=bottleneck,
            seg_feature=seg_feature,
        )


def bottleneck_extent(patch_size: tuple[int, int, int]) -> tuple[int, int, int]:
    d, h, w = patch_size
    return (d // DEPTH_DOWNSAMPLING, h // HW_DOWNSAMPLING, w // HW_DOWNSAMPLING)


_FOREGROUND_PRIOR = 0.01


def _init_parameters(net: nn.Module, generator: torch.Generator) -> None:
    """Fan-in-scaled normal init for conv/linear weights; zeros for biases.

    The segmentation head's foreground bias is set so initial foreground
    probability matches a rare-class prior, which keeps the dominant
    background mass from swamping the focal gradient early in training.
    """
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv3d, nn.Linear)):
                fan_in = module.weight[0].numel()
                std = (2.0 / fan_in) ** 0.5
                module.weight.normal_(0.0, std, generator=generator)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, nn.GroupNorm):
                module.weight.fill_(1.0)
                module.bias.zero_()
        prior = _FOREGROUND_PRIOR
        net.seg_head.bias.copy_(
            torch.tensor([0.0, math.log(prior / (1.0 - prior))])
        )


def build_pathway(
    config: CPMNConfig, width_scale: float = 1.0, seed: int | None = None
) -> PathwayNetwork:
    """Construct and deterministically initialize one pathway network.

    Identical (config, width_scale, seed) always yields identical parameters;
    the seed defaults to config.seed.
    """
    if width_scale <= 0:
        raise ValueError("width_scale must be positive")
    net = PathwayNetwork(config, width_scale)
    generator = torch.Generator().manual_seed(config.seed if seed is None else int(seed))
    _init_parameters(net, generator)
    return net


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())
