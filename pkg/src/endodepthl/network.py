"""Depth and pose networks: dilated-conv + channel-attention encoder, multi-scale
disparity decoder and a small pose encoder."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import pose_from_vector

MODES = ("efficiency", "performance")
STAGE_CHANNELS = {"efficiency": (32, 32, 64, 128), "performance": (64, 64, 128, 256)}
DILATIONS = {
    "efficiency": ((1, 2, 3), (1, 2, 3), (1, 2, 3, 2, 4, 6)),
    "performance": ((1, 2, 3), (1, 2, 3), (1, 2, 3, 2, 4, 6, 3, 6, 9)),
}
DECODER_CHANNELS = {"efficiency": (128, 64, 32, 16), "performance": (256, 128, 64, 32)}
POSE_CHANNELS = (16, 32, 64, 128)
POSE_SCALE = 0.01


@dataclass
class EncoderConfig:
    mode: str = "efficiency"
    width: int = 320
    height: int = 256
    stage_channels: tuple = field(default=None)
    dilation_schedule: tuple = field(default=None)

    def __post_init__(self):
        self.mode = self.mode.lower()
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.width % 16 or self.height % 16:
            raise ValueError(f"input size {self.width}x{self.height} must be divisible by 16")
        if self.stage_channels is None:
            self.stage_channels = STAGE_CHANNELS[self.mode]
        if self.dilation_schedule is None:
            self.dilation_schedule = DILATIONS[self.mode]
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.dilation_schedule = tuple(tuple(int(r) for r in s) for s in self.dilation_schedule)
        if len(self.stage_channels) != 4 or len(self.dilation_schedule) != 3:
            raise ValueError("need 4 stage channel counts and 3 dilation groups")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["stage_channels"] = list(self.stage_channels)
        d["dilation_schedule"] = [list(s) for s in self.dilation_schedule]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(**d)


def init_weights(module: nn.Module):
    """Fan-in scaled truncated normal for conv/linear weights, zero biases."""
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            fan_in = m.weight[0].numel()
            std = math.sqrt(2.0 / fan_in)
            nn.init.trunc_normal_(m.weight, std=std, a=-2 * std, b=2 * std)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def dilated_conv(x: torch.Tensor, weight: torch.Tensor, rate: int, bias: torch.Tensor | None = None,
                 groups: int = 1) -> torch.Tensor:
    """Centred 3x3 dilated convolution that keeps the spatial size."""
    if rate < 1:
        raise ValueError(f"dilation rate must be >= 1, got {rate}")
    if weight.shape[-2:] != (3, 3):
        raise ValueError(f"expected a 3x3 kernel, got {tuple(weight.shape[-2:])}")
    if x.shape[1] != weight.shape[1] * groups:
        raise ValueError(f"input has {x.shape[1]} channels, weight expects {weight.shape[1] * groups}")
    return F.conv2d(x, weight, bias, padding=rate, dilation=rate, groups=groups)


class ConvBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv = nn.Conv2d(cin, cout, 3, stride=stride, padding=1)
        self.act = nn.GELU()

    def forward(self, x):
        return self.act(self.conv(x))


class DilatedBlock(nn.Module):
    """Depthwise dilated 3x3 + pointwise 1x1 with a residual connection."""

    def __init__(self, channels, rate):
        super().__init__()
        self.rate = rate
        self.depthwise = nn.Conv2d(channels, channels, 3, padding=rate, dilation=rate, groups=channels)
        self.pointwise = nn.Conv2d(channels, channels, 1)
        self.act = nn.GELU()

    def forward(self, x):
        return x + self.act(self.pointwise(self.depthwise(x)))

    def extra_flops(self, x, out):
        return out.numel() // out.shape[0]  # residual add


class XCABlock(nn.Module):
    """Cross-covariance (channel) attention with a residual connection.

    Tokens are the ``H*W`` positions; the attention map is ``C x C``.
    """

    def __init__(self, channels):
        super().__init__()
        self.channels = channels
        self.qkv = nn.Linear(channels, 3 * channels)
        self.proj = nn.Linear(channels, channels)
        self.temperature = nn.Parameter(torch.ones(1))
        self.act = nn.GELU()

    def attention(self, x):
        b, c, h, w = x.shape
        tokens = x.flatten(2).transpose(1, 2)  # B, N, C
        q, k, v = self.qkv(tokens).transpose(1, 2).chunk(3, dim=1)  # each B, C, N
        q = F.normalize(q, dim=-1)
        k = F.normalize(k, dim=-1)
        return ((q @ k.transpose(1, 2)) * self.temperature).softmax(dim=-1), v

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.channels:
            raise ValueError(f"expected (B, {self.channels}, H, W), got {tuple(x.shape)}")
        b, c, h, w = x.shape
        attn, v = self.attention(x)
        mixed = (attn @ v).transpose(1, 2)  # B, N, C
        branch = self.act(self.proj(mixed)).transpose(1, 2).reshape(b, c, h, w)
        return branch + x

    def extra_flops(self, x, out):
        c = self.channels
        n = x.shape[2] * x.shape[3]
        # q.k^T and attn.v, normalisation of q and k, softmax, residual
        return 2 * c * c * n + 2 * c * n + c * c + c * n


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.stage_channels
        r2, r3, r4 = cfg.dilation_schedule
        self.cov1 = ConvBlock(3, c1, stride=2)
        self.cov2 = ConvBlock(c1, c2, stride=2)
        self.stage2 = nn.Sequential(*[DilatedBlock(c2, r) for r in r2], XCABlock(c2))
        self.cov3 = ConvBlock(c2, c3, stride=2)
        self.stage3 = nn.Sequential(*[DilatedBlock(c3, r) for r in r3], XCABlock(c3))
        self.cov4 = ConvBlock(c3, c4, stride=2)
        self.stage4 = nn.Sequential(*[DilatedBlock(c4, r) for r in r4], XCABlock(c4))

    def forward(self, x):
        if x.shape[-1] % 16 or x.shape[-2] % 16:
            raise ValueError(f"input {x.shape[-1]}x{x.shape[-2]} is not divisible by 16")
        f1 = self.cov1(x)
        f2 = self.stage2(self.cov2(f1))
        f3 = self.stage3(self.cov3(f2))
        f4 = self.stage4(self.cov4(f3))
        return [f1, f2, f3, f4]


class Upsample(nn.Module):
    def forward(self, x):
        return F.interpolate(x, scale_factor=2, mode="nearest")


class DepthDecoder(nn.Module):
    """Top-down decoder emitting sigmoid disparities at scales 1, 1/2, 1/4, 1/8
    (returned finest first)."""

    def __init__(self, enc_channels, dec_channels):
        super().__init__()
        c1, c2, c3, c4 = enc_channels
        skips = (c3, c2, c1, 0)
        self.up = Upsample()
        self.levels = nn.ModuleList()
        self.heads = nn.ModuleList()
        cin = c4
        for skip, cout in zip(skips, dec_channels):
            self.levels.append(nn.Sequential(ConvBlock(cin + skip, cout), ConvBlock(cout, cout)))
            self.heads.append(nn.Sequential(nn.Conv2d(cout, 1, 3, padding=1), nn.Sigmoid()))
            cin = cout

    def forward(self, pyramid):
        f1, f2, f3, f4 = pyramid
        skips = (f3, f2, f1, None)
        x = f4
        disps = []
        for level, head, skip in zip(self.levels, self.heads, skips):
            x = self.up(x)
            if skip is not None:
                if skip.shape[-2:] != x.shape[-2:]:
                    raise ValueError("pyramid does not match the decoder configuration")
                x = torch.cat([x, skip], dim=1)
            x = level(x)
            disps.append(head(x))
        return disps[::-1]


class DepthNet(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder = DepthDecoder(cfg.stage_channels, DECODER_CHANNELS[cfg.mode])

    def forward(self, image):
        return self.decoder(self.encoder(image))


class PoseNet(nn.Module):
    """Relative pose target -> source from a channel-stacked image pair."""

    def __init__(self, channels=POSE_CHANNELS):
        super().__init__()
        layers, cin = [], 6
        for c in channels:
            layers.append(ConvBlock(cin, c, stride=2))
            cin = c
        self.encoder = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.head = nn.Linear(cin, 6)

    def forward(self, target, source):
        if target.shape != source.shape:
            raise ValueError(f"target {tuple(target.shape)} and source {tuple(source.shape)} differ")
        feats = self.pool(self.encoder(torch.cat([target, source], dim=1))).flatten(1)
        return pose_from_vector(POSE_SCALE * self.head(feats))


class EndoDepthL(nn.Module):
    """Depth network and pose network bundled for training and profiling."""

    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg or EncoderConfig()
        self.depth = DepthNet(self.cfg)
        self.pose = PoseNet()
        init_weights(self)
        nn.init.zeros_(self.pose.head.weight)
        nn.init.zeros_(self.pose.head.bias)

    def forward(self, image):
        """Inference path: disparities for a single frame."""
        return self.depth(image)


def disparity_to_depth(disp: torch.Tensor, d_min: float, d_max: float) -> torch.Tensor:
    """Map sigmoid output in (0, 1) to depth in (d_min, d_max)."""
    if not 0 < d_min < d_max:
        raise ValueError(f"need 0 < d_min < d_max, got d_min={d_min}, d_max={d_max}")
    a = 1.0 / d_min - 1.0 / d_max
    b = 1.0 / d_max
    return 1.0 / (a * disp + b)
