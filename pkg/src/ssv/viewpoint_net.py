"""Analysis network: image -> (viewpoint encoding, style code, realism score).

The backbone is a stack of paired stride-1 3x3 convolutions with instance
normalization, downsampled by bilinear 0.5x interpolation between stages, and
collapsed to a single feature vector by a final valid convolution.  Three
small fully connected heads per angle emit a 2-vector of magnitudes and 4
sign-class logits; two more heads emit the style code and a scalar realism
score (the network doubles as the adversarial critic).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ssv.codec import EncodedViewpoints
from ssv.exceptions import ConfigError, ShapeError

ABS_EPS = 1e-12


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass(frozen=True)
class ViewpointNetConfig:
    input_resolution: int = 64
    base_channels: int = 32
    style_dim: int = 64
    leaky_slope: float = 0.2
    init_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not _is_power_of_two(self.input_resolution) or self.input_resolution < 16:
            raise ConfigError(
                f"input_resolution must be a power of two >= 16, got {self.input_resolution}"
            )
        if self.base_channels < 8:
            raise ConfigError(f"base_channels must be >= 8, got {self.base_channels}")
        if self.style_dim < 1:
            raise ConfigError(f"style_dim must be positive, got {self.style_dim}")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")


@dataclass
class ViewpointPrediction:
    """Per-batch network outputs: encoding, style code, realism score."""

    encoding: EncodedViewpoints
    style: Tensor
    realism: Tensor


class _AngleHead(nn.Module):
    def __init__(self, in_features: int, hidden: int, slope: float):
        super().__init__()
        self.shared = nn.Linear(in_features, hidden)
        self.magnitude = nn.Linear(hidden, 2)
        self.sign_logits = nn.Linear(hidden, 4)
        self.slope = slope

    def forward(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        h = F.leaky_relu(self.shared(feats), self.slope)
        return self.magnitude(h), self.sign_logits(h)


class ViewpointNet(nn.Module):
    def __init__(self, cfg: ViewpointNetConfig):
        super().__init__()
        self.cfg = cfg
        b = cfg.base_channels
        self.stem = nn.Conv2d(3, b, 1)
        stages = []
        channels_in = b
        resolution = cfg.input_resolution
        while resolution >= 4:
            channels_out = 2 * b if resolution == cfg.input_resolution else 4 * b
            stages.append(
                nn.ModuleList(
                    [
                        nn.Conv2d(channels_in, channels_out, 3, padding=1),
                        nn.InstanceNorm2d(channels_out),
                        nn.Conv2d(channels_out, channels_out, 3, padding=1),
                        nn.InstanceNorm2d(channels_out),
                    ]
                )
            )
            channels_in = channels_out
            resolution //= 2
        self.stages = nn.ModuleList(stages)
        self.final_conv = nn.Conv2d(channels_in, 4 * b, 4)
        feat_dim = 4 * b
        self.realism_head = nn.Linear(feat_dim, 1)
        self.style_head = nn.Linear(feat_dim, cfg.style_dim)
        self.azimuth_head = _AngleHead(feat_dim, 2 * b, cfg.leaky_slope)
        self.elevation_head = _AngleHead(feat_dim, 2 * b, cfg.leaky_slope)
        self.tilt_head = _AngleHead(feat_dim, 2 * b, cfg.leaky_slope)
        _init_normal(self, cfg.init_std, cfg.seed)

    def backbone(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected images of shape (B, 3, H, W), got {tuple(images.shape)}")
        r = self.cfg.input_resolution
        if images.shape[-2:] != (r, r):
            raise ShapeError(f"expected {r}x{r} input, got {images.shape[-2]}x{images.shape[-1]}")
        slope = self.cfg.leaky_slope
        x = F.leaky_relu(self.stem(images), slope)
        for i, (conv1, norm1, conv2, norm2) in enumerate(self.stages):
            x = F.leaky_relu(norm1(conv1(x)), slope)
            x = F.leaky_relu(norm2(conv2(x)), slope)
            if i < len(self.stages) - 1:
                x = F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False)
        x = F.leaky_relu(self.final_conv(x), slope)
        return x.flatten(1)

    def forward(self, images: Tensor) -> ViewpointPrediction:
        feats = self.backbone(images)
        abs_rows, prob_rows = [], []
        for head in (self.azimuth_head, self.elevation_head, self.tilt_head):
            magnitude, logits = head(feats)
            m = magnitude.abs() + ABS_EPS
            abs_rows.append(m / m.norm(dim=-1, keepdim=True))
            prob_rows.append(torch.softmax(logits, dim=-1))
        encoding = EncodedViewpoints(
            abs_vec=torch.stack(abs_rows, dim=1), sign_probs=torch.stack(prob_rows, dim=1)
        )
        return ViewpointPrediction(
            encoding=encoding,
            style=self.style_head(feats),
            realism=self.realism_head(feats).squeeze(-1),
        )


def _init_normal(module: nn.Module, std: float, seed: int):
    """Seeded N(0, std) weight init with zero biases, bitwise deterministic."""
    gen = torch.Generator().manual_seed(seed)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
            m.weight.data.normal_(0.0, std, generator=gen)
            if m.bias is not None:
                m.bias.data.zero_()


def build_viewpoint_net(cfg: ViewpointNetConfig) -> ViewpointNet:
    """Construct the analysis network with deterministic seeded parameters."""
    return ViewpointNet(cfg)


def predict(net: ViewpointNet, images: Tensor) -> ViewpointPrediction:
    """Run the network on a batch of images in [-1, 1] at the configured size."""
    return net(images)
