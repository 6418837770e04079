"""Viewpoint-aware generator: (viewpoint, style) -> image.

A learnable canonical 3D feature volume is processed by style-modulated 3D
convolutions, rigidly rotated by the input viewpoint, refined by plain 3D
convolutions, orthographically projected (depth collapsed into channels plus
a learned 1x1 convolution), and decoded by style-modulated 2D convolutions
with 2x upsampling into an image bounded to [-1, 1].

Volume memory layout is ``(B, C, D, H, W)``.  Grid indices map to world axes
as ``w -> +x`` (right), ``h -> -y`` (rows grow downward), ``d -> -z`` (depth
grows away from the viewer), with the cube centered on the origin.  This
matches the codec's axis conventions, so a positive azimuth rotates the
volume the same way it rotates the toy renderer's object.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from ssv.codec import (
    EulerViewpoint,
    rotation_matrices_from_angles,
    rotation_matrices_from_cos_sin,
    viewpoint_to_rotation,
)
from ssv.exceptions import ConfigError, ShapeError
from ssv.viewpoint_net import _init_normal, _is_power_of_two

ADAIN_EPS = 1e-8
SNAP_TOL = 1e-6


@dataclass(frozen=True)
class SynthConfig:
    output_resolution: int = 64
    style_dim: int = 64
    base_3d_channels: int = 16
    base_2d_channels: int = 32
    volume_size: int = 8
    code_size: int = 4
    leaky_slope: float = 0.2
    init_std: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if not _is_power_of_two(self.output_resolution) or self.output_resolution < 16:
            raise ConfigError(
                f"output_resolution must be a power of two >= 16, got {self.output_resolution}"
            )
        if not _is_power_of_two(self.volume_size) or self.volume_size < 4:
            raise ConfigError(f"volume_size must be a power of two >= 4, got {self.volume_size}")
        if not _is_power_of_two(self.code_size) or not 2 <= self.code_size <= self.volume_size:
            raise ConfigError("code_size must be a power of two in [2, volume_size]")
        if self.volume_size > self.output_resolution:
            raise ConfigError("volume_size cannot exceed output_resolution")
        if self.base_3d_channels < 4 or self.base_2d_channels < 4:
            raise ConfigError("channel bases must be >= 4")


# ---------------------------------------------------------------------------
# Adaptive instance normalization
# ---------------------------------------------------------------------------

def adain(features: Tensor, gamma: Tensor, beta: Tensor) -> Tensor:
    """Standardize each channel over its spatial extent, then scale/shift.

    ``features`` is ``(B, C, *spatial)``; ``gamma``/``beta`` are ``(B, C)``.
    For nonzero-variance input the output has per-channel mean ``beta`` and
    standard deviation ``gamma``; constant channels map to ``beta``.
    """
    if gamma.shape != features.shape[:2] or beta.shape != features.shape[:2]:
        raise ShapeError(
            f"style affine shape {tuple(gamma.shape)} does not match feature "
            f"channels {tuple(features.shape[:2])}"
        )
    dims = tuple(range(2, features.ndim))
    mean = features.mean(dim=dims, keepdim=True)
    std = features.std(dim=dims, keepdim=True, unbiased=False)
    shape = gamma.shape + (1,) * (features.ndim - 2)
    normalized = (features - mean) / (std + ADAIN_EPS)
    return gamma.reshape(shape) * normalized + beta.reshape(shape)


class AdaIN(nn.Module):
    """AdaIN layer with a learned affine map from the style code to (gamma, beta).

    gamma is offset by one so a zero affine output leaves features standardized
    rather than zeroed.
    """

    def __init__(self, channels: int, style_dim: int):
        super().__init__()
        self.channels = channels
        self.affine = nn.Linear(style_dim, 2 * channels)

    def style_params(self, style: Tensor) -> tuple[Tensor, Tensor]:
        out = self.affine(style)
        gamma = 1.0 + out[:, : self.channels]
        beta = out[:, self.channels :]
        return gamma, beta

    def forward(self, features: Tensor, style: Tensor) -> Tensor:
        gamma, beta = self.style_params(style)
        return adain(features, gamma, beta)


# ---------------------------------------------------------------------------
# Rigid volume rotation (trilinear inverse warp)
# ---------------------------------------------------------------------------

def _index_to_world(n: int, dtype, device) -> Tensor:
    """World coordinates of all voxel centers, shape (n^3, 3) ordered (d, h, w)."""
    c0 = (n - 1) / 2.0
    rng = torch.arange(n, dtype=dtype, device=device)
    d, h, w = torch.meshgrid(rng, rng, rng, indexing="ij")
    x = w - c0
    y = c0 - h
    z = c0 - d
    return torch.stack([x, y, z], dim=-1).reshape(-1, 3)


def rotate_volumes(volumes: Tensor, rotations: Tensor) -> Tensor:
    """Rotate cubic feature volumes about their centers (inverse trilinear warp).

    ``volumes`` is ``(B, C, N, N, N)``; ``rotations`` is ``(3, 3)`` or
    ``(B, 3, 3)`` acting on world coordinates.  Output voxels sample the input
    at the inversely rotated position with trilinear interpolation and zero
    fill outside the cube.  Differentiable with respect to both arguments.
    Sample positions within ``1e-6`` of a grid point are snapped to it with a
    straight-through correction, so exact quarter turns reproduce the integer
    permutation with no interpolation residue.
    """
    if volumes.ndim != 5:
        raise ShapeError(f"expected volumes of shape (B, C, D, H, W), got {tuple(volumes.shape)}")
    b, c, d, h, w = volumes.shape
    if not (d == h == w):
        raise ValueError(f"volume must be cubic at the rotation stage, got {d}x{h}x{w}")
    n = d
    if rotations.ndim == 2:
        rotations = rotations.unsqueeze(0).expand(b, 3, 3)
    if rotations.shape != (b, 3, 3):
        raise ShapeError(f"rotations must be (B, 3, 3), got {tuple(rotations.shape)}")

    pos = _index_to_world(n, volumes.dtype, volumes.device)  # (n^3, 3)
    # inverse warp: source = R^-1 @ p; with row vectors q = p @ R
    src = torch.einsum("pk,bkj->bpj", pos, rotations)  # (B, n^3, 3)
    c0 = (n - 1) / 2.0
    wi = src[..., 0] + c0
    hi = c0 - src[..., 1]
    di = c0 - src[..., 2]
    idx = torch.stack([di, hi, wi], dim=-1)  # fractional (d, h, w) source indices

    # straight-through snap of near-grid samples: exact forward value on the
    # grid point, identity gradient
    with torch.no_grad():
        rounded = idx.round()
        snap = torch.where((idx - rounded).abs() < SNAP_TOL, rounded - idx, torch.zeros_like(idx))
    idx = idx + snap

    lo = idx.floor()
    frac = idx - lo
    flat = volumes.reshape(b, c, -1)
    out = torch.zeros(b, c, n * n * n, dtype=volumes.dtype, device=volumes.device)
    for corner in range(8):
        offs = torch.tensor(
            [(corner >> 2) & 1, (corner >> 1) & 1, corner & 1],
            dtype=volumes.dtype,
            device=volumes.device,
        )
        corner_idx = lo + offs
        weight = torch.where(offs.bool(), frac, 1.0 - frac).prod(dim=-1)  # (B, n^3)
        inside = ((corner_idx >= 0) & (corner_idx <= n - 1)).all(dim=-1)
        safe = corner_idx.clamp(0, n - 1).long()
        gather_index = (safe[..., 0] * n + safe[..., 1]) * n + safe[..., 2]
        values = flat.gather(2, gather_index.unsqueeze(1).expand(b, c, -1))
        out = out + values * (weight * inside.to(volumes.dtype)).unsqueeze(1)
    return out.reshape(b, c, n, n, n)


def rotate_volume(voxels: Tensor | np.ndarray, v: EulerViewpoint) -> Tensor | np.ndarray:
    """Rotate a single ``(D, H, W, C)`` volume by a viewpoint.

    Convenience wrapper over :func:`rotate_volumes`; returns the same array
    type and layout as the input.
    """
    is_numpy = isinstance(voxels, np.ndarray)
    vol = torch.from_numpy(np.ascontiguousarray(voxels)) if is_numpy else voxels
    if vol.ndim != 4:
        raise ShapeError(f"expected a (D, H, W, C) volume, got shape {tuple(vol.shape)}")
    rot = torch.as_tensor(viewpoint_to_rotation(v), dtype=vol.dtype)
    batched = vol.permute(3, 0, 1, 2).unsqueeze(0)
    rotated = rotate_volumes(batched, rot).squeeze(0).permute(1, 2, 3, 0)
    return rotated.numpy() if is_numpy else rotated


# ---------------------------------------------------------------------------
# Orthographic projection
# ---------------------------------------------------------------------------

def collapse_depth(volumes: Tensor) -> Tensor:
    """Reshape ``(B, C, D, H, W)`` to ``(B, D*C, H, W)`` with depth-major blocks.

    Pure reshape: channel block ``k`` of the output is depth slice ``k`` of the
    input, so every element is preserved.
    """
    if volumes.ndim != 5:
        raise ShapeError(f"expected volumes of shape (B, C, D, H, W), got {tuple(volumes.shape)}")
    b, c, d, h, w = volumes.shape
    return volumes.permute(0, 2, 1, 3, 4).reshape(b, d * c, h, w)


class OrthographicProjector(nn.Module):
    """Depth-to-channel collapse followed by a learned 1x1 convolution."""

    def __init__(self, depth: int, channels: int, slope: float):
        super().__init__()
        self.conv = nn.Conv2d(depth * channels, depth * channels, 1)
        self.slope = slope

    def forward(self, volumes: Tensor) -> Tensor:
        return F.leaky_relu(self.conv(collapse_depth(volumes)), self.slope)


# ---------------------------------------------------------------------------
# Generator
# ---------------------------------------------------------------------------

class _StyledConvBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, style_dim: int, slope: float, dims: int):
        super().__init__()
        conv_cls = nn.Conv3d if dims == 3 else nn.Conv2d
        self.conv = conv_cls(c_in, c_out, 3, padding=1)
        self.norm = AdaIN(c_out, style_dim)
        self.slope = slope

    def forward(self, x: Tensor, style: Tensor) -> Tensor:
        return F.leaky_relu(self.norm(self.conv(x), style), self.slope)


class SynthesisNet(nn.Module):
    def __init__(self, cfg: SynthConfig):
        super().__init__()
        self.cfg = cfg
        b3, b2 = cfg.base_3d_channels, cfg.base_2d_channels
        slope = cfg.leaky_slope
        n_up3 = int(math.log2(cfg.volume_size // cfg.code_size))
        rot_channels = 4 * b3

        # channels double going back from the rotation stage, capped at 8*b3
        stage_channels = [min(rot_channels * 2 ** (n_up3 - i), 8 * b3) for i in range(n_up3 + 1)]
        self.canonical_code = nn.Parameter(
            torch.empty(1, stage_channels[0], cfg.code_size, cfg.code_size, cfg.code_size)
        )
        styled3d = []
        c_in = stage_channels[0]
        for c_out in stage_channels:
            styled3d.append(_StyledConvBlock(c_in, c_out, cfg.style_dim, slope, dims=3))
            styled3d.append(_StyledConvBlock(c_out, c_out, cfg.style_dim, slope, dims=3))
            c_in = c_out
        self.styled_3d = nn.ModuleList(styled3d)

        half, quarter = max(rot_channels // 2, 4), max(rot_channels // 4, 4)
        self.plain_3d = nn.ModuleList(
            [
                nn.Conv3d(rot_channels, half, 3, padding=1),
                nn.Conv3d(half, half, 3, padding=1),
                nn.Conv3d(half, quarter, 3, padding=1),
                nn.Conv3d(quarter, quarter, 3, padding=1),
            ]
        )
        self.projector = OrthographicProjector(cfg.volume_size, quarter, slope)

        n_up2 = int(math.log2(cfg.output_resolution // cfg.volume_size))
        c_in = cfg.volume_size * quarter
        styled2d = []
        for i in range(n_up2 + 1):
            c_out = max(4 * b2 // 2**i, 8)
            styled2d.append(_StyledConvBlock(c_in, c_out, cfg.style_dim, slope, dims=2))
            styled2d.append(_StyledConvBlock(c_out, c_out, cfg.style_dim, slope, dims=2))
            c_in = c_out
        self.styled_2d = nn.ModuleList(styled2d)
        self.out_conv = nn.Conv2d(c_in, 3, 3, padding=1)

        _init_normal(self, cfg.init_std, cfg.seed)
        # AdaIN affine weights are scaled down so gamma starts near its offset
        # of one instead of swamping it
        gen = torch.Generator().manual_seed(cfg.seed + 1)
        for m in self.modules():
            if isinstance(m, AdaIN):
                m.affine.weight.data.normal_(
                    0.0, cfg.init_std / math.sqrt(cfg.style_dim), generator=gen
                )
                m.affine.bias.data.zero_()
        self.canonical_code.data.normal_(0.0, cfg.init_std, generator=gen)

    def rotation_matrices(self, viewpoints: Tensor) -> Tensor:
        if viewpoints.ndim == 2 and viewpoints.shape[1] == 3:
            return rotation_matrices_from_angles(viewpoints)
        if viewpoints.ndim == 3 and viewpoints.shape[1:] == (3, 2):
            return rotation_matrices_from_cos_sin(viewpoints)
        raise ShapeError(
            "viewpoints must be (B, 3) angles or (B, 3, 2) cos/sin pairs, "
            f"got {tuple(viewpoints.shape)}"
        )

    def forward(self, viewpoints: Tensor, styles: Tensor) -> Tensor:
        """Synthesize a batch of images in [-1, 1].

        ``viewpoints``: angles ``(B, 3)`` or signed cos/sin ``(B, 3, 2)``;
        ``styles``: ``(B, style_dim)``.
        """
        if styles.ndim != 2 or styles.shape[1] != self.cfg.style_dim:
            raise ShapeError(
                f"styles must be (B, {self.cfg.style_dim}), got {tuple(styles.shape)}"
            )
        rot = self.rotation_matrices(viewpoints)
        if rot.shape[0] != styles.shape[0]:
            raise ShapeError("viewpoint and style batch sizes differ")
        slope = self.cfg.leaky_slope

        x = self.canonical_code.expand(styles.shape[0], -1, -1, -1, -1)
        for i, block in enumerate(self.styled_3d):
            x = block(x, styles)
            if i % 2 == 1 and i < len(self.styled_3d) - 1:
                x = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        x = rotate_volumes(x, rot)
        for conv in self.plain_3d:
            x = F.leaky_relu(conv(x), slope)
        x = self.projector(x)
        for i, block in enumerate(self.styled_2d):
            x = block(x, styles)
            if i % 2 == 1 and i < len(self.styled_2d) - 1:
                x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return torch.tanh(self.out_conv(x))


def build_synthesis_net(cfg: SynthConfig) -> SynthesisNet:
    """Construct the generator with deterministic seeded parameters."""
    return SynthesisNet(cfg)


def synthesize(net: SynthesisNet, v_s: EulerViewpoint, z_s) -> Tensor:
    """Render a single image ``(3, R, R)`` for one viewpoint and style code."""
    angles = torch.as_tensor(v_s.as_array(), dtype=torch.float32).unsqueeze(0)
    style = torch.as_tensor(z_s, dtype=torch.float32).reshape(1, -1)
    with torch.no_grad():
        return net(angles, style).squeeze(0)
