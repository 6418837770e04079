"""Training losses for the viewpoint and synthesis networks.

All losses are pure scalar functions of torch tensors, differentiable almost
everywhere, with mean reduction over the batch.  Style distances are squared
L2 norms over the style dimension; image distances are means over elements.

The perceptual feature extractor used by the image-consistency loss is
pluggable: any frozen module mapping image batches to feature tensors works.
The self-contained default is a fixed-seed random convolutional encoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import torch
from torch import Tensor, nn

from ssv.codec import EncodedViewpoints
from ssv.exceptions import ShapeError

COSINE_EPS = 1e-8
PROB_CLAMP = 1e-7


@dataclass(frozen=True)
class LossWeights:
    """Relative weights of the seven loss terms (all default to 1).

    The first four weight the viewpoint-network objective (symmetry, image
    consistency, style+viewpoint consistency, discriminator); the last three
    weight the synthesis-network objective (adversarial, paired
    style+viewpoint, flip image consistency).
    """

    symmetry: float = 1.0
    image_consistency: float = 1.0
    style_viewpoint: float = 1.0
    discriminator: float = 1.0
    adversarial: float = 1.0
    paired_style_viewpoint: float = 1.0
    flip_consistency: float = 1.0

    def __post_init__(self):
        for name, value in self.__dict__.items():
            if not math.isfinite(value) or value < 0:
                raise ValueError(f"loss weight {name} must be nonnegative and finite, got {value}")


class ViewpointLossTerms(NamedTuple):
    symmetry: Tensor
    image_consistency: Tensor
    style_viewpoint: Tensor
    discriminator: Tensor


class SynthesisLossTerms(NamedTuple):
    adversarial: Tensor
    paired_style_viewpoint: Tensor
    flip_consistency: Tensor


def horizontal_flip(images: Tensor) -> Tensor:
    """Mirror images along their width (last) dimension."""
    return torch.flip(images, dims=(-1,))


# ---------------------------------------------------------------------------
# Feature extractor
# ---------------------------------------------------------------------------

class RandomConvFeatures(nn.Module):
    """Frozen random convolutional encoder used as the default perceptual map.

    Five stride-2 stages reduce the spatial size by 32x.  Weights are drawn
    once from a fixed-seed generator and never updated; identical inputs give
    identical features.  Pretrained weights of the same shape can be loaded
    via ``load_state_dict`` to swap in an externally trained extractor.
    """

    def __init__(self, input_resolution: int = 64, base_channels: int = 16, seed: int = 0):
        super().__init__()
        if input_resolution % 32 != 0:
            raise ValueError(f"input_resolution must be divisible by 32, got {input_resolution}")
        self.input_resolution = input_resolution
        channels = [3] + [min(base_channels * 2**i, base_channels * 8) for i in range(5)]
        layers = []
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            layers += [nn.Conv2d(c_in, c_out, 3, stride=2, padding=1), nn.LeakyReLU(0.2)]
        self.stages = nn.Sequential(*layers)
        gen = torch.Generator().manual_seed(seed)
        for m in self.stages:
            if isinstance(m, nn.Conv2d):
                fan_in = m.in_channels * 9
                m.weight.data.normal_(0.0, math.sqrt(2.0 / fan_in), generator=gen)
                m.bias.data.zero_()
        for p in self.parameters():
            p.requires_grad_(False)
        self.eval()

    def forward(self, images: Tensor) -> Tensor:
        if images.ndim != 4 or images.shape[1] != 3:
            raise ShapeError(f"expected images of shape (B, 3, H, W), got {tuple(images.shape)}")
        if images.shape[-2:] != (self.input_resolution, self.input_resolution):
            raise ShapeError(
                f"expected {self.input_resolution}x{self.input_resolution} input, "
                f"got {images.shape[-2]}x{images.shape[-1]}"
            )
        return self.stages(images)


def extract_features(extractor: nn.Module, images: Tensor) -> Tensor:
    """Run the frozen extractor without tracking gradients through its weights."""
    return extractor(images)


# ---------------------------------------------------------------------------
# Loss functions
# ---------------------------------------------------------------------------

def image_consistency(f_real: Tensor, f_synth: Tensor) -> Tensor:
    """One minus the cosine similarity of flattened feature maps, in [0, 2]."""
    if f_real.shape != f_synth.shape:
        raise ShapeError(f"feature shapes differ: {tuple(f_real.shape)} vs {tuple(f_synth.shape)}")
    a = f_real.reshape(f_real.shape[0], -1)
    b = f_synth.reshape(f_synth.shape[0], -1)
    cos = (a * b).sum(dim=1) / (a.norm(dim=1) * b.norm(dim=1) + COSINE_EPS)
    return (1.0 - cos).mean()


def _sign_cross_entropy(pred_probs: Tensor, target_class: Tensor) -> Tensor:
    # pred_probs: (B, 3, 4), target_class: (B, 3) -> (B, 3)
    p = pred_probs.clamp(PROB_CLAMP, 1.0)
    return -torch.log(p.gather(-1, target_class.unsqueeze(-1)).squeeze(-1))


def viewpoint_consistency(pred: EncodedViewpoints, target: EncodedViewpoints) -> Tensor:
    """Cosine proximity of abs vectors plus sign cross-entropy, summed over angles.

    Per angle the term is ``-<|v1|, |v2|> + CE(sign_probs1, sign_class2)``;
    the minimum value is -3, reached when abs vectors coincide and the
    predicted sign class is confidently correct.
    """
    if pred.abs_vec.shape != target.abs_vec.shape:
        raise ShapeError("encoding batch sizes differ")
    cos_term = -(pred.abs_vec * target.abs_vec).sum(dim=-1)  # (B, 3)
    ce_term = _sign_cross_entropy(pred.sign_probs, target.sign_class)
    return (cos_term + ce_term).sum(dim=-1).mean()


def style_distance(z1: Tensor, z2: Tensor) -> Tensor:
    """Squared L2 distance over the style dimension, mean over the batch."""
    if z1.shape != z2.shape:
        raise ShapeError(f"style shapes differ: {tuple(z1.shape)} vs {tuple(z2.shape)}")
    return ((z1 - z2) ** 2).sum(dim=-1).mean()


def style_viewpoint_loss(
    z_target: Tensor,
    z_pred: Tensor,
    v_target: EncodedViewpoints,
    v_pred: EncodedViewpoints,
) -> Tensor:
    """Squared style error plus viewpoint consistency against the sampled targets."""
    return style_distance(z_target, z_pred) + viewpoint_consistency(v_pred, v_target)


def discriminator_loss(c_real: Tensor, c_synth: Tensor) -> Tensor:
    """Wasserstein critic loss: ``-mean(real scores) + mean(synthetic scores)``."""
    if c_real.numel() == 0 or c_synth.numel() == 0:
        raise ValueError("score batches must be nonempty")
    return -c_real.mean() + c_synth.mean()


def adversarial_loss(c_synth: Tensor) -> Tensor:
    """Generator-side Wasserstein loss: ``-mean(synthetic scores)``."""
    if c_synth.numel() == 0:
        raise ValueError("score batch must be nonempty")
    return -c_synth.mean()


def symmetry_loss(
    pred: tuple[EncodedViewpoints, Tensor],
    pred_flipped: tuple[EncodedViewpoints, Tensor],
) -> Tensor:
    """Consistency between predictions on an image and on its mirrored twin.

    The flipped image's viewpoint is mapped back through the flip rule
    ``(-a, e, -t)`` before comparison, so magnitudes must agree and azimuth
    and tilt must have opposite signs.  Styles of the pair must match.
    """
    v_pred, z_pred = pred
    v_flip, z_flip = pred_flipped
    return viewpoint_consistency(v_pred, v_flip.flipped()) + style_distance(z_pred, z_flip)


PairedTriplet = Sequence[tuple[tuple[EncodedViewpoints, Tensor], tuple[EncodedViewpoints, Tensor]]]


def _encodings_equal(a: EncodedViewpoints, b: EncodedViewpoints) -> bool:
    return torch.equal(a.abs_vec, b.abs_vec) and torch.equal(a.sign_probs, b.sign_probs)


def paired_style_viewpoint_loss(triplet: PairedTriplet) -> Tensor:
    """Sum of style+viewpoint losses over a one-parameter-varied triplet.

    The sampled side must follow the pattern ``(z0,v0), (z0,v1), (z1,v1)``:
    consecutive pairs share exactly one parameter and vary the other.  Each
    element of ``triplet`` is ``((v_sampled, z_sampled), (v_pred, z_pred))``.
    """
    if len(triplet) != 3:
        raise ValueError(f"expected 3 sample/prediction pairs, got {len(triplet)}")
    (s0, p0), (s1, p1), (s2, p2) = triplet
    if not torch.equal(s0[1], s1[1]):
        raise ValueError("pairs 0 and 1 must share the same style sample")
    if not _encodings_equal(s1[0], s2[0]):
        raise ValueError("pairs 1 and 2 must share the same viewpoint sample")
    if _encodings_equal(s0[0], s1[0]):
        raise ValueError("pairs 0 and 1 must differ in their viewpoint sample")
    if torch.equal(s1[1], s2[1]):
        raise ValueError("pairs 1 and 2 must differ in their style sample")
    total = None
    for (v_s, z_s), (v_p, z_p) in ((s0, p0), (s1, p1), (s2, p2)):
        term = style_viewpoint_loss(z_s, z_p, v_s, v_p)
        total = term if total is None else total + term
    return total


def flip_image_consistency(i_s: Tensor, i_s_star: Tensor) -> Tensor:
    """Mean absolute difference between an image and its re-mirrored flip twin."""
    if i_s.shape != i_s_star.shape:
        raise ShapeError(f"image shapes differ: {tuple(i_s.shape)} vs {tuple(i_s_star.shape)}")
    return (i_s - horizontal_flip(i_s_star)).abs().mean()


def total_viewpoint_loss(terms: ViewpointLossTerms, w: LossWeights) -> Tensor:
    return (
        w.symmetry * terms.symmetry
        + w.image_consistency * terms.image_consistency
        + w.style_viewpoint * terms.style_viewpoint
        + w.discriminator * terms.discriminator
    )


def total_synthesis_loss(terms: SynthesisLossTerms, w: LossWeights) -> Tensor:
    return (
        w.adversarial * terms.adversarial
        + w.paired_style_viewpoint * terms.paired_style_viewpoint
        + w.flip_consistency * terms.flip_consistency
    )
