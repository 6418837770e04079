"""Viewpoint math: angle encoding/decoding, rotation matrices, flips, geodesic distance.

Conventions used everywhere in this package (renderer, generator, evaluation):

* World axes: ``x`` points right, ``y`` points up, ``z`` points toward the
  viewer.  The orthographic camera looks along ``-z``.
* Azimuth rotates about ``y``, elevation about ``x``, tilt about ``z``; a
  viewpoint ``(a, e, t)`` maps to ``R = Rz(t) @ Rx(e) @ Ry(a)``.
* Angles are radians, normalized to ``[-pi, pi)``.  ``sign(0) := +``.
* An angle is encoded as a nonnegative unit vector ``(|cos|, |sin|)`` plus a
  four-way sign class over ``(sign cos, sign sin)``.

Everything here is pure and stateless; functions are safe to call from any
number of threads.  Scalar/NumPy APIs come first, followed by batched torch
helpers used by the networks and losses (those are differentiable where it
matters).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import Tensor

TWO_PI = 2.0 * math.pi

# (sign of cos, sign of sin) for each class index.
SIGN_CLASSES = ((1, 1), (1, -1), (-1, 1), (-1, -1))

# Index permutation of SIGN_CLASSES under angle negation (cos keeps sign, sin flips).
NEGATE_SIGN_PERMUTATION = (1, 0, 3, 2)


def wrap_angle(angle: float) -> float:
    """Normalize an angle to ``[-pi, pi)``."""
    if not math.isfinite(angle):
        raise ValueError(f"angle must be finite, got {angle!r}")
    return (angle + math.pi) % TWO_PI - math.pi


def circular_difference(a: float, b: float) -> float:
    """Smallest absolute difference between two angles, in ``[0, pi]``."""
    d = abs(wrap_angle(a) - wrap_angle(b)) % TWO_PI
    return min(d, TWO_PI - d)


@dataclass(frozen=True)
class EulerViewpoint:
    """Object viewpoint as (azimuth, elevation, tilt) radians, wrapped to [-pi, pi)."""

    azimuth: float
    elevation: float
    tilt: float

    def __post_init__(self):
        object.__setattr__(self, "azimuth", wrap_angle(float(self.azimuth)))
        object.__setattr__(self, "elevation", wrap_angle(float(self.elevation)))
        object.__setattr__(self, "tilt", wrap_angle(float(self.tilt)))

    def as_array(self) -> np.ndarray:
        return np.array([self.azimuth, self.elevation, self.tilt], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "EulerViewpoint":
        a, e, t = np.asarray(arr, dtype=np.float64).reshape(3)
        return cls(a, e, t)

    @classmethod
    def from_degrees(cls, azimuth: float, elevation: float, tilt: float) -> "EulerViewpoint":
        return cls(math.radians(azimuth), math.radians(elevation), math.radians(tilt))


def flip_viewpoint(v: EulerViewpoint) -> EulerViewpoint:
    """Viewpoint of the horizontally mirrored image: ``(-a, e, -t)``."""
    return EulerViewpoint(-v.azimuth, v.elevation, -v.tilt)


def _sign(x: float) -> int:
    # sign(0) := + by convention
    return 1 if x >= 0.0 else -1


@dataclass(frozen=True)
class AngleEncoding:
    """Network-facing representation of one angle.

    ``abs_vec`` is the nonnegative unit vector ``(|cos|, |sin|)``;
    ``sign_probs`` is a distribution over the four ``(sign cos, sign sin)``
    classes.  ``sign_class`` is derived as the argmax of ``sign_probs``.
    """

    abs_vec: np.ndarray
    sign_probs: np.ndarray

    def __post_init__(self):
        abs_vec = np.asarray(self.abs_vec, dtype=np.float64).reshape(2)
        sign_probs = np.asarray(self.sign_probs, dtype=np.float64).reshape(4)
        object.__setattr__(self, "abs_vec", abs_vec)
        object.__setattr__(self, "sign_probs", sign_probs)

    @property
    def sign_class(self) -> int:
        return int(np.argmax(self.sign_probs))

    @property
    def signs(self) -> tuple[int, int]:
        return SIGN_CLASSES[self.sign_class]

    def validate(self, atol: float = 1e-6):
        if not np.all(np.isfinite(self.abs_vec)) or not np.all(np.isfinite(self.sign_probs)):
            raise ValueError("encoding contains non-finite values")
        if np.any(self.abs_vec < -atol):
            raise ValueError("abs_vec components must be nonnegative")
        norm = float(np.linalg.norm(self.abs_vec))
        if abs(norm - 1.0) > atol:
            raise ValueError(f"abs_vec must be unit norm, got {norm}")
        if np.any(self.sign_probs < -atol) or abs(float(self.sign_probs.sum()) - 1.0) > atol:
            raise ValueError("sign_probs must be a probability distribution")


@dataclass(frozen=True)
class ViewpointEncoding:
    """Per-angle encodings for (azimuth, elevation, tilt)."""

    azimuth: AngleEncoding
    elevation: AngleEncoding
    tilt: AngleEncoding

    def validate(self, atol: float = 1e-6):
        for enc in (self.azimuth, self.elevation, self.tilt):
            enc.validate(atol)


def encode_angle(angle: float) -> AngleEncoding:
    """Encode one angle as its first-quadrant unit vector plus a one-hot sign class."""
    if not math.isfinite(angle):
        raise ValueError(f"angle must be finite, got {angle!r}")
    c, s = math.cos(angle), math.sin(angle)
    cls = SIGN_CLASSES.index((_sign(c), _sign(s)))
    probs = np.zeros(4, dtype=np.float64)
    probs[cls] = 1.0
    return AngleEncoding(abs_vec=np.array([abs(c), abs(s)]), sign_probs=probs)


def decode_angle(enc: AngleEncoding) -> float:
    """Reconstruct the angle from its encoding, in ``[-pi, pi)``.

    The signed cosine/sine are rebuilt from the abs vector and the argmax sign
    class; the angle is their two-argument arctangent.
    """
    x, y = enc.abs_vec
    if x == 0.0 and y == 0.0:
        raise ValueError("cannot decode a zero abs_vec")
    sc, ss = enc.signs
    return wrap_angle(math.atan2(ss * y, sc * x))


def encode_viewpoint(v: EulerViewpoint) -> ViewpointEncoding:
    return ViewpointEncoding(
        azimuth=encode_angle(v.azimuth),
        elevation=encode_angle(v.elevation),
        tilt=encode_angle(v.tilt),
    )


def decode_viewpoint(enc: ViewpointEncoding) -> EulerViewpoint:
    return EulerViewpoint(
        decode_angle(enc.azimuth),
        decode_angle(enc.elevation),
        decode_angle(enc.tilt),
    )


# ---------------------------------------------------------------------------
# Rotation matrices
# ---------------------------------------------------------------------------

def rotation_about_x(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rotation_about_y(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rotation_about_z(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def viewpoint_to_rotation(v: EulerViewpoint) -> np.ndarray:
    """Rotation matrix ``Rz(tilt) @ Rx(elevation) @ Ry(azimuth)``."""
    return rotation_about_z(v.tilt) @ rotation_about_x(v.elevation) @ rotation_about_y(v.azimuth)


def rotation_to_viewpoint(r: np.ndarray) -> EulerViewpoint:
    """Invert :func:`viewpoint_to_rotation`.

    Elevation is returned on the principal branch ``[-pi/2, pi/2]``.  In the
    gimbal-locked case ``|cos(elevation)| ~ 0`` azimuth is set to zero and the
    remaining rotation is folded into tilt.
    """
    r = require_rotation(r)
    se = float(np.clip(r[2, 1], -1.0, 1.0))
    e = math.asin(se)
    if abs(math.cos(e)) < 1e-8:
        a = 0.0
        t = math.atan2(r[1, 0], r[0, 0])
    else:
        a = math.atan2(-r[2, 0], r[2, 2])
        t = math.atan2(-r[0, 1], r[1, 1])
    return EulerViewpoint(a, e, t)


def require_rotation(r: np.ndarray, atol: float = 1e-6) -> np.ndarray:
    """Validate that ``r`` is a proper rotation matrix and return it as float64."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape != (3, 3):
        raise ValueError(f"rotation matrix must be 3x3, got shape {r.shape}")
    if not np.all(np.isfinite(r)):
        raise ValueError("rotation matrix contains non-finite values")
    err = float(np.abs(r.T @ r - np.eye(3)).max())
    det = float(np.linalg.det(r))
    # validation is slightly looser than the construction invariant to leave
    # headroom for accumulated round-off in long matrix products
    if err > 10.0 * atol or abs(det - 1.0) > 10.0 * atol:
        raise ValueError(
            f"matrix is not a proper rotation (orthonormality error {err:.2e}, det {det:.8f})"
        )
    return r


def geodesic_distance(r1: np.ndarray, r2: np.ndarray) -> float:
    """Angular distance between two rotations, in ``[0, pi]``.

    Equals the Frobenius norm of the matrix logarithm of ``r1.T @ r2`` divided
    by sqrt(2); computed in closed form from the trace.
    """
    r1 = require_rotation(r1)
    r2 = require_rotation(r2)
    rel = r1.T @ r2
    cos_theta = (float(np.trace(rel)) - 1.0) / 2.0
    return math.acos(min(1.0, max(-1.0, cos_theta)))


# ---------------------------------------------------------------------------
# Batched torch helpers (differentiable)
# ---------------------------------------------------------------------------

def wrap_angles_tensor(angles: Tensor) -> Tensor:
    return torch.remainder(angles + math.pi, TWO_PI) - math.pi


@dataclass
class EncodedViewpoints:
    """Batched angle encodings as tensors.

    ``abs_vec`` has shape ``(B, 3, 2)`` (unit rows, nonnegative) and
    ``sign_probs`` has shape ``(B, 3, 4)`` (rows sum to one).  Angle order is
    (azimuth, elevation, tilt).
    """

    abs_vec: Tensor
    sign_probs: Tensor

    def __post_init__(self):
        if self.abs_vec.ndim != 3 or self.abs_vec.shape[1:] != (3, 2):
            raise ValueError(f"abs_vec must have shape (B, 3, 2), got {tuple(self.abs_vec.shape)}")
        if self.sign_probs.shape != (*self.abs_vec.shape[:2], 4):
            raise ValueError(
                f"sign_probs must have shape (B, 3, 4), got {tuple(self.sign_probs.shape)}"
            )

    def __len__(self) -> int:
        return self.abs_vec.shape[0]

    @property
    def sign_class(self) -> Tensor:
        """Argmax sign class per angle, shape ``(B, 3)``."""
        return self.sign_probs.argmax(dim=-1)

    def cos_sin(self) -> Tensor:
        """Signed ``(cos, sin)`` per angle, shape ``(B, 3, 2)``.

        Signs come from the argmax class (not differentiable); the magnitudes
        keep their gradient.
        """
        signs = torch.tensor(SIGN_CLASSES, dtype=self.abs_vec.dtype, device=self.abs_vec.device)
        sel = signs[self.sign_class]  # (B, 3, 2)
        return self.abs_vec * sel

    def angles(self) -> Tensor:
        """Decoded angles, shape ``(B, 3)``, in ``[-pi, pi)``."""
        cs = self.cos_sin()
        return wrap_angles_tensor(torch.atan2(cs[..., 1], cs[..., 0]))

    def flipped(self) -> "EncodedViewpoints":
        """Encoding of the flipped viewpoint ``(-a, e, -t)``.

        Magnitudes are invariant under negation; the sign classes of azimuth
        and tilt get their sin component negated (an index permutation).
        """
        perm = torch.tensor(NEGATE_SIGN_PERMUTATION, device=self.sign_probs.device)
        probs = torch.stack(
            [
                self.sign_probs[:, 0][:, perm],
                self.sign_probs[:, 1],
                self.sign_probs[:, 2][:, perm],
            ],
            dim=1,
        )
        return EncodedViewpoints(abs_vec=self.abs_vec, sign_probs=probs)

    def to_viewpoints(self) -> list[EulerViewpoint]:
        return [EulerViewpoint.from_array(row) for row in self.angles().detach().cpu().numpy()]

    def validate(self, atol: float = 1e-6):
        if not torch.isfinite(self.abs_vec).all() or not torch.isfinite(self.sign_probs).all():
            raise ValueError("encoding contains non-finite values")
        if (self.abs_vec < -atol).any():
            raise ValueError("abs_vec components must be nonnegative")
        norms = self.abs_vec.norm(dim=-1)
        if (norms - 1.0).abs().max().item() > atol:
            raise ValueError("abs_vec rows must be unit norm")
        sums = self.sign_probs.sum(dim=-1)
        if (self.sign_probs < -atol).any() or (sums - 1.0).abs().max().item() > atol:
            raise ValueError("sign_probs rows must be probability distributions")


def encode_viewpoints(angles: Tensor | np.ndarray) -> EncodedViewpoints:
    """Encode a ``(B, 3)`` batch of viewpoint angles with one-hot sign classes."""
    if isinstance(angles, np.ndarray):
        angles = torch.from_numpy(np.ascontiguousarray(angles, dtype=np.float64))
    if angles.ndim != 2 or angles.shape[1] != 3:
        raise ValueError(f"angles must have shape (B, 3), got {tuple(angles.shape)}")
    c, s = torch.cos(angles), torch.sin(angles)
    abs_vec = torch.stack([c.abs(), s.abs()], dim=-1)
    # class index under SIGN_CLASSES ordering: (+,+)=0, (+,-)=1, (-,+)=2, (-,-)=3
    cls = 2 * (c < 0).long() + (s < 0).long()
    sign_probs = torch.nn.functional.one_hot(cls, num_classes=4).to(abs_vec.dtype)
    return EncodedViewpoints(abs_vec=abs_vec, sign_probs=sign_probs)


def rotation_matrices_from_cos_sin(cos_sin: Tensor) -> Tensor:
    """Batched ``Rz(t) @ Rx(e) @ Ry(a)`` from signed ``(cos, sin)`` pairs.

    ``cos_sin`` has shape ``(B, 3, 2)`` in angle order (azimuth, elevation,
    tilt); differentiable with respect to its entries.  The rows are expected
    to be (approximately) unit; they are not renormalized here.
    """
    if cos_sin.ndim != 3 or cos_sin.shape[1:] != (3, 2):
        raise ValueError(f"cos_sin must have shape (B, 3, 2), got {tuple(cos_sin.shape)}")
    ca, sa = cos_sin[:, 0, 0], cos_sin[:, 0, 1]
    ce, se = cos_sin[:, 1, 0], cos_sin[:, 1, 1]
    ct, st = cos_sin[:, 2, 0], cos_sin[:, 2, 1]
    r = torch.stack(
        [
            ct * ca - st * se * sa,
            -st * ce,
            ct * sa + st * se * ca,
            st * ca + ct * se * sa,
            ct * ce,
            st * sa - ct * se * ca,
            -ce * sa,
            se,
            ce * ca,
        ],
        dim=-1,
    )
    return r.reshape(-1, 3, 3)


def rotation_matrices_from_angles(angles: Tensor) -> Tensor:
    """Batched rotation matrices from ``(B, 3)`` viewpoint angles."""
    if angles.ndim != 2 or angles.shape[1] != 3:
        raise ValueError(f"angles must have shape (B, 3), got {tuple(angles.shape)}")
    cos_sin = torch.stack([torch.cos(angles), torch.sin(angles)], dim=-1)
    return rotation_matrices_from_cos_sin(cos_sin)
