"""Procedural toy renderer and dataset manager.

Renders a small convex colored object (cuboid or triangular prism) under an
orthographic camera with Lambertian shading, at a known viewpoint, so that
self-supervised training can be verified end to end against ground truth the
trainer never sees.  Also ingests generic folders of PNG images.

The camera looks along ``-z``; image columns grow with ``+x`` and rows grow
with ``-y``, matching the codec and generator conventions.  The default face
palette is mirror consistent (the two side faces parallel to the mirror plane
share a color) and the default light direction has no sideways component, so
a horizontally mirrored render equals the render of the flipped viewpoint up
to rasterization noise.  Azimuth remains identifiable over the full circle
because the remaining four faces are pairwise distinct.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from ssv.codec import EulerViewpoint, viewpoint_to_rotation
from ssv.exceptions import ConfigError

logger = logging.getLogger(__name__)

SUPERSAMPLE = 2
CAMERA_HALF_EXTENT = 1.0
AMBIENT = 0.35
STYLE_PARAM_COUNT = 6  # brightness, red tint, blue tint, scale, shift x, shift y

DEFAULT_FACE_COLORS = (
    (0.85, 0.25, 0.25),  # +x right (shares color with -x: mirror consistency)
    (0.85, 0.25, 0.25),  # -x left
    (0.95, 0.85, 0.20),  # +y top
    (0.35, 0.20, 0.55),  # -y bottom
    (0.20, 0.65, 0.90),  # +z front
    (0.30, 0.80, 0.35),  # -z back
)


@dataclass(frozen=True)
class ToySpec:
    object_kind: str = "textured-cuboid"
    face_colors: tuple = DEFAULT_FACE_COLORS
    lighting_direction: tuple = (0.0, 0.35, 0.9368)
    background_color: tuple = (0.08, 0.08, 0.10)
    image_size: int = 64
    scale_jitter: float = 0.0
    translation_jitter: float = 0.0

    def __post_init__(self):
        if self.object_kind not in ("textured-cuboid", "tri-colored-prism"):
            raise ConfigError(f"unknown object kind {self.object_kind!r}")
        colors = tuple(tuple(float(c) for c in col) for col in self.face_colors)
        if len(colors) != 6 or any(len(c) != 3 for c in colors):
            raise ConfigError("face_colors must be six RGB triples")
        if any(not 0.0 <= c <= 1.0 for col in colors for c in col):
            raise ConfigError("face colors must lie in [0, 1]")
        # all faces pairwise distinct, except the +-x pair which may share a
        # color to make renders mirror consistent
        for i in range(6):
            for j in range(i + 1, 6):
                if (i, j) == (0, 1):
                    continue
                if colors[i] == colors[j]:
                    raise ConfigError(f"face colors {i} and {j} must be distinct")
        object.__setattr__(self, "face_colors", colors)
        light = np.asarray(self.lighting_direction, dtype=np.float64)
        norm = float(np.linalg.norm(light))
        if light.shape != (3,) or norm < 1e-9:
            raise ConfigError("lighting_direction must be a nonzero 3-vector")
        object.__setattr__(self, "lighting_direction", tuple(light / norm))
        background = tuple(float(c) for c in self.background_color)
        if len(background) != 3 or any(not 0.0 <= c <= 1.0 for c in background):
            raise ConfigError("background_color must be an RGB triple in [0, 1]")
        object.__setattr__(self, "background_color", background)
        if self.image_size < 16:
            raise ConfigError(f"image_size must be >= 16, got {self.image_size}")
        if self.scale_jitter < 0 or self.translation_jitter < 0:
            raise ConfigError("jitter fractions must be nonnegative")

    def to_json_dict(self) -> dict:
        return asdict(self)


def _cuboid_mesh():
    hx, hy, hz = 0.62, 0.45, 0.34
    v = {
        (sx, sy, sz): np.array([sx * hx, sy * hy, sz * hz])
        for sx in (-1, 1)
        for sy in (-1, 1)
        for sz in (-1, 1)
    }
    # counterclockwise when seen from outside; color index per face
    faces = [
        ([v[1, -1, -1], v[1, 1, -1], v[1, 1, 1], v[1, -1, 1]], 0),    # +x
        ([v[-1, -1, 1], v[-1, 1, 1], v[-1, 1, -1], v[-1, -1, -1]], 1),  # -x
        ([v[-1, 1, -1], v[-1, 1, 1], v[1, 1, 1], v[1, 1, -1]], 2),    # +y
        ([v[-1, -1, 1], v[-1, -1, -1], v[1, -1, -1], v[1, -1, 1]], 3),  # -y
        ([v[-1, -1, 1], v[1, -1, 1], v[1, 1, 1], v[-1, 1, 1]], 4),    # +z
        ([v[1, -1, -1], v[-1, -1, -1], v[-1, 1, -1], v[1, 1, -1]], 5),  # -z
    ]
    return faces


def _prism_mesh():
    # axis along x; scalene triangle cross-section in the (y, z) plane, so the
    # mirror plane x=0 maps the solid onto itself (caps swap, sides fixed)
    hx = 0.62
    tri = [np.array([0.42, -0.25]), np.array([-0.38, -0.30]), np.array([-0.10, 0.45])]
    faces = []
    for k in range(3):
        y0, z0 = tri[k]
        y1, z1 = tri[(k + 1) % 3]
        quad = [
            np.array([-hx, y0, z0]),
            np.array([hx, y0, z0]),
            np.array([hx, y1, z1]),
            np.array([-hx, y1, z1]),
        ]
        faces.append((quad, k))
    cap_plus = [np.array([hx, y, z]) for y, z in tri]
    cap_minus = [np.array([-hx, y, z]) for y, z in reversed(tri)]
    faces.append((cap_plus, 3))
    faces.append((cap_minus, 3))
    return faces


def _face_normal(verts):
    n = np.cross(verts[1] - verts[0], verts[2] - verts[0])
    return n / np.linalg.norm(n)


def _styled_colors(spec: ToySpec, style: np.ndarray) -> np.ndarray:
    colors = np.asarray(spec.face_colors, dtype=np.float64)
    brightness = 1.0 + 0.12 * style[0]
    tint = np.array([1.0 + 0.08 * style[1], 1.0, 1.0 + 0.08 * style[2]])
    return np.clip(colors * brightness * tint, 0.0, 1.0)


def render_toy(spec: ToySpec, v: EulerViewpoint, style) -> np.ndarray:
    """Rasterize the toy object at a viewpoint; returns (H, W, 3) in [-1, 1].

    ``style`` is a vector of up to six appearance parameters in [-1, 1]:
    brightness, red tint, blue tint, and (scaled by the spec's jitter
    fractions) object scale and in-plane shift.  Deterministic for fixed
    inputs.
    """
    style = np.zeros(STYLE_PARAM_COUNT) if style is None else np.asarray(style, dtype=np.float64)
    if style.ndim != 1 or style.size > STYLE_PARAM_COUNT:
        raise ConfigError(f"style must be a vector of at most {STYLE_PARAM_COUNT} parameters")
    style = np.pad(style, (0, STYLE_PARAM_COUNT - style.size))
    if not np.all(np.isfinite(style)):
        raise ConfigError("style parameters must be finite")

    faces = _cuboid_mesh() if spec.object_kind == "textured-cuboid" else _prism_mesh()
    colors = _styled_colors(spec, style)
    rot = viewpoint_to_rotation(v)
    light = np.asarray(spec.lighting_direction)
    scale = 1.0 + spec.scale_jitter * style[3]
    shift = np.array(
        [spec.translation_jitter * style[4], spec.translation_jitter * style[5], 0.0]
    ) * CAMERA_HALF_EXTENT

    size = spec.image_size
    n = size * SUPERSAMPLE
    # sample-center world coordinates; columns grow with +x, rows with -y
    frac = (2.0 * (np.arange(n) + 0.5) / n - 1.0) * CAMERA_HALF_EXTENT
    xs = frac[None, :]
    ys = -frac[:, None]
    buffer = np.empty((n, n, 3), dtype=np.float64)
    buffer[:] = np.asarray(spec.background_color)

    for verts, color_idx in faces:
        normal = rot @ _face_normal(verts)
        if normal[2] <= 1e-9:
            continue
        shade = AMBIENT + (1.0 - AMBIENT) * max(0.0, float(normal @ light))
        shaded = colors[color_idx] * shade
        pts = np.array([rot @ p * scale + shift for p in verts])
        poly = pts[:, :2]  # orthographic projection
        inside = None
        for k in range(len(poly)):
            x0, y0 = poly[k]
            x1, y1 = poly[(k + 1) % len(poly)]
            edge = (x1 - x0) * (ys - y0) - (y1 - y0) * (xs - x0)
            inside = edge >= 0 if inside is None else inside & (edge >= 0)
        buffer[inside] = shaded

    img = buffer.reshape(size, SUPERSAMPLE, size, SUPERSAMPLE, 3).mean(axis=(1, 3))
    return (img * 2.0 - 1.0).astype(np.float32)


# ---------------------------------------------------------------------------
# Dataset generation and manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    file: str
    viewpoint: EulerViewpoint
    style: list[float] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "file": self.file,
            "azimuth_deg": math.degrees(self.viewpoint.azimuth),
            "elevation_deg": math.degrees(self.viewpoint.elevation),
            "tilt_deg": math.degrees(self.viewpoint.tilt),
            "style": list(self.style),
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ManifestRecord":
        return cls(
            file=d["file"],
            viewpoint=EulerViewpoint.from_degrees(
                d["azimuth_deg"], d["elevation_deg"], d["tilt_deg"]
            ),
            style=list(d.get("style", [])),
        )


@dataclass
class DatasetManifest:
    records: list[ManifestRecord]
    seed: int
    spec: ToySpec
    ranges: dict

    def write(self, path: Path):
        path = Path(path)
        lines = [json.dumps(r.to_json_dict(), sort_keys=True) for r in self.records]
        path.write_text("\n".join(lines) + "\n")
        meta = {
            "seed": self.seed,
            "spec": self.spec.to_json_dict(),
            "ranges": self.ranges,
        }
        path.with_suffix(".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def read_manifest(path) -> list[ManifestRecord]:
    path = Path(path)
    records = []
    with path.open() as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(ManifestRecord.from_json_dict(json.loads(line)))
    return records


DEFAULT_RANGES = {
    "azimuth": (-math.pi, math.pi),
    "elevation": (-math.pi / 3, math.pi / 3),
    "tilt": (-math.pi / 6, math.pi / 6),
}


def generate_dataset(spec: ToySpec, n: int, ranges: dict, seed: int, out_dir) -> DatasetManifest:
    """Render ``n`` toy images at uniformly sampled viewpoints and styles.

    Images are written as 8-bit PNGs plus a JSON Lines manifest holding the
    ground-truth viewpoints (in degrees) and style parameters.  Ground truth
    is for evaluation only; the training loader never reads the manifest.
    Partial output is removed if generation fails.
    """
    if n < 1:
        raise ConfigError(f"dataset size must be positive, got {n}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ranges = {**DEFAULT_RANGES, **(ranges or {})}
    for key, (lo, hi) in ranges.items():
        if not -math.pi <= lo <= hi <= math.pi:
            raise ConfigError(f"{key} range must satisfy -pi <= lo <= hi <= pi")
    rng = np.random.default_rng(seed)
    records = []
    created: list[Path] = []
    try:
        for i in range(n):
            v = EulerViewpoint(
                rng.uniform(*ranges["azimuth"]),
                rng.uniform(*ranges["elevation"]),
                rng.uniform(*ranges["tilt"]),
            )
            style = rng.uniform(-1.0, 1.0, size=STYLE_PARAM_COUNT)
            img = render_toy(spec, v, style)
            name = f"toy_{i:05d}.png"
            save_image(img, out_dir / name)
            created.append(out_dir / name)
            records.append(ManifestRecord(file=name, viewpoint=v, style=style.tolist()))
        manifest = DatasetManifest(
            records=records,
            seed=seed,
            spec=spec,
            ranges={k: list(r) for k, r in ranges.items()},
        )
        manifest.write(out_dir / "manifest.jsonl")
    except BaseException:
        for p in created:
            p.unlink(missing_ok=True)
        raise
    return manifest


def save_image(img: np.ndarray, path):
    """Save an (H, W, 3) image in [-1, 1] as an 8-bit RGB PNG."""
    arr = np.clip((np.asarray(img, dtype=np.float64) + 1.0) * 0.5 * 255.0, 0, 255)
    Image.fromarray(np.round(arr).astype(np.uint8), mode="RGB").save(path, format="PNG")


def load_image(path, resolution: int) -> np.ndarray:
    """Load a PNG as (H, W, 3) float32 in [-1, 1], resized if needed."""
    with Image.open(path) as im:
        im = im.convert("RGB")
        if im.size != (resolution, resolution):
            im = im.resize((resolution, resolution), Image.BILINEAR)
        arr = np.asarray(im, dtype=np.float32)
    return arr / 255.0 * 2.0 - 1.0


class ImageCollection:
    """Deterministic, memory-resident view of a folder of PNG images.

    Files are read in lexicographic order; unreadable files are skipped with a
    warning and counted.  Pixels are stored as uint8 and converted to float
    tensors in [-1, 1] per batch.
    """

    def __init__(self, images: np.ndarray, files: list[str], skipped: int):
        self.images = images  # (N, H, W, 3) uint8
        self.files = files
        self.skipped = skipped

    def __len__(self) -> int:
        return self.images.shape[0]

    def as_tensor(self, indices) -> torch.Tensor:
        batch = self.images[np.asarray(indices, dtype=np.int64)]
        t = torch.from_numpy(batch).to(torch.float32) / 255.0 * 2.0 - 1.0
        return t.permute(0, 3, 1, 2).contiguous()


def load_collection(directory, resolution: int) -> ImageCollection:
    """Load every PNG under ``directory`` at the configured resolution."""
    directory = Path(directory)
    if not directory.is_dir():
        raise ConfigError(f"not a directory: {directory}")
    paths = sorted(p for p in directory.iterdir() if p.suffix.lower() == ".png")
    images, files = [], []
    skipped = 0
    for p in paths:
        try:
            arr = load_image(p, resolution)
        except Exception as exc:  # unreadable file: skip, warn, count
            logger.warning("skipping unreadable image %s: %s", p.name, exc)
            skipped += 1
            continue
        images.append(np.round((arr + 1.0) * 0.5 * 255.0).astype(np.uint8))
        files.append(p.name)
    if not images:
        raise ConfigError(f"no readable PNG images in {directory}")
    return ImageCollection(np.stack(images), files, skipped)
