"""Deterministic generator of synthetic multi-view baggage datasets.

Each identity is a procedural object: a convex polygon body with a material
texture and 0..3 decals (sticker / rope cues), rendered under two visually
divergent domains. BHS views use a dark uniform background and neutral
lighting; CHECKPOINT views add background clutter, lighting shift, motion
blur and occlusion. Ground-truth polygon masks come from the same rasterizer
used for mask application, so the stored mask delimits exactly the rendered
object surface (occluders excluded).

Determinism: the identity appearance is a pure function of (seed, identity
index); every per-view stream is derived independently, so identities and
views may be rendered in any order (or in parallel) without changing output.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .manifest import (
    MANIFEST_FILENAME,
    DatasetManifest,
    Domain,
    ImageRecord,
    Material,
    save_manifest,
)
from .preprocessing import bbox_from_polygon, polygon_interior_mask
from .seeding import derive_rng

# Identity proportions of the four surface material families.
MATERIAL_WEIGHTS = {
    Material.HARD: 2767,
    Material.SOFT: 1120,
    Material.PAPERBOARD: 198,
    Material.OTHERS: 434,
}

_BODY_VERTICES = 12
_BASE_RADIUS = 0.40  # fraction of image size
_RADIUS_JITTER = 0.04
_ANGLE_JITTER = 0.45 * (2 * np.pi / _BODY_VERTICES) / 2
_VIEW_BASE_ANGLE = 2 * np.pi / 5  # views rotate the object by multiples of 72 deg


@dataclass
class DomainNoise:
    checkpoint_blur: float = 1.0
    color_shift: float = 0.5
    occlusion_prob: float = 0.25
    missing_view_prob: float = 0.15

    def __post_init__(self) -> None:
        for name in ("occlusion_prob", "missing_view_prob"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if self.checkpoint_blur < 0 or self.color_shift < 0:
            raise ValueError("blur and color shift strengths must be >= 0")

    def to_dict(self) -> dict:
        return {
            "checkpoint_blur": self.checkpoint_blur,
            "color_shift": self.color_shift,
            "occlusion_prob": self.occlusion_prob,
            "missing_view_prob": self.missing_view_prob,
        }


@dataclass
class SynthConfig:
    n_identities: int
    bhs_views: int = 3
    checkpoint_views: int = 4
    image_size: int = 320
    domain_noise: DomainNoise = field(default_factory=DomainNoise)
    distractor_similarity: float = 0.3
    max_decals: int = 3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_identities < 1:
            raise ValueError("n_identities must be >= 1")
        if not 1 <= self.bhs_views <= 3:
            raise ValueError("bhs_views must be in 1..3")
        if not 1 <= self.checkpoint_views <= 4:
            raise ValueError("checkpoint_views must be in 1..4")
        if self.image_size < 64:
            raise ValueError("image_size must be >= 64")
        if not 0.0 <= self.distractor_similarity <= 1.0:
            raise ValueError("distractor_similarity must be in [0, 1]")
        if self.max_decals < 0:
            raise ValueError("max_decals must be >= 0")

    def to_dict(self) -> dict:
        return {
            "n_identities": self.n_identities,
            "bhs_views": self.bhs_views,
            "checkpoint_views": self.checkpoint_views,
            "image_size": self.image_size,
            "domain_noise": self.domain_noise.to_dict(),
            "distractor_similarity": self.distractor_similarity,
            "max_decals": self.max_decals,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SynthConfig":
        data = dict(data)
        if "domain_noise" in data:
            data["domain_noise"] = DomainNoise(**data["domain_noise"])
        return cls(**data)


@dataclass(frozen=True)
class Decal:
    kind: str  # "sticker" or "rope"
    position: tuple[float, float]  # body-local coordinates
    size: float
    angle: float
    color: tuple[float, float, float]


@dataclass(frozen=True)
class IdentitySpec:
    identity_id: str
    body_polygon: np.ndarray  # (V, 2) body-local vertices, unit scale
    color: tuple[float, float, float]
    material: Material
    texture_angle: float
    texture_freq: float
    texture_amp: float
    view_angle: tuple[float, ...]  # absolute pose angle per view index 1..4
    view_scale: tuple[float, ...]
    view_shift: tuple[tuple[float, float], ...]  # fraction of image size
    decals: tuple[Decal, ...]


def identity_spec(config: SynthConfig, index: int) -> IdentitySpec:
    """Appearance parameters for one identity; pure in (config.seed, index).

    All appearance draws are taken unconditionally and scaled toward a shared
    canonical object by ``distractor_similarity``, so the same seed yields
    pairwise-comparable identities across similarity settings. Decals are the
    distinguishing cues and are never scaled.
    """
    rng = derive_rng(config.seed, "identity", index)
    vary = 1.0 - config.distractor_similarity

    base_angles = np.linspace(0.0, 2 * np.pi, _BODY_VERTICES, endpoint=False)
    angles = base_angles + vary * rng.uniform(-_ANGLE_JITTER, _ANGLE_JITTER, _BODY_VERTICES)
    radii = _BASE_RADIUS + vary * rng.uniform(-_RADIUS_JITTER, _RADIUS_JITTER, _BODY_VERTICES)
    points = np.stack([radii * np.cos(angles), radii * np.sin(angles)], axis=1)
    body = points[_convex_hull_order(points)]

    hue = (0.58 + vary * rng.uniform(-0.5, 0.5)) % 1.0
    sat = float(np.clip(0.45 + vary * rng.uniform(-0.35, 0.35), 0.05, 0.9))
    val = float(np.clip(0.55 + vary * rng.uniform(-0.30, 0.30), 0.2, 0.9))
    color = colorsys.hsv_to_rgb(hue, sat, val)

    names = list(MATERIAL_WEIGHTS)
    weights = np.array([MATERIAL_WEIGHTS[m] for m in names], dtype=np.float64)
    material = names[int(rng.choice(len(names), p=weights / weights.sum()))]
    texture_angle = rng.uniform(0, np.pi)
    texture_freq = rng.uniform(2.0, 6.0)
    texture_amp = vary * rng.uniform(0.10, 0.25)

    view_angle, view_scale, view_shift = [], [], []
    for view in range(4):
        dangle = vary * rng.uniform(-0.35, 0.35)
        dscale = 1.0 + vary * rng.uniform(-0.05, 0.05)
        shift = vary * rng.uniform(-0.02, 0.02, 2)
        view_angle.append(view * _VIEW_BASE_ANGLE + dangle)
        view_scale.append(dscale)
        view_shift.append((float(shift[0]), float(shift[1])))

    decals = []
    n_decals = int(rng.integers(0, config.max_decals + 1)) if config.max_decals else 0
    for _ in range(n_decals):
        kind = "sticker" if rng.random() < 0.7 else "rope"
        pos_r = rng.uniform(0.0, 0.22)
        pos_a = rng.uniform(0, 2 * np.pi)
        decals.append(
            Decal(
                kind=kind,
                position=(pos_r * np.cos(pos_a), pos_r * np.sin(pos_a)),
                size=float(rng.uniform(0.05, 0.12)),
                angle=float(rng.uniform(0, np.pi)),
                color=colorsys.hsv_to_rgb(rng.uniform(0, 1), 0.85, 0.9),
            )
        )

    return IdentitySpec(
        identity_id=f"id{index:05d}",
        body_polygon=body,
        color=color,
        material=material,
        texture_angle=float(texture_angle),
        texture_freq=float(texture_freq),
        texture_amp=float(texture_amp),
        view_angle=tuple(view_angle),
        view_scale=tuple(view_scale),
        view_shift=tuple(view_shift),
        decals=tuple(decals),
    )


def _convex_hull_order(points: np.ndarray) -> list[int]:
    """Indices of the convex hull of ``points`` in counter-clockwise order."""
    order = np.lexsort((points[:, 1], points[:, 0]))
    pts = points[order]

    def half(indices):
        chain: list[int] = []
        for i in indices:
            while len(chain) >= 2:
                o, a = pts[chain[-2]], pts[chain[-1]]
                if (a[0] - o[0]) * (pts[i][1] - o[1]) - (a[1] - o[1]) * (pts[i][0] - o[0]) <= 0:
                    chain.pop()
                else:
                    break
            chain.append(i)
        return chain

    lower = half(range(len(pts)))
    upper = half(range(len(pts) - 1, -1, -1))
    hull_local = lower[:-1] + upper[:-1]
    return [int(order[i]) for i in hull_local]


def _pose_transform(spec: IdentitySpec, view_index: int, size: int):
    """Pixel-space pose for a view: rotation, scale and center translation.

    The pose is a function of the view index and identity only, never of the
    domain, so both domains can photograph the same side of the object.
    """
    angle = spec.view_angle[view_index - 1]
    scale = spec.view_scale[view_index - 1] * size
    shift = np.asarray(spec.view_shift[view_index - 1]) * size
    center = np.array([size / 2.0, size / 2.0]) + shift
    return angle, scale, center


def _transformed_polygon(spec: IdentitySpec, view_index: int, size: int) -> np.ndarray:
    angle, scale, center = _pose_transform(spec, view_index, size)
    rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]])
    verts = spec.body_polygon @ rot.T * scale + center
    verts = np.clip(np.rint(verts), 0, size - 1).astype(np.int64)
    keep = [0]
    for i in range(1, len(verts)):
        if not np.array_equal(verts[i], verts[keep[-1]]):
            keep.append(i)
    if np.array_equal(verts[keep[-1]], verts[keep[0]]):
        keep.pop()
    return verts[keep]


def _local_coords(spec: IdentitySpec, view_index: int, size: int):
    """Body-local coordinates of every pixel center; textures and decals are
    defined in this frame so appearance travels with the pose."""
    angle, scale, center = _pose_transform(spec, view_index, size)
    xs = np.arange(size, dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, xs)
    dx, dy = px - center[0], py - center[1]
    cos_a, sin_a = np.cos(-angle), np.sin(-angle)
    lx = (cos_a * dx - sin_a * dy) / scale
    ly = (sin_a * dx + cos_a * dy) / scale
    return lx, ly


def _texture_value(spec: IdentitySpec, lx: np.ndarray, ly: np.ndarray) -> np.ndarray:
    """Signed pattern in [-1, 1]; family depends on the material label."""
    u = lx * np.cos(spec.texture_angle) + ly * np.sin(spec.texture_angle)
    v = -lx * np.sin(spec.texture_angle) + ly * np.cos(spec.texture_angle)
    freq = 2 * np.pi * spec.texture_freq / _BASE_RADIUS / 2
    if spec.material is Material.HARD:
        return np.sin(freq * 0.5 * u)
    if spec.material is Material.SOFT:
        return np.sin(freq * u) * np.sin(freq * v)
    if spec.material is Material.PAPERBOARD:
        return np.sign(np.sin(freq * 0.75 * v))
    return np.sin(freq * (u + v)) * 0.5 + np.sin(freq * (u - v)) * 0.5


def _paint_object(spec: IdentitySpec, mask: np.ndarray, view_index: int, size: int) -> np.ndarray:
    """RGB float image of the object over a transparent canvas (zeros outside mask)."""
    lx, ly = _local_coords(spec, view_index, size)
    pattern = _texture_value(spec, lx, ly) * spec.texture_amp
    base = np.asarray(spec.color, dtype=np.float64)
    img = np.zeros((size, size, 3), dtype=np.float64)
    img[mask] = np.clip(base[None, :] * (1.0 + pattern[mask, None]), 0.0, 1.0)

    for decal in spec.decals:
        ddx = lx - decal.position[0]
        ddy = ly - decal.position[1]
        if decal.kind == "sticker":
            hit = ddx * ddx + ddy * ddy <= decal.size**2
        else:  # rope: a band across the whole body
            normal = ddx * np.cos(decal.angle) + ddy * np.sin(decal.angle)
            hit = np.abs(normal) <= decal.size * 0.35
        hit &= mask
        img[hit] = decal.color
    return img


def _checkpoint_background(size: int, rng: np.random.Generator) -> np.ndarray:
    """Cluttered checkpoint scene: floor gradient plus random blocky shapes."""
    top = rng.uniform(0.35, 0.6, 3)
    bottom = rng.uniform(0.15, 0.4, 3)
    ramp = np.linspace(0, 1, size)[:, None, None]
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = top[None, None, :] * (1 - ramp) + bottom[None, None, :] * ramp
    for _ in range(int(rng.integers(4, 9))):
        x0, y0 = rng.integers(0, size - 8, 2)
        w, h = rng.integers(size // 10, size // 2, 2)
        color = rng.uniform(0.1, 0.8, 3)
        img[y0 : min(size, y0 + h), x0 : min(size, x0 + w)] = color
    return img


def _bhs_background(size: int) -> np.ndarray:
    """Dark conveyor-like uniform background."""
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = (0.07, 0.07, 0.09)
    return img


def _draw_occluder(img: np.ndarray, mask: np.ndarray, rng: np.random.Generator) -> None:
    """Paint a shape over the object covering at most half of it."""
    size = img.shape[0]
    ys, xs = np.nonzero(mask)
    pick = int(rng.integers(0, len(ys)))
    cy, cx = float(ys[pick]), float(xs[pick])
    body_r = np.sqrt(mask.sum() / np.pi)
    radius = rng.uniform(0.15, 0.3) * 2 * body_r
    grid = np.arange(size, dtype=np.float64) + 0.5
    gx, gy = np.meshgrid(grid, grid)
    occ = (gx - cx) ** 2 + (gy - cy) ** 2 <= radius**2
    color = rng.uniform(0.2, 0.75, 3)
    img[occ] = color


def _motion_blur(img: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    half = int(round(3 * strength))
    theta = rng.uniform(0, np.pi)
    if half < 1:
        return img
    k = 2 * half + 1
    kernel = np.zeros((k, k), dtype=np.float64)
    for t in np.linspace(-half, half, 4 * half + 1):
        x = half + t * np.cos(theta)
        y = half + t * np.sin(theta)
        x0, y0 = int(np.floor(x)), int(np.floor(y))
        fx, fy = x - x0, y - y0
        for dy_, wy in ((0, 1 - fy), (1, fy)):
            for dx_, wx in ((0, 1 - fx), (1, fx)):
                yy, xx = y0 + dy_, x0 + dx_
                if 0 <= yy < k and 0 <= xx < k:
                    kernel[yy, xx] += wx * wy
    kernel /= kernel.sum()
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[:, :, c] = ndimage.convolve(img[:, :, c], kernel, mode="nearest")
    return out


def render_view(
    config: SynthConfig,
    spec: IdentitySpec,
    domain: Domain,
    view_index: int,
    rng: np.random.Generator,
) -> tuple[np.ndarray, tuple[tuple[int, int], ...]]:
    """Render one view; returns (uint8 HxWx3 image, mask polygon).

    The rng drives only domain nuisance factors (clutter, occlusion, lighting,
    blur); object appearance is fully determined by the identity spec and the
    view index.
    """
    size = config.image_size
    noise = config.domain_noise
    polygon = _transformed_polygon(spec, view_index, size)
    mask = polygon_interior_mask(polygon, size, size)

    if domain is Domain.BHS:
        img = _bhs_background(size)
    else:
        img = _checkpoint_background(size, rng)

    obj = _paint_object(spec, mask, view_index, size)
    img[mask] = obj[mask]

    if domain is Domain.CHECKPOINT:
        if rng.random() < noise.occlusion_prob:
            _draw_occluder(img, mask, rng)
        if noise.color_shift > 0:
            brightness = 1.0 + noise.color_shift * rng.uniform(-0.35, 0.35)
            gains = 1.0 + noise.color_shift * rng.uniform(-0.25, 0.25, 3)
            img = np.clip(img * brightness * gains[None, None, :], 0.0, 1.0)
        if noise.checkpoint_blur > 0:
            img = _motion_blur(img, noise.checkpoint_blur, rng)

    img8 = (np.clip(img, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    return img8, tuple((int(x), int(y)) for x, y in polygon)


def generate_dataset(config: SynthConfig, out_dir: Path | str) -> DatasetManifest:
    """Write images plus manifest under ``out_dir`` and return the manifest.

    Layout: ``images/<identity_id>/<domain>_<view>.png`` with the manifest at
    the directory root. Fully deterministic under config.seed.
    """
    out = Path(out_dir)
    records: list[ImageRecord] = []
    for index in range(config.n_identities):
        spec = identity_spec(config, index)
        views: list[tuple[Domain, int]] = [
            (Domain.BHS, v) for v in range(1, config.bhs_views + 1)
        ]
        keep_rng = derive_rng(config.seed, "views", index)
        kept = [
            v
            for v in range(1, config.checkpoint_views + 1)
            if keep_rng.random() >= config.domain_noise.missing_view_prob
        ]
        if not kept:  # an identity must stay identifiable in both domains
            kept = [1]
        views.extend((Domain.CHECKPOINT, v) for v in kept)

        identity_dir = out / "images" / spec.identity_id
        identity_dir.mkdir(parents=True, exist_ok=True)
        for domain, view in views:
            rng = derive_rng(config.seed, "render", index, domain.value, view)
            img, polygon = render_view(config, spec, domain, view, rng)
            rel_path = f"images/{spec.identity_id}/{domain.value}_{view}.png"
            Image.fromarray(img).save(out / rel_path)
            records.append(
                ImageRecord(
                    image_id=f"{spec.identity_id}_{domain.value}_{view}",
                    identity_id=spec.identity_id,
                    domain=domain,
                    view_index=view,
                    image_path=rel_path,
                    mask_polygon=polygon,
                    bbox=bbox_from_polygon(polygon),
                    material=spec.material,
                )
            )
    manifest = DatasetManifest(records=records)
    manifest.validate()
    save_manifest(manifest, out / MANIFEST_FILENAME)
    return manifest
