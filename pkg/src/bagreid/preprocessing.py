"""Image preparation: polygon masking, bbox cropping, resize and crop.

Training inputs follow the 256 -> random 224 crop recipe; evaluation uses a
center crop. Channel normalization uses the fixed constants below (the
standard convention for pretrained convolutional backbones), documented in
the README.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

CHANNEL_MEAN = (0.485, 0.456, 0.406)
CHANNEL_STD = (0.229, 0.224, 0.225)

BBox = tuple[int, int, int, int]


class PolygonError(ValueError):
    """Raised for degenerate or out-of-bounds polygons."""


class BBoxError(ValueError):
    """Raised for degenerate bounding boxes."""


@dataclass
class PreprocessConfig:
    use_mask: bool = True
    resize_to: int = 256
    crop_to: int = 224
    train_mode: bool = False

    def __post_init__(self) -> None:
        if self.crop_to > self.resize_to:
            raise ValueError(
                f"crop_to ({self.crop_to}) must not exceed resize_to ({self.resize_to})"
            )
        if self.crop_to < 1:
            raise ValueError("crop_to must be >= 1")

    def to_dict(self) -> dict:
        return {
            "use_mask": self.use_mask,
            "resize_to": self.resize_to,
            "crop_to": self.crop_to,
            "train_mode": self.train_mode,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PreprocessConfig":
        return cls(**data)


def bbox_from_polygon(polygon) -> BBox:
    """Axis-aligned minimum enclosing rectangle of the polygon vertices.

    Returns (x_min, y_min, x_max, y_max); corner coordinates are inclusive.
    """
    verts = np.asarray(polygon)
    if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
        raise PolygonError(f"polygon needs >= 3 (x, y) vertices, got shape {verts.shape}")
    x_min, y_min = verts.min(axis=0)
    x_max, y_max = verts.max(axis=0)
    if x_min == x_max or y_min == y_max:
        raise PolygonError("degenerate zero-area polygon")
    return (int(x_min), int(y_min), int(x_max), int(y_max))


def polygon_interior_mask(polygon, height: int, width: int) -> np.ndarray:
    """Boolean (height, width) mask of pixels whose centers lie inside the polygon.

    Scanline even-odd rule evaluated at pixel centers (x + 0.5, y + 0.5).
    """
    verts = np.asarray(polygon, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
        raise PolygonError(f"polygon needs >= 3 (x, y) vertices, got shape {verts.shape}")
    xs = np.arange(width, dtype=np.float64) + 0.5
    ys = np.arange(height, dtype=np.float64) + 0.5
    px, py = np.meshgrid(xs, ys)
    inside = np.zeros((height, width), dtype=bool)
    nxt = np.roll(verts, -1, axis=0)
    for (x1, y1), (x2, y2) in zip(verts, nxt):
        if y1 == y2:
            continue
        crosses = (y1 > py) != (y2 > py)
        x_at = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= crosses & (px < x_at)
    return inside


def apply_mask(image: np.ndarray, polygon) -> np.ndarray:
    """Zero every pixel whose center lies outside the polygon.

    Pixels inside are returned unchanged; the operation is idempotent.
    """
    img = np.asarray(image)
    if img.ndim != 3:
        raise ValueError(f"expected (H, W, C) image, got shape {img.shape}")
    height, width = img.shape[:2]
    verts = np.asarray(polygon, dtype=np.float64)
    if verts.ndim != 2 or verts.shape[1] != 2 or verts.shape[0] < 3:
        raise PolygonError(f"polygon needs >= 3 (x, y) vertices, got shape {verts.shape}")
    if (
        verts[:, 0].min() < 0
        or verts[:, 0].max() > width
        or verts[:, 1].min() < 0
        or verts[:, 1].max() > height
    ):
        raise PolygonError("polygon extends outside image bounds")
    inside = polygon_interior_mask(verts, height, width)
    out = img.copy()
    out[~inside] = 0
    return out


def _crop_offset(
    resize_to: int, crop_to: int, train_mode: bool, rng: np.random.Generator | None
) -> tuple[int, int]:
    """Top-left offset of the crop window inside the resized image.

    Uniform over {0 .. resize_to - crop_to} per axis in train mode, centered
    otherwise.
    """
    span = resize_to - crop_to
    if span == 0:
        return (0, 0)
    if not train_mode:
        return (span // 2, span // 2)
    if rng is None:
        raise ValueError("train_mode crop requires an rng")
    return (int(rng.integers(0, span + 1)), int(rng.integers(0, span + 1)))


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) float image to (size, size, C)."""
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32))
    t = t.permute(2, 0, 1).unsqueeze(0)
    t = torch.nn.functional.interpolate(
        t, size=(size, size), mode="bilinear", align_corners=False
    )
    return t.squeeze(0).permute(1, 2, 0).numpy()


def prepare_base(image: np.ndarray, bbox: BBox, config: PreprocessConfig) -> np.ndarray:
    """Crop the bbox region and resize it to a (resize_to, resize_to, 3) float image.

    Accepts uint8 (0..255) or float (0..1) input; this is the cacheable part
    of the pipeline, shared by every crop window drawn from the same image.
    """
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) image, got shape {img.shape}")
    x0, y0, x1, y1 = bbox
    if x1 <= x0 or y1 <= y0:
        raise BBoxError(f"degenerate bbox {bbox}")
    height, width = img.shape[:2]
    x0c, y0c = max(0, int(x0)), max(0, int(y0))
    x1c, y1c = min(width - 1, int(x1)), min(height - 1, int(y1))
    if x1c <= x0c or y1c <= y0c:
        raise BBoxError(f"bbox {bbox} lies outside the image")
    region = img[y0c : y1c + 1, x0c : x1c + 1]
    if region.dtype == np.uint8:
        region = region.astype(np.float32) / 255.0
    else:
        region = region.astype(np.float32)
    return resize_bilinear(region, config.resize_to)


def standardize_window(
    resized: np.ndarray, config: PreprocessConfig, rng: np.random.Generator | None = None
) -> np.ndarray:
    """Take a crop_to window from a resized image and normalize channels."""
    ox, oy = _crop_offset(config.resize_to, config.crop_to, config.train_mode, rng)
    window = resized[oy : oy + config.crop_to, ox : ox + config.crop_to]
    mean = np.asarray(CHANNEL_MEAN, dtype=np.float32)
    std = np.asarray(CHANNEL_STD, dtype=np.float32)
    return (window - mean) / std


def crop_and_standardize(
    image: np.ndarray,
    bbox: BBox,
    config: PreprocessConfig,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Crop the bbox region, resize, crop a window, and normalize channels.

    Returns a float32 (crop_to, crop_to, 3) array normalized per channel with
    CHANNEL_MEAN and CHANNEL_STD; the window offset is uniformly random in
    train mode and centered otherwise.
    """
    return standardize_window(prepare_base(image, bbox, config), config, rng)
