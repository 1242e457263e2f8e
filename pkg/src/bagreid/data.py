"""Image loading and batching for training and scoring.

An ImageBank caches the deterministic part of preprocessing (mask, bbox
crop, resize) per image and draws normalized crop windows on demand. Loads
are lazy, so a bank over a large manifest only touches the images a run
actually uses. Banks are read-only after construction and safe to share
across scoring workers.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .manifest import DatasetManifest, ImageRecord
from .preprocessing import PreprocessConfig, apply_mask, prepare_base, standardize_window


class DataError(ValueError):
    """Raised when referenced image data cannot be loaded."""


def load_image(path: Path | str) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"image file not found: {path}")
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


class ImageBank:
    def __init__(
        self,
        manifest: DatasetManifest,
        dataset_root: Path | str,
        config: PreprocessConfig,
    ):
        self.manifest = manifest
        self.root = Path(dataset_root)
        self.config = config
        self._cache: dict[str, np.ndarray] = {}

    def base(self, image_id: str) -> np.ndarray:
        """Masked, cropped, resized float image for one record (cached)."""
        cached = self._cache.get(image_id)
        if cached is None:
            record = self.manifest.record_for(image_id)
            cached = self._prepare(record)
            self._cache[image_id] = cached
        return cached

    def _prepare(self, record: ImageRecord) -> np.ndarray:
        image = load_image(self.root / record.image_path)
        if self.config.use_mask:
            image = apply_mask(image, record.mask_polygon)
        return prepare_base(image, record.bbox, self.config)

    def batch(
        self, image_ids: list[str], rng: np.random.Generator | None = None
    ) -> np.ndarray:
        """Stack of normalized crop windows, one per image id.

        In train mode each window gets an independent random offset from
        ``rng``; otherwise windows are center crops.
        """
        return np.stack(
            [standardize_window(self.base(i), self.config, rng) for i in image_ids]
        )
