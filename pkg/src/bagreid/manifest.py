"""Dataset schema: identities, images, masks, domains, views, materials.

A dataset lives in a root directory with a line-delimited manifest file
(`manifest.jsonl`) next to an `images/` tree. The first line of the manifest
is a header object carrying the schema version and optional split tag; every
following line is one image record. The format is documented field by field
in the README.
"""

from __future__ import annotations

import json
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image

from .preprocessing import bbox_from_polygon
from .seeding import derive_rng

SCHEMA_VERSION = "1"
MANIFEST_FILENAME = "manifest.jsonl"


class Domain(str, Enum):
    BHS = "BHS"
    CHECKPOINT = "CHECKPOINT"


class Material(str, Enum):
    HARD = "HARD"
    SOFT = "SOFT"
    PAPERBOARD = "PAPERBOARD"
    OTHERS = "OTHERS"


class SplitTag(str, Enum):
    TRAIN = "TRAIN"
    TEST = "TEST"


VIEW_RANGE = {Domain.BHS: (1, 3), Domain.CHECKPOINT: (1, 4)}


class ManifestError(ValueError):
    """Raised when a manifest fails to parse or violates an invariant."""


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    identity_id: str
    domain: Domain
    view_index: int
    image_path: str
    mask_polygon: tuple[tuple[int, int], ...]
    bbox: tuple[int, int, int, int]
    material: Material

    def validate(self) -> None:
        lo, hi = VIEW_RANGE[self.domain]
        if not lo <= self.view_index <= hi:
            raise ManifestError(
                f"record {self.image_id}: view_index {self.view_index} outside "
                f"{lo}..{hi} for domain {self.domain.value}"
            )
        if len(self.mask_polygon) < 3:
            raise ManifestError(f"record {self.image_id}: mask polygon has < 3 vertices")
        if any(x < 0 or y < 0 for x, y in self.mask_polygon):
            raise ManifestError(f"record {self.image_id}: negative polygon coordinates")
        x0, y0, x1, y1 = self.bbox
        if not (x0 < x1 and y0 < y1):
            raise ManifestError(f"record {self.image_id}: degenerate bbox {self.bbox}")
        if bbox_from_polygon(self.mask_polygon) != self.bbox:
            raise ManifestError(
                f"record {self.image_id}: bbox {self.bbox} is not the minimum "
                f"enclosing rectangle of the mask polygon"
            )

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "identity_id": self.identity_id,
            "domain": self.domain.value,
            "view_index": self.view_index,
            "image_path": self.image_path,
            "mask_polygon": [[int(x), int(y)] for x, y in self.mask_polygon],
            "bbox": list(self.bbox),
            "material": self.material.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ImageRecord":
        return cls(
            image_id=data["image_id"],
            identity_id=data["identity_id"],
            domain=Domain(data["domain"]),
            view_index=int(data["view_index"]),
            image_path=data["image_path"],
            mask_polygon=tuple((int(x), int(y)) for x, y in data["mask_polygon"]),
            bbox=tuple(int(v) for v in data["bbox"]),
            material=Material(data["material"]),
        )


@dataclass
class DatasetManifest:
    records: list[ImageRecord]
    split_tag: SplitTag | None = None
    schema_version: str = SCHEMA_VERSION
    _identities: dict[str, list[str]] | None = field(
        default=None, repr=False, compare=False
    )

    @property
    def identities(self) -> dict[str, list[str]]:
        """identity_id -> image_id list, derived from records (always consistent)."""
        if self._identities is None:
            mapping: dict[str, list[str]] = defaultdict(list)
            for rec in self.records:
                mapping[rec.identity_id].append(rec.image_id)
            self._identities = dict(mapping)
        return self._identities

    def record_for(self, image_id: str) -> ImageRecord:
        return self._by_image_id()[image_id]

    def _by_image_id(self) -> dict[str, ImageRecord]:
        if not hasattr(self, "_index"):
            self._index = {rec.image_id: rec for rec in self.records}
        return self._index

    def records_by_domain(self, domain: Domain) -> list[ImageRecord]:
        return [rec for rec in self.records if rec.domain == domain]

    def validate(self) -> None:
        """Raise ManifestError on the first invariant violation."""
        seen: set[str] = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise ManifestError(f"duplicate image_id {rec.image_id}")
            seen.add(rec.image_id)
            rec.validate()
        for identity_id, image_ids in self.identities.items():
            domains = {self.record_for(i).domain for i in image_ids}
            if Domain.BHS not in domains:
                raise ManifestError(
                    f"identity {identity_id} has no BHS image; every identity must "
                    f"appear in both capture stages"
                )
            if Domain.CHECKPOINT not in domains:
                raise ManifestError(
                    f"identity {identity_id} has no CHECKPOINT image; every identity "
                    f"must appear in both capture stages"
                )


@dataclass
class ValidationReport:
    checks: list[tuple[str, bool, list[str]]]
    n_identities: int
    images_per_domain: dict[str, int]
    avg_views_per_identity: dict[str, float]
    missing_files: list[str]

    @property
    def ok(self) -> bool:
        return all(passed for _, passed, _ in self.checks)

    def render(self) -> str:
        lines = []
        for name, passed, offenders in self.checks:
            status = "PASS" if passed else "FAIL"
            suffix = f" (first offenders: {offenders[:5]})" if offenders else ""
            lines.append(f"[{status}] {name}{suffix}")
        lines.append(f"identities: {self.n_identities}")
        for domain in (Domain.BHS, Domain.CHECKPOINT):
            lines.append(
                f"{domain.value}: images={self.images_per_domain[domain.value]} "
                f"avg_views_per_identity={self.avg_views_per_identity[domain.value]:.2f}"
            )
        if self.missing_files:
            lines.append(f"missing image files: {len(self.missing_files)}")
        return "\n".join(lines)


def validate_manifest(
    manifest: DatasetManifest, dataset_root: Path | str | None = None
) -> ValidationReport:
    """Non-raising validation: per-invariant pass/fail plus summary statistics."""
    checks: list[tuple[str, bool, list[str]]] = []

    counts: dict[str, int] = defaultdict(int)
    duplicates = [i for i, c in _count(r.image_id for r in manifest.records).items() if c > 1]
    checks.append(("unique image ids", not duplicates, sorted(duplicates)))

    bad_records: list[str] = []
    for rec in manifest.records:
        try:
            rec.validate()
        except (ManifestError, ValueError):
            bad_records.append(rec.image_id)
        counts[rec.domain.value] += 1
    checks.append(("record fields valid (bbox, view range, polygon)", not bad_records, bad_records))

    one_sided: list[str] = []
    per_domain_views: dict[str, list[int]] = {d.value: [] for d in Domain}
    for identity_id, image_ids in sorted(manifest.identities.items()):
        domains = defaultdict(int)
        for image_id in image_ids:
            domains[manifest.record_for(image_id).domain.value] += 1
        if not (domains[Domain.BHS.value] and domains[Domain.CHECKPOINT.value]):
            one_sided.append(identity_id)
        for d in Domain:
            per_domain_views[d.value].append(domains[d.value])
    checks.append(("every identity present in both domains", not one_sided, one_sided))

    missing_files: list[str] = []
    in_bounds_failures: list[str] = []
    if dataset_root is not None:
        root = Path(dataset_root)
        for rec in manifest.records:
            path = root / rec.image_path
            if not path.exists():
                missing_files.append(rec.image_path)
                continue
            with Image.open(path) as img:
                width, height = img.size
            if any(x >= width or y >= height for x, y in rec.mask_polygon):
                in_bounds_failures.append(rec.image_id)
        checks.append(
            ("polygon vertices inside image bounds", not in_bounds_failures, in_bounds_failures)
        )

    n_identities = len(manifest.identities)
    avg_views = {
        d.value: (float(np.mean(per_domain_views[d.value])) if n_identities else 0.0)
        for d in Domain
    }
    return ValidationReport(
        checks=checks,
        n_identities=n_identities,
        images_per_domain={d.value: counts[d.value] for d in Domain},
        avg_views_per_identity=avg_views,
        missing_files=missing_files,
    )


def _count(items) -> dict:
    out: dict = defaultdict(int)
    for item in items:
        out[item] += 1
    return out


def save_manifest(manifest: DatasetManifest, path: Path | str) -> None:
    path = Path(path)
    header = {
        "kind": "dataset-manifest",
        "schema_version": manifest.schema_version,
        "split_tag": manifest.split_tag.value if manifest.split_tag else None,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for rec in manifest.records:
            fh.write(json.dumps(rec.to_dict(), sort_keys=True) + "\n")


def load_manifest(path: Path | str, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest file.

    Image paths are resolved against the manifest's directory; missing image
    files are reported as a single warning, not an error.
    """
    path = Path(path)
    if not path.exists():
        raise ManifestError(f"manifest file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise ManifestError(f"{path}: empty manifest file")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: header is not valid JSON: {exc}") from exc
    if header.get("kind") != "dataset-manifest":
        raise ManifestError(f"{path}: not a dataset manifest (kind={header.get('kind')!r})")
    version = header.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ManifestError(
            f"{path}: unsupported schema_version {version!r} (expected {SCHEMA_VERSION})"
        )
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            records.append(ImageRecord.from_dict(json.loads(line)))
        except (json.JSONDecodeError, KeyError, ValueError) as exc:
            raise ManifestError(f"{path}:{lineno}: bad record: {exc}") from exc
    split_tag = SplitTag(header["split_tag"]) if header.get("split_tag") else None
    manifest = DatasetManifest(records=records, split_tag=split_tag, schema_version=version)
    manifest.validate()
    if check_files:
        root = path.parent
        missing = [r.image_path for r in records if not (root / r.image_path).exists()]
        if missing:
            warnings.warn(
                f"{len(missing)} image file(s) referenced by {path} are missing "
                f"(first: {missing[:3]})",
                stacklevel=2,
            )
    return manifest


def split_train_test(
    manifest: DatasetManifest, n_test: int, seed: int
) -> tuple[DatasetManifest, DatasetManifest]:
    """Identity-disjoint random split reserving exactly ``n_test`` identities for test."""
    identity_ids = sorted(manifest.identities)
    if n_test >= len(identity_ids):
        raise ManifestError(
            f"n_test ({n_test}) must be smaller than the identity count ({len(identity_ids)})"
        )
    rng = derive_rng(seed, "split")
    test_ids = set(rng.choice(identity_ids, size=n_test, replace=False).tolist())
    train_records = [r for r in manifest.records if r.identity_id not in test_ids]
    test_records = [r for r in manifest.records if r.identity_id in test_ids]
    return (
        DatasetManifest(records=train_records, split_tag=SplitTag.TRAIN),
        DatasetManifest(records=test_records, split_tag=SplitTag.TEST),
    )
