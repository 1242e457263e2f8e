"""Training pair construction: positives, balanced negatives, mined negatives.

The base training set pairs every checkpoint (probe) image with every BHS
(gallery) image of the same identity, plus an equal number of randomly
sampled cross-identity negatives. Hard-example mining then scores the full
probe x gallery cross product among a sample of identities with a trained
verifier and keeps the confident false positives as extra negatives until
the set reaches the target positive:negative ratio (default 1:2).
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .manifest import DatasetManifest, Domain
from .seeding import derive_rng


class PairLabel(str, Enum):
    POSITIVE = "POSITIVE"
    NEGATIVE = "NEGATIVE"


class PairSource(str, Enum):
    BASE = "BASE"
    MINED = "MINED"


class PairMode(str, Enum):
    CROSS_DOMAIN = "CROSS_DOMAIN"
    ALL = "ALL"


class PairError(ValueError):
    """Raised when a pair set cannot be constructed as requested."""


# scorer(probe_image_ids, gallery_image_ids) -> (len(probes), len(galleries))
# array of same-identity probabilities.
PairScorer = Callable[[Sequence[str], Sequence[str]], np.ndarray]


@dataclass(frozen=True)
class PairSample:
    probe_image_id: str
    gallery_image_id: str
    label: PairLabel
    source: PairSource = PairSource.BASE

    def key(self) -> tuple[str, str]:
        return (self.probe_image_id, self.gallery_image_id)

    def to_dict(self) -> dict:
        return {
            "probe": self.probe_image_id,
            "gallery": self.gallery_image_id,
            "label": self.label.value,
            "source": self.source.value,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PairSample":
        return cls(
            probe_image_id=data["probe"],
            gallery_image_id=data["gallery"],
            label=PairLabel(data["label"]),
            source=PairSource(data["source"]),
        )


@dataclass
class PairSet:
    samples: list[PairSample]
    provenance: dict = field(default_factory=dict)

    @property
    def n_positive(self) -> int:
        return sum(1 for s in self.samples if s.label is PairLabel.POSITIVE)

    @property
    def n_negative(self) -> int:
        return sum(1 for s in self.samples if s.label is PairLabel.NEGATIVE)

    @property
    def ratio(self) -> float:
        """Negatives per positive."""
        pos = self.n_positive
        return float(self.n_negative) / pos if pos else math.inf

    def keys(self) -> set[tuple[str, str]]:
        return {s.key() for s in self.samples}

    def validate(self, manifest: DatasetManifest | None = None) -> None:
        keys = [s.key() for s in self.samples]
        if len(keys) != len(set(keys)):
            raise PairError("duplicate (probe, gallery) entries in pair set")
        if manifest is not None:
            for s in self.samples:
                probe = manifest.record_for(s.probe_image_id)
                gallery = manifest.record_for(s.gallery_image_id)
                same = probe.identity_id == gallery.identity_id
                if same != (s.label is PairLabel.POSITIVE):
                    raise PairError(
                        f"pair {s.key()} label {s.label.value} inconsistent with identities"
                    )

    def extended(self, extra: list[PairSample]) -> "PairSet":
        merged = PairSet(samples=self.samples + extra, provenance=dict(self.provenance))
        merged.validate()
        return merged


def build_positive_pairs(
    train: DatasetManifest, mode: PairMode = PairMode.CROSS_DOMAIN
) -> list[PairSample]:
    """All same-identity pairs.

    CROSS_DOMAIN pairs every checkpoint image with every BHS image within an
    identity (matching the test-time probe/gallery roles); ALL pairs every
    unordered image combination within an identity.
    """
    pairs: list[PairSample] = []
    for identity_id in sorted(train.identities):
        image_ids = sorted(train.identities[identity_id])
        if mode is PairMode.CROSS_DOMAIN:
            probes = [i for i in image_ids if train.record_for(i).domain is Domain.CHECKPOINT]
            galleries = [i for i in image_ids if train.record_for(i).domain is Domain.BHS]
            for probe in probes:
                for gallery in galleries:
                    pairs.append(PairSample(probe, gallery, PairLabel.POSITIVE))
        else:
            for i, first in enumerate(image_ids):
                for second in image_ids[i + 1 :]:
                    pairs.append(PairSample(first, second, PairLabel.POSITIVE))
    return pairs


def _cross_identity_pool(
    train: DatasetManifest, mode: PairMode
) -> tuple[list[str], list[str], int]:
    """(probe ids, gallery ids, number of distinct cross-identity pairs)."""
    if mode is PairMode.CROSS_DOMAIN:
        probes = sorted(
            r.image_id for r in train.records if r.domain is Domain.CHECKPOINT
        )
        galleries = sorted(r.image_id for r in train.records if r.domain is Domain.BHS)
        total = len(probes) * len(galleries)
        for image_ids in train.identities.values():
            n_probe = sum(
                1 for i in image_ids if train.record_for(i).domain is Domain.CHECKPOINT
            )
            n_gallery = sum(
                1 for i in image_ids if train.record_for(i).domain is Domain.BHS
            )
            total -= n_probe * n_gallery
        return probes, galleries, total
    image_ids = sorted(r.image_id for r in train.records)
    total = len(image_ids) * (len(image_ids) - 1) // 2
    for ids in train.identities.values():
        total -= len(ids) * (len(ids) - 1) // 2
    return image_ids, image_ids, total


def sample_negative_pairs(
    train: DatasetManifest,
    count: int,
    exclude: PairSet | None = None,
    seed: int = 0,
    mode: PairMode = PairMode.CROSS_DOMAIN,
) -> list[PairSample]:
    """Exactly ``count`` unique cross-identity pairs, disjoint from ``exclude``."""
    if count < 0:
        raise PairError("count must be >= 0")
    if count == 0:
        return []
    probes, galleries, total = _cross_identity_pool(train, mode)
    excluded = exclude.keys() if exclude is not None else set()
    n_excluded_negatives = sum(
        1
        for probe, gallery in excluded
        if train.record_for(probe).identity_id != train.record_for(gallery).identity_id
    )
    available = total - n_excluded_negatives
    if count > available:
        raise PairError(
            f"requested {count} negative pairs but only {available} distinct "
            f"cross-identity pairs remain"
        )
    rng = derive_rng(seed, "negatives")
    chosen: list[PairSample] = []
    seen: set[tuple[str, str]] = set(excluded)

    if available <= max(10000, 4 * count):
        # Small pool: materialize, order deterministically, then draw exactly.
        pool = []
        for probe in probes:
            probe_identity = train.record_for(probe).identity_id
            for gallery in galleries:
                if mode is PairMode.ALL and probe >= gallery:
                    continue
                if train.record_for(gallery).identity_id == probe_identity:
                    continue
                if (probe, gallery) in excluded:
                    continue
                pool.append((probe, gallery))
        picks = rng.choice(len(pool), size=count, replace=False)
        for idx in sorted(int(i) for i in picks):
            probe, gallery = pool[idx]
            chosen.append(
                PairSample(probe, gallery, PairLabel.NEGATIVE, PairSource.BASE)
            )
        return chosen

    while len(chosen) < count:
        probe = probes[int(rng.integers(0, len(probes)))]
        gallery = galleries[int(rng.integers(0, len(galleries)))]
        if mode is PairMode.ALL:
            if probe == gallery:
                continue
            probe, gallery = min(probe, gallery), max(probe, gallery)
        if train.record_for(probe).identity_id == train.record_for(gallery).identity_id:
            continue
        if (probe, gallery) in seen:
            continue
        seen.add((probe, gallery))
        chosen.append(PairSample(probe, gallery, PairLabel.NEGATIVE, PairSource.BASE))
    return chosen


def mine_hard_negatives(
    scorer: PairScorer,
    train: DatasetManifest,
    n_identities: int = 300,
    threshold: float = 0.5,
    target_ratio: float = 2.0,
    seed: int = 0,
    base: PairSet | None = None,
) -> list[PairSample]:
    """Confident false-positive pairs among a random identity sample.

    Scores every cross-identity (checkpoint probe, BHS gallery) pair among
    ``n_identities`` sampled identities, keeps those with predicted
    same-identity probability above ``threshold`` ranked by probability
    descending (ties broken by (probe_id, gallery_id)), and truncates so the
    base set extended by the result reaches ``target_ratio`` negatives per
    positive.
    """
    identity_ids = sorted(train.identities)
    rng = derive_rng(seed, "mining")
    if n_identities < len(identity_ids):
        sampled = sorted(rng.choice(identity_ids, size=n_identities, replace=False).tolist())
    else:
        sampled = identity_ids

    probe_ids = sorted(
        r.image_id
        for r in train.records
        if r.domain is Domain.CHECKPOINT and r.identity_id in set(sampled)
    )
    gallery_ids = sorted(
        r.image_id
        for r in train.records
        if r.domain is Domain.BHS and r.identity_id in set(sampled)
    )
    if not probe_ids or not gallery_ids:
        return []

    scores = np.asarray(scorer(probe_ids, gallery_ids), dtype=np.float64)
    if scores.shape != (len(probe_ids), len(gallery_ids)):
        raise PairError(
            f"scorer returned shape {scores.shape}, expected "
            f"({len(probe_ids)}, {len(gallery_ids)})"
        )

    existing = base.keys() if base is not None else set()
    candidates: list[tuple[float, str, str]] = []
    for i, probe in enumerate(probe_ids):
        probe_identity = train.record_for(probe).identity_id
        for j, gallery in enumerate(gallery_ids):
            if train.record_for(gallery).identity_id == probe_identity:
                continue
            if (probe, gallery) in existing:
                continue
            p = float(scores[i, j])
            if p > threshold:
                candidates.append((p, probe, gallery))
    candidates.sort(key=lambda c: (-c[0], c[1], c[2]))

    if base is not None:
        needed = max(0, round(base.n_positive * target_ratio) - base.n_negative)
    else:
        needed = len(candidates)
    if not candidates:
        warnings.warn(
            f"hard-example mining found no pair above threshold {threshold}",
            stacklevel=2,
        )
        return []
    return [
        PairSample(probe, gallery, PairLabel.NEGATIVE, PairSource.MINED)
        for _, probe, gallery in candidates[:needed]
    ]


def save_pair_set(pair_set: PairSet, path: Path | str) -> None:
    path = Path(path)
    header = {
        "kind": "pair-set",
        "schema_version": "1",
        "provenance": pair_set.provenance,
    }
    with path.open("w", encoding="utf-8") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for sample in pair_set.samples:
            fh.write(json.dumps(sample.to_dict(), sort_keys=True) + "\n")


def load_pair_set(path: Path | str) -> PairSet:
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        lines = [line for line in fh.read().splitlines() if line.strip()]
    if not lines:
        raise PairError(f"{path}: empty pair file")
    header = json.loads(lines[0])
    if header.get("kind") != "pair-set":
        raise PairError(f"{path}: not a pair-set file (kind={header.get('kind')!r})")
    samples = [PairSample.from_dict(json.loads(line)) for line in lines[1:]]
    pair_set = PairSet(samples=samples, provenance=header.get("provenance", {}))
    pair_set.validate()
    return pair_set
