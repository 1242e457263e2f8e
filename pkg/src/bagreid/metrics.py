"""Evaluation protocol: score tables, identity aggregation, ranking, CMC.

Every checkpoint probe is scored against every BHS gallery image. Scores
for the images of one gallery identity are collapsed to a single identity
score — by default the mean of the two best (smallest distances or largest
probabilities; a lone score stands for itself) — identities are sorted
best-first with lexicographic identity-id tie-breaks, and CMC@k is the
fraction of probes whose true identity lands in the top k.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import ImageBank
from .manifest import DatasetManifest, Domain
from .preprocessing import PreprocessConfig


class ScoreKind:
    DISTANCE = "distance"  # lower is better
    PROBABILITY = "probability"  # higher is better


_KINDS = (ScoreKind.DISTANCE, ScoreKind.PROBABILITY)


class EvaluationError(ValueError):
    """Raised when the evaluation protocol preconditions fail."""


@dataclass
class ScoreTable:
    probe_id: str
    entries: list[tuple[str, float]]  # (gallery_image_id, score)
    kind: str

    def __post_init__(self) -> None:
        if self.kind not in _KINDS:
            raise EvaluationError(f"unknown score kind {self.kind!r}")
        if not all(np.isfinite(s) for _, s in self.entries):
            raise EvaluationError(f"non-finite score for probe {self.probe_id}")

    def to_dict(self) -> dict:
        return {
            "probe_id": self.probe_id,
            "kind": self.kind,
            "entries": [[g, float(s)] for g, s in self.entries],
        }


@dataclass
class CMCReport:
    ranks_evaluated: list[int]
    cmc_values: list[float]
    n_probes: int
    n_gallery_identities: int
    probe_gt_ranks: list[int] = field(default_factory=list)

    def __post_init__(self) -> None:
        if any(b < a for a, b in zip(self.cmc_values, self.cmc_values[1:])):
            raise EvaluationError("CMC values must be non-decreasing in rank")
        if any(not 0.0 <= v <= 1.0 for v in self.cmc_values):
            raise EvaluationError("CMC values must lie in [0, 1]")

    def value_at(self, rank: int) -> float:
        return self.cmc_values[self.ranks_evaluated.index(rank)]

    def to_dict(self) -> dict:
        return {
            "ranks_evaluated": self.ranks_evaluated,
            "cmc_values": self.cmc_values,
            "n_probes": self.n_probes,
            "n_gallery_identities": self.n_gallery_identities,
            "probe_gt_ranks": self.probe_gt_ranks,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CMCReport":
        return cls(
            ranks_evaluated=list(data["ranks_evaluated"]),
            cmc_values=list(data["cmc_values"]),
            n_probes=int(data["n_probes"]),
            n_gallery_identities=int(data["n_gallery_identities"]),
            probe_gt_ranks=list(data.get("probe_gt_ranks", [])),
        )

    def render(self) -> str:
        cells = "  ".join(
            f"Rank{r}={100 * v:.2f}%" for r, v in zip(self.ranks_evaluated, self.cmc_values)
        )
        return (
            f"{cells}  (probes={self.n_probes}, "
            f"gallery identities={self.n_gallery_identities})"
        )


def aggregate_identity(scores, kind: str) -> float:
    """Identity score from per-image scores: mean of the two best.

    Best means smallest for distances, largest for probabilities; an identity
    with a single gallery image keeps that score unchanged.
    """
    values = [float(s) for s in scores]
    if not values:
        raise EvaluationError("cannot aggregate an empty score list")
    if kind not in _KINDS:
        raise EvaluationError(f"unknown score kind {kind!r}")
    if len(values) == 1:
        return values[0]
    ordered = sorted(values, reverse=(kind == ScoreKind.PROBABILITY))
    return (ordered[0] + ordered[1]) / 2.0


def rank_identities(identity_scores: dict[str, float], kind: str) -> list[str]:
    """Identity ids ordered best-first; equal scores break by identity id."""
    if not identity_scores:
        raise EvaluationError("cannot rank an empty identity score mapping")
    if kind not in _KINDS:
        raise EvaluationError(f"unknown score kind {kind!r}")
    reverse = kind == ScoreKind.PROBABILITY
    return sorted(
        identity_scores,
        key=lambda i: (-identity_scores[i] if reverse else identity_scores[i], i),
    )


def cmc(
    per_probe_rankings: list[list[str]],
    ground_truth: list[str],
    ranks: tuple[int, ...] = (1, 2, 3),
) -> CMCReport:
    """CMC@k = fraction of probes whose true identity appears at position <= k."""
    if len(per_probe_rankings) != len(ground_truth):
        raise EvaluationError("one ground-truth identity is required per probe")
    gt_ranks = []
    gallery_sizes = set()
    for ranking, truth in zip(per_probe_rankings, ground_truth):
        gallery_sizes.add(len(ranking))
        try:
            gt_ranks.append(ranking.index(truth) + 1)
        except ValueError as exc:
            raise EvaluationError(
                f"ground-truth identity {truth!r} missing from its ranking"
            ) from exc
    n = len(gt_ranks)
    values = [sum(1 for r in gt_ranks if r <= k) / n for k in ranks]
    return CMCReport(
        ranks_evaluated=list(ranks),
        cmc_values=values,
        n_probes=n,
        n_gallery_identities=max(gallery_sizes) if gallery_sizes else 0,
        probe_gt_ranks=gt_ranks,
    )


def evaluate(
    model,
    test_manifest: DatasetManifest,
    dataset_root: Path | str,
    preprocess: PreprocessConfig | None = None,
    ranks: tuple[int, ...] = (1, 2, 3),
    aggregator=aggregate_identity,
) -> tuple[CMCReport, list[ScoreTable]]:
    """Score every checkpoint probe against the full BHS gallery and rank.

    ``model`` must provide ``score_kind`` and
    ``score_matrix(probe_images, gallery_images)``. Gallery images are
    grouped by the manifest's identity labels. The aggregator is a strategy
    point; the default implements the mean-of-two-best rule.
    """
    probes = test_manifest.records_by_domain(Domain.CHECKPOINT)
    galleries = test_manifest.records_by_domain(Domain.BHS)
    if not probes or not galleries:
        raise EvaluationError("evaluation needs at least one probe and one gallery image")
    gallery_identities = {r.identity_id for r in galleries}
    for probe in probes:
        if probe.identity_id not in gallery_identities:
            raise EvaluationError(
                f"probe {probe.image_id} has no gallery image for identity "
                f"{probe.identity_id}; it cannot be identified"
            )

    if preprocess is None:
        preprocess = PreprocessConfig(train_mode=False)
    bank = ImageBank(test_manifest, dataset_root, preprocess)
    probe_ids = sorted(r.image_id for r in probes)
    gallery_ids = sorted(r.image_id for r in galleries)
    scores = np.asarray(
        model.score_matrix(bank.batch(probe_ids), bank.batch(gallery_ids)),
        dtype=np.float64,
    )
    kind = model.score_kind

    tables = []
    rankings = []
    truths = []
    for i, probe_id in enumerate(probe_ids):
        entries = list(zip(gallery_ids, scores[i].tolist()))
        tables.append(ScoreTable(probe_id=probe_id, entries=entries, kind=kind))
        by_identity: dict[str, list[float]] = {}
        for gallery_id, score in entries:
            identity = test_manifest.record_for(gallery_id).identity_id
            by_identity.setdefault(identity, []).append(score)
        identity_scores = {
            identity: aggregator(values, kind) for identity, values in by_identity.items()
        }
        rankings.append(rank_identities(identity_scores, kind))
        truths.append(test_manifest.record_for(probe_id).identity_id)
    return cmc(rankings, truths, ranks), tables


def save_score_tables(tables: list[ScoreTable], path: Path | str) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        fh.write(json.dumps({"kind": "score-tables", "schema_version": "1"}) + "\n")
        for table in tables:
            fh.write(json.dumps(table.to_dict(), sort_keys=True) + "\n")


def save_cmc_report(report: CMCReport, path: Path | str) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        json.dump({"kind": "cmc-report", **report.to_dict()}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_cmc_report(path: Path | str) -> CMCReport:
    with Path(path).open("r", encoding="utf-8") as fh:
        return CMCReport.from_dict(json.load(fh))


def plot_cmc(report: CMCReport, path: Path | str) -> None:
    """Write a CMC curve image (headless backend)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(report.ranks_evaluated, [100 * v for v in report.cmc_values], marker="o")
    ax.set_xlabel("rank")
    ax.set_ylabel("matching rate (%)")
    ax.set_title("Cumulated matching characteristics")
    ax.set_xticks(report.ranks_evaluated)
    ax.set_ylim(0, 100)
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
