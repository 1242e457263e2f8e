"""Training pipeline: base-set training, hard-example mining, ablation grid.

``train`` drives the shared SGD loop in the estimators with pair batches
drawn from an image bank. With mining enabled it runs two phases: a few
epochs on the balanced base set, one mining pass adding confident false
positives as extra negatives (target positive:negative ratio 1:2), then the
remaining iterations on the augmented set.

Desk-scale defaults (2000 iterations, 32 pairs per batch, quarter-width
backbone) are deliberate; the full-scale recipe (50k iterations, 128 pairs
per batch, full-width backbone) remains selectable through the same config.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import ImageBank
from .estimators import _SiameseVerifier, estimator_for_variant
from .manifest import DatasetManifest
from .metrics import CMCReport, evaluate
from .nets import NetworkConfig
from .pairs import (
    PairLabel,
    PairMode,
    PairSample,
    PairSet,
    build_positive_pairs,
    mine_hard_negatives,
    sample_negative_pairs,
)
from .preprocessing import PreprocessConfig


class TrainError(RuntimeError):
    """Raised when training cannot proceed."""


@dataclass
class MiningConfig:
    enabled: bool = False
    base_epochs: int = 2
    n_identities: int = 300
    threshold: float = 0.5
    target_ratio: float = 2.0

    def to_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "base_epochs": self.base_epochs,
            "n_identities": self.n_identities,
            "threshold": self.threshold,
            "target_ratio": self.target_ratio,
        }


@dataclass
class TrainConfig:
    iterations: int = 2000
    batch_pairs: int = 32
    learning_rate: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_step_fractions: tuple[float, float] = (0.6, 0.85)
    mining: MiningConfig = field(default_factory=MiningConfig)
    seed: int = 0
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    pair_mode: PairMode = PairMode.CROSS_DOMAIN

    def __post_init__(self) -> None:
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.batch_pairs < 2:
            raise ValueError("batch_pairs must be >= 2")

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "batch_pairs": self.batch_pairs,
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "weight_decay": self.weight_decay,
            "lr_step_fractions": list(self.lr_step_fractions),
            "mining": self.mining.to_dict(),
            "seed": self.seed,
            "preprocess": self.preprocess.to_dict(),
            "pair_mode": self.pair_mode.value,
        }


@dataclass
class TrainResult:
    estimator: _SiameseVerifier
    pair_set: PairSet
    log: list[dict]


def _make_estimator(net_config: NetworkConfig, config: TrainConfig) -> _SiameseVerifier:
    return estimator_for_variant(
        net_config.variant,
        use_se=net_config.use_se,
        se_reduction=net_config.se_reduction,
        backbone_scale=net_config.backbone_scale,
        freeze_stages=net_config.freeze_stages,
        bn_stages=net_config.bn_stages,
        head_widths=net_config.head_widths,
        embed_dim=net_config.embed_dim,
        merge_before_pool=net_config.merge_before_pool,
        contrastive_margin=net_config.contrastive_margin,
        iterations=config.iterations,
        batch_pairs=config.batch_pairs,
        learning_rate=config.learning_rate,
        momentum=config.momentum,
        weight_decay=config.weight_decay,
        lr_step_fractions=config.lr_step_fractions,
        seed=config.seed,
    )


def _pair_batcher(bank: ImageBank, samples: list[PairSample], batch_pairs: int):
    labels = np.array(
        [1 if s.label is PairLabel.POSITIVE else 0 for s in samples], dtype=np.int64
    )

    def next_batch(rng: np.random.Generator):
        idx = rng.integers(0, len(samples), size=min(batch_pairs, len(samples)))
        probes = bank.batch([samples[i].probe_image_id for i in idx], rng)
        galleries = bank.batch([samples[i].gallery_image_id for i in idx], rng)
        return np.stack([probes, galleries], axis=1), labels[idx]

    return next_batch


def build_base_pair_set(
    manifest: DatasetManifest, mode: PairMode, seed: int
) -> PairSet:
    """All positive pairs plus an equal number of random negatives (1:1)."""
    positives = build_positive_pairs(manifest, mode)
    if not positives:
        raise TrainError("manifest yields no positive pairs")
    base = PairSet(samples=list(positives))
    negatives = sample_negative_pairs(
        manifest, count=len(positives), exclude=base, seed=seed, mode=mode
    )
    return PairSet(
        samples=positives + negatives,
        provenance={"mode": mode.value, "seed": seed},
    )


def train(
    net_config: NetworkConfig,
    train_manifest: DatasetManifest,
    config: TrainConfig,
    dataset_root: Path | str,
) -> TrainResult:
    """Train a verifier; with mining enabled runs the two-phase schedule."""
    estimator = _make_estimator(net_config, config)
    estimator.initialize(config.preprocess.crop_to)

    train_bank = ImageBank(
        train_manifest, dataset_root, replace(config.preprocess, train_mode=True)
    )
    base = build_base_pair_set(train_manifest, config.pair_mode, config.seed)
    pair_set = base

    if config.mining.enabled:
        phase1 = min(
            config.iterations,
            math.ceil(config.mining.base_epochs * len(base.samples) / config.batch_pairs),
        )
        estimator.train_steps(
            _pair_batcher(train_bank, base.samples, config.batch_pairs), phase1, "base"
        )
        eval_bank = ImageBank(
            train_manifest, dataset_root, replace(config.preprocess, train_mode=False)
        )

        def scorer(probe_ids, gallery_ids):
            return estimator.same_probability_matrix(
                eval_bank.batch(probe_ids), eval_bank.batch(gallery_ids)
            )

        mined = mine_hard_negatives(
            scorer,
            train_manifest,
            n_identities=min(config.mining.n_identities, len(train_manifest.identities)),
            threshold=config.mining.threshold,
            target_ratio=config.mining.target_ratio,
            seed=config.seed,
            base=base,
        )
        pair_set = base.extended(mined)
        remaining = config.iterations - phase1
        if remaining > 0:
            estimator.train_steps(
                _pair_batcher(train_bank, pair_set.samples, config.batch_pairs),
                remaining,
                "augmented",
            )
    else:
        estimator.train_steps(
            _pair_batcher(train_bank, base.samples, config.batch_pairs),
            config.iterations,
            "base",
        )
    return TrainResult(estimator=estimator, pair_set=pair_set, log=estimator.log_)


def write_training_log(log: list[dict], path: Path | str) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for record in log:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Ablation harness


@dataclass(frozen=True)
class AblationCell:
    merged: bool
    ats: bool
    se: bool
    mask: bool

    def label(self) -> str:
        flags = [
            "merged" if self.merged else "basic",
            "ats" if self.ats else "",
            "se" if self.se else "",
            "mask" if self.mask else "",
        ]
        return "+".join(f for f in flags if f)

    def to_dict(self) -> dict:
        return {"merged": self.merged, "ats": self.ats, "se": self.se, "mask": self.mask}


def default_ablation_grid() -> list[AblationCell]:
    """The ten-configuration grid over merged/ATS/SE/mask switches."""
    rows = [
        (False, False, False, False),
        (False, True, False, False),
        (False, False, False, True),
        (False, True, False, True),
        (True, False, False, False),
        (True, True, False, False),
        (True, False, False, True),
        (True, True, False, True),
        (True, True, True, False),
        (True, True, True, True),
    ]
    return [AblationCell(*row) for row in rows]


@dataclass
class AblationRow:
    cell: AblationCell
    report: CMCReport | None = None
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "cell": self.cell.to_dict(),
            "report": self.report.to_dict() if self.report else None,
            "error": self.error,
        }


@dataclass
class AblationReport:
    rows: list[AblationRow]
    ranks: tuple[int, ...] = (1, 2, 3)

    def render_table(self) -> str:
        header = ["Merged", "ATS", "SE", "Mask"] + [f"Rank{r}(%)" for r in self.ranks]
        lines = ["  ".join(f"{h:>8}" for h in header)]
        for row in self.rows:
            cell = row.cell
            marks = ["x" if v else "-" for v in (cell.merged, cell.ats, cell.se, cell.mask)]
            if row.report is not None:
                values = [f"{100 * row.report.value_at(r):.2f}" for r in self.ranks]
            else:
                values = ["ERROR"] * len(self.ranks)
            lines.append("  ".join(f"{v:>8}" for v in (*marks, *values)))
        return "\n".join(lines)

    def to_dict(self) -> dict:
        return {"ranks": list(self.ranks), "rows": [r.to_dict() for r in self.rows]}

    def save(self, path: Path | str) -> None:
        with Path(path).open("w", encoding="utf-8") as fh:
            json.dump({"kind": "ablation-report", **self.to_dict()}, fh, indent=2, sort_keys=True)
            fh.write("\n")


def run_ablation(
    grid: list[AblationCell],
    base_net_config: NetworkConfig,
    config: TrainConfig,
    train_manifest: DatasetManifest,
    test_manifest: DatasetManifest,
    dataset_root: Path | str,
    ranks: tuple[int, ...] = (1, 2, 3),
) -> AblationReport:
    """Train and evaluate every grid configuration; row failures are recorded
    and the harness continues."""
    if not grid:
        raise TrainError("ablation grid must not be empty")
    rows = []
    for cell in grid:
        # Unshared batch normalization is part of the merged design; the basic
        # baseline is the plain fully-shared backbone.
        net_config = replace(
            base_net_config,
            variant="merged" if cell.merged else "basic",
            use_se=cell.se,
            bn_stages=base_net_config.bn_stages if cell.merged else (),
        )
        cell_config = replace(
            config,
            mining=replace(config.mining, enabled=cell.ats),
            preprocess=replace(config.preprocess, use_mask=cell.mask),
        )
        try:
            result = train(net_config, train_manifest, cell_config, dataset_root)
            report, _ = evaluate(
                result.estimator,
                test_manifest,
                dataset_root,
                preprocess=replace(cell_config.preprocess, train_mode=False),
                ranks=ranks,
            )
            rows.append(AblationRow(cell=cell, report=report))
        except Exception as exc:  # row failure must not kill the harness
            rows.append(AblationRow(cell=cell, error=f"{type(exc).__name__}: {exc}"))
    return AblationReport(rows=rows, ranks=ranks)
