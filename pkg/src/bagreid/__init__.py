"""bagreid: cross-domain baggage re-identification pipeline.

Synthetic multi-view dataset generation, masked-input preprocessing, Siamese
verification models (basic metric and merged classification variants) with
hard-example mining, and CMC evaluation with identity-level aggregation.
"""

__version__ = "0.1.0"

from .estimators import (
    BasicSiameseVerifier,
    MergedSiameseVerifier,
    TrainingDiverged,
    load_verifier,
)
from .manifest import (
    DatasetManifest,
    Domain,
    ImageRecord,
    Material,
    SplitTag,
    load_manifest,
    save_manifest,
    split_train_test,
    validate_manifest,
)
from .metrics import (
    CMCReport,
    ScoreKind,
    ScoreTable,
    aggregate_identity,
    cmc,
    evaluate,
    rank_identities,
)
from .nets import NetworkConfig, contrastive_loss, cross_entropy_loss
from .pairs import (
    PairLabel,
    PairMode,
    PairSample,
    PairSet,
    PairSource,
    build_positive_pairs,
    mine_hard_negatives,
    sample_negative_pairs,
)
from .preprocessing import (
    PreprocessConfig,
    apply_mask,
    bbox_from_polygon,
    crop_and_standardize,
)
from .synth import DomainNoise, SynthConfig, generate_dataset, identity_spec, render_view
from .train import (
    MiningConfig,
    TrainConfig,
    TrainResult,
    default_ablation_grid,
    run_ablation,
    train,
)

__all__ = [
    "BasicSiameseVerifier",
    "MergedSiameseVerifier",
    "TrainingDiverged",
    "load_verifier",
    "DatasetManifest",
    "Domain",
    "ImageRecord",
    "Material",
    "SplitTag",
    "load_manifest",
    "save_manifest",
    "split_train_test",
    "validate_manifest",
    "CMCReport",
    "ScoreKind",
    "ScoreTable",
    "aggregate_identity",
    "cmc",
    "evaluate",
    "rank_identities",
    "NetworkConfig",
    "contrastive_loss",
    "cross_entropy_loss",
    "PairLabel",
    "PairMode",
    "PairSample",
    "PairSet",
    "PairSource",
    "build_positive_pairs",
    "mine_hard_negatives",
    "sample_negative_pairs",
    "PreprocessConfig",
    "apply_mask",
    "bbox_from_polygon",
    "crop_and_standardize",
    "DomainNoise",
    "SynthConfig",
    "generate_dataset",
    "identity_spec",
    "render_view",
    "MiningConfig",
    "TrainConfig",
    "TrainResult",
    "default_ablation_grid",
    "run_ablation",
    "train",
]
