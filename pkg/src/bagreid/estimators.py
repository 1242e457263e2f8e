"""Verifier estimators with a scikit-learn style surface.

A verifier is a binary model over image pairs: ``fit(X, y)`` takes a stack
of standardized (probe, gallery) image pairs with same/different labels and
trains with SGD; scoring works either pairwise (``score_pairs``) or as a
full probe x gallery matrix (``score_matrix``), which is the shared path
used by both hard-example mining and evaluation.

The basic verifier scores by Euclidean embedding distance (lower means more
similar); the merged verifier is a classifier returning P(same identity).
Both expose ``same_probability`` so mining can treat them uniformly: for
distances the mapping is margin / (margin + d), which crosses 0.5 exactly at
the contrastive margin.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nets
from .seeding import derive_rng
from .validation import check_images, check_pair_labels, check_pair_stack

_SCORE_BATCH = 128


class TrainingDiverged(RuntimeError):
    """Raised when the training loss becomes non-finite."""


def _to_nchw(images: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(images)).permute(0, 3, 1, 2)


class _SiameseVerifier(BaseEstimator):
    """Shared machinery for both variants; not used directly."""

    _variant = "merged"

    def __init__(
        self,
        use_se=False,
        se_reduction=16,
        backbone_scale=0.25,
        freeze_stages=("conv1", "conv2"),
        bn_stages=("conv4", "conv5"),
        head_widths=(1024, 256),
        embed_dim=256,
        merge_before_pool=False,
        contrastive_margin=1.0,
        iterations=2000,
        batch_pairs=32,
        learning_rate=1e-3,
        momentum=0.9,
        weight_decay=5e-4,
        lr_step_fractions=(0.6, 0.85),
        seed=0,
    ):
        self.use_se = use_se
        self.se_reduction = se_reduction
        self.backbone_scale = backbone_scale
        self.freeze_stages = freeze_stages
        self.bn_stages = bn_stages
        self.head_widths = head_widths
        self.embed_dim = embed_dim
        self.merge_before_pool = merge_before_pool
        self.contrastive_margin = contrastive_margin
        self.iterations = iterations
        self.batch_pairs = batch_pairs
        self.learning_rate = learning_rate
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.lr_step_fractions = lr_step_fractions
        self.seed = seed

    # -- construction ------------------------------------------------------

    def network_config(self) -> nets.NetworkConfig:
        return nets.NetworkConfig(
            variant=self._variant,
            use_se=self.use_se,
            se_reduction=self.se_reduction,
            freeze_stages=tuple(self.freeze_stages),
            bn_stages=tuple(self.bn_stages),
            head_widths=tuple(self.head_widths),
            embed_dim=self.embed_dim,
            backbone_scale=self.backbone_scale,
            merge_before_pool=self.merge_before_pool,
            contrastive_margin=self.contrastive_margin,
        )

    def initialize(self, input_size: int) -> "_SiameseVerifier":
        """Build a fresh network (seeded) ready for training at this input size."""
        torch.manual_seed(self.seed)
        self.net_ = nets.build_network(self.network_config(), input_size)
        self.input_size_ = input_size
        self.n_iter_ = 0
        self.log_ = []
        trainable = [p for p in self.net_.parameters() if p.requires_grad]
        self._optimizer = torch.optim.SGD(
            trainable,
            lr=self.learning_rate,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
        )
        self._batch_rng = derive_rng(self.seed, "batches")
        return self

    def _require_net(self, input_size: int) -> None:
        if not hasattr(self, "net_"):
            self.initialize(input_size)
        elif self.input_size_ != input_size:
            raise ValueError(
                f"estimator was built for {self.input_size_}px inputs, got {input_size}px"
            )

    # -- training ----------------------------------------------------------

    def _learning_rate_at(self, step: int) -> float:
        milestones = [int(f * self.iterations) for f in self.lr_step_fractions]
        drops = sum(1 for m in milestones if step >= m)
        return self.learning_rate * (0.1**drops)

    def _pair_loss(self, probe: torch.Tensor, gallery: torch.Tensor, y: torch.Tensor):
        raise NotImplementedError

    def train_steps(self, next_batch, n_steps: int, phase: str) -> None:
        """Run ``n_steps`` SGD steps drawing (X, y) batches from ``next_batch``.

        ``next_batch(rng)`` must return a (B, 2, H, W, 3) float array and a
        (B,) 0/1 label array. This is the one optimization loop in the
        package; ``fit`` and the pipeline trainer both feed it.
        """
        check_is_fitted(self, "net_")
        self.net_.train()
        for _ in range(n_steps):
            lr = self._learning_rate_at(self.n_iter_)
            for group in self._optimizer.param_groups:
                group["lr"] = lr
            X, y = next_batch(self._batch_rng)
            pairs = torch.from_numpy(np.ascontiguousarray(X, dtype=np.float32))
            labels = torch.from_numpy(np.asarray(y, dtype=np.int64))
            probe = pairs[:, 0].permute(0, 3, 1, 2)
            gallery = pairs[:, 1].permute(0, 3, 1, 2)
            loss = self._pair_loss(probe, gallery, labels).mean()
            if not torch.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at iteration {self.n_iter_ + 1} "
                    f"(phase={phase}, lr={lr:g})"
                )
            self._optimizer.zero_grad()
            loss.backward()
            self._optimizer.step()
            self.n_iter_ += 1
            self.log_.append(
                {"iteration": self.n_iter_, "loss": loss.item(), "phase": phase, "lr": lr}
            )

    def _array_batcher(self, X: np.ndarray, y: np.ndarray):
        def next_batch(rng: np.random.Generator):
            idx = rng.integers(0, len(X), size=min(self.batch_pairs, len(X)))
            return X[idx], y[idx]

        return next_batch

    def fit(self, X, y) -> "_SiameseVerifier":
        """Train on labeled pairs for ``iterations`` SGD steps."""
        X = check_pair_stack(X)
        y = check_pair_labels(y, len(X))
        self.initialize(int(X.shape[2]))
        self.train_steps(self._array_batcher(X, y), self.iterations, phase="fit")
        return self

    def partial_fit(self, X, y, n_steps: int | None = None) -> "_SiameseVerifier":
        """Continue training on labeled pairs without re-initializing."""
        X = check_pair_stack(X)
        y = check_pair_labels(y, len(X))
        self._require_net(int(X.shape[2]))
        self.train_steps(
            self._array_batcher(X, y), n_steps or self.iterations, phase="partial_fit"
        )
        return self

    # -- scoring -----------------------------------------------------------

    def _forward_pairs(self, probe: torch.Tensor, gallery: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def score_pairs(self, X) -> np.ndarray:
        """Raw verification score per pair (distance or probability)."""
        check_is_fitted(self, "net_")
        X = check_pair_stack(X)
        if X.shape[2] != self.input_size_:
            raise ValueError(
                f"expected {self.input_size_}px inputs, got {X.shape[2]}px"
            )
        self.net_.eval()
        out = []
        with torch.no_grad():
            for start in range(0, len(X), _SCORE_BATCH):
                chunk = torch.from_numpy(np.ascontiguousarray(X[start : start + _SCORE_BATCH]))
                probe = chunk[:, 0].permute(0, 3, 1, 2)
                gallery = chunk[:, 1].permute(0, 3, 1, 2)
                out.append(self._forward_pairs(probe, gallery).numpy())
        return np.concatenate(out) if out else np.empty(0, dtype=np.float32)

    def _branch_tensors(self, images: np.ndarray, branch: str) -> torch.Tensor:
        chunks = []
        with torch.no_grad():
            for start in range(0, len(images), _SCORE_BATCH):
                batch = _to_nchw(images[start : start + _SCORE_BATCH])
                chunks.append(self._branch_forward(batch, branch))
        return torch.cat(chunks) if chunks else torch.empty(0)

    def branch_features(self, images, branch: str) -> np.ndarray:
        """Backbone feature maps for one branch, channel-last (B, h, w, C)."""
        check_is_fitted(self, "net_")
        images = check_images(images)
        self.net_.eval()
        with torch.no_grad():
            maps = self.net_.backbone(_to_nchw(images), branch)
        return maps.permute(0, 2, 3, 1).numpy()

    def score_matrix(self, probe_images, gallery_images) -> np.ndarray:
        """Score every probe against every gallery image: (n_probe, n_gallery).

        Branch features are computed once per image, so this is the efficient
        path shared by evaluation and mining.
        """
        check_is_fitted(self, "net_")
        probe_images = check_images(probe_images)
        gallery_images = check_images(gallery_images)
        self.net_.eval()
        probe_feats = self._branch_tensors(probe_images, "probe")
        gallery_feats = self._branch_tensors(gallery_images, "gallery")
        with torch.no_grad():
            return self._matrix_from_features(probe_feats, gallery_feats).numpy()

    def same_probability(self, X) -> np.ndarray:
        """P(same identity) per pair, on a common (0, 1] scale for both variants."""
        raise NotImplementedError

    def same_probability_matrix(self, probe_images, gallery_images) -> np.ndarray:
        raise NotImplementedError

    # -- persistence ---------------------------------------------------------

    def save(self, path: Path | str, extra_info: dict | None = None) -> None:
        check_is_fitted(self, "net_")
        extra = {"params": self.get_params(), "n_iter": self.n_iter_}
        if extra_info:
            extra.update(extra_info)
        nets.save_checkpoint(path, self.net_, self.input_size_, extra=extra)

    @classmethod
    def load(cls, path: Path | str) -> "_SiameseVerifier":
        net, extra = nets.load_checkpoint(path)
        params = extra.get("params", {})
        estimator = cls(**params)
        expected = estimator.network_config()
        if net.config != expected:
            raise ValueError(
                f"checkpoint at {path} holds a {net.config.variant!r} network that "
                f"does not match this estimator class"
            )
        estimator.net_ = net
        estimator.input_size_ = net.input_size
        estimator.n_iter_ = extra.get("n_iter", 0)
        estimator.log_ = []
        trainable = [p for p in net.parameters() if p.requires_grad]
        estimator._optimizer = torch.optim.SGD(
            trainable,
            lr=estimator.learning_rate,
            momentum=estimator.momentum,
            weight_decay=estimator.weight_decay,
        )
        estimator._batch_rng = derive_rng(estimator.seed, "batches", "resumed")
        return estimator


class BasicSiameseVerifier(_SiameseVerifier):
    """Embedding verifier: Euclidean distance + contrastive loss."""

    _variant = "basic"
    score_kind = "distance"

    def _pair_loss(self, probe, gallery, y):
        distance, _, _ = self.net_(probe, gallery)
        return nets.contrastive_loss(distance, y, self.contrastive_margin)

    def _forward_pairs(self, probe, gallery):
        distance, _, _ = self.net_(probe, gallery)
        return distance

    def _branch_forward(self, batch, branch):
        return self.net_.embed(batch, branch)

    def _matrix_from_features(self, probe_feats, gallery_feats):
        return torch.cdist(probe_feats, gallery_feats)

    def embeddings(self, images, branch: str) -> np.ndarray:
        check_is_fitted(self, "net_")
        images = check_images(images)
        self.net_.eval()
        return self._branch_tensors(images, branch).numpy()

    def same_probability(self, X) -> np.ndarray:
        distance = self.score_pairs(X)
        return self.contrastive_margin / (self.contrastive_margin + distance)

    def same_probability_matrix(self, probe_images, gallery_images) -> np.ndarray:
        distances = self.score_matrix(probe_images, gallery_images)
        return self.contrastive_margin / (self.contrastive_margin + distances)

    def decision_function(self, X) -> np.ndarray:
        return -self.score_pairs(X)

    def predict(self, X) -> np.ndarray:
        return (self.score_pairs(X) < self.contrastive_margin).astype(np.int64)


class MergedSiameseVerifier(ClassifierMixin, _SiameseVerifier):
    """Classification verifier: probe-minus-gallery merge + binary head."""

    _variant = "merged"
    score_kind = "probability"

    def _pair_loss(self, probe, gallery, y):
        probability = self.net_(probe, gallery)
        return nets.cross_entropy_loss(probability, y)

    def _forward_pairs(self, probe, gallery):
        return self.net_(probe, gallery)

    def _branch_forward(self, batch, branch):
        return self.net_.branch_map(batch, branch).flatten(1)

    def _matrix_from_features(self, probe_feats, gallery_feats):
        map_side = self.input_size_ // 32
        channels = self.net_.backbone.out_channels
        if self.net_.config.merge_before_pool:
            map_side *= 2
        shape = (-1, channels, map_side, map_side)
        rows = []
        for i in range(len(probe_feats)):
            merged = (probe_feats[i][None, :] - gallery_feats).reshape(shape)
            if self.net_.config.merge_before_pool:
                merged = self.net_.backbone.stages["conv5"].pool(merged)
                se = self.net_.backbone.stages["conv5"].se
                if se is not None:
                    merged = se(merged)
            logits = self.net_.head(merged.flatten(1))
            rows.append(torch.softmax(logits, dim=1)[:, 1])
        return torch.stack(rows) if rows else torch.empty(0, len(gallery_feats))

    def fit(self, X, y):
        self.classes_ = np.array([0, 1])
        return super().fit(X, y)

    def predict_proba(self, X) -> np.ndarray:
        p_same = self.score_pairs(X)
        return np.column_stack([1.0 - p_same, p_same])

    def predict(self, X) -> np.ndarray:
        return (self.score_pairs(X) >= 0.5).astype(np.int64)

    def decision_function(self, X) -> np.ndarray:
        return self.score_pairs(X) - 0.5

    def same_probability(self, X) -> np.ndarray:
        return self.score_pairs(X)

    def same_probability_matrix(self, probe_images, gallery_images) -> np.ndarray:
        return self.score_matrix(probe_images, gallery_images)


def estimator_for_variant(variant: str, **params) -> _SiameseVerifier:
    if variant == "basic":
        return BasicSiameseVerifier(**params)
    if variant == "merged":
        return MergedSiameseVerifier(**params)
    raise ValueError(f"unknown variant {variant!r}")


def load_verifier(path: Path | str) -> _SiameseVerifier:
    """Load a saved checkpoint as the matching estimator class."""
    net, _ = nets.load_checkpoint(path)
    cls = BasicSiameseVerifier if net.config.variant == "basic" else MergedSiameseVerifier
    return cls.load(path)
