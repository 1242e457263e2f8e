import warnings

import numpy as np
import pytest

from bagreid.data import ImageBank
from bagreid.manifest import DatasetManifest, Domain
from bagreid.pairs import (
    PairError,
    PairLabel,
    PairMode,
    PairSample,
    PairSet,
    PairSource,
    build_positive_pairs,
    load_pair_set,
    mine_hard_negatives,
    sample_negative_pairs,
    save_pair_set,
)
from bagreid.preprocessing import PreprocessConfig
from bagreid.synth import DomainNoise, SynthConfig, generate_dataset
from tests.test_manifest import record, two_sided_manifest


def manifest_with_views(spec: dict[str, tuple[int, int]]) -> DatasetManifest:
    """spec: identity -> (n_checkpoint, n_bhs)."""
    records = []
    for identity, (n_cp, n_bhs) in spec.items():
        for v in range(1, n_cp + 1):
            records.append(record(identity, Domain.CHECKPOINT, v))
        for v in range(1, n_bhs + 1):
            records.append(record(identity, Domain.BHS, v))
    return DatasetManifest(records=records)


class TestPositivePairs:
    def test_cross_domain_product_count(self):
        manifest = manifest_with_views({"a": (2, 3)})
        pairs = build_positive_pairs(manifest, PairMode.CROSS_DOMAIN)
        assert len(pairs) == 6
        for p in pairs:
            assert manifest.record_for(p.probe_image_id).domain is Domain.CHECKPOINT
            assert manifest.record_for(p.gallery_image_id).domain is Domain.BHS
            assert p.label is PairLabel.POSITIVE

    def test_all_mode_combination_count(self):
        manifest = manifest_with_views({"a": (2, 3)})
        pairs = build_positive_pairs(manifest, PairMode.ALL)
        assert len(pairs) == 10  # C(5, 2)

    def test_counts_equal_combinatorial_oracle(self):
        rng = np.random.default_rng(17)
        for _ in range(20):
            spec = {
                f"id{i}": (int(rng.integers(1, 5)), int(rng.integers(1, 4)))
                for i in range(int(rng.integers(1, 8)))
            }
            manifest = manifest_with_views(spec)
            cross = build_positive_pairs(manifest, PairMode.CROSS_DOMAIN)
            both = build_positive_pairs(manifest, PairMode.ALL)
            assert len(cross) == sum(c * b for c, b in spec.values())
            assert len(both) == sum(
                (c + b) * (c + b - 1) // 2 for c, b in spec.values()
            )


class TestNegativePairs:
    def test_balanced_base_set(self):
        manifest = manifest_with_views({"a": (2, 2), "b": (2, 2), "c": (1, 2)})
        positives = build_positive_pairs(manifest, PairMode.CROSS_DOMAIN)
        negatives = sample_negative_pairs(
            manifest, len(positives), exclude=PairSet(list(positives)), seed=0
        )
        assert len(negatives) == len(positives)
        pair_set = PairSet(positives + negatives)
        pair_set.validate(manifest)
        assert pair_set.ratio == pytest.approx(1.0)

    def test_count_zero(self):
        manifest = manifest_with_views({"a": (1, 1), "b": (1, 1)})
        assert sample_negative_pairs(manifest, 0, seed=1) == []

    def test_exhausted_pool_errors(self):
        manifest = manifest_with_views({"a": (1, 1), "b": (1, 1)})
        # two identities x one image per domain: only 2 cross-domain negatives
        assert len(sample_negative_pairs(manifest, 2, seed=0)) == 2
        with pytest.raises(PairError):
            sample_negative_pairs(manifest, 3, seed=0)

    def test_negatives_are_cross_identity_and_unique(self):
        manifest = two_sided_manifest(6, bhs_views=2, cp_views=2)
        negatives = sample_negative_pairs(manifest, 30, seed=9)
        keys = {n.key() for n in negatives}
        assert len(keys) == 30
        for n in negatives:
            assert (
                manifest.record_for(n.probe_image_id).identity_id
                != manifest.record_for(n.gallery_image_id).identity_id
            )

    def test_deterministic_under_seed(self):
        manifest = two_sided_manifest(8, bhs_views=2, cp_views=2)
        a = sample_negative_pairs(manifest, 20, seed=4)
        b = sample_negative_pairs(manifest, 20, seed=4)
        assert a == b

    def test_disjoint_from_exclude(self):
        manifest = two_sided_manifest(4, bhs_views=2, cp_views=2)
        first = sample_negative_pairs(manifest, 10, seed=1)
        second = sample_negative_pairs(
            manifest, 10, exclude=PairSet(list(first)), seed=1
        )
        assert not ({s.key() for s in first} & {s.key() for s in second})


class ConstantScorer:
    def __init__(self, value: float):
        self.value = value

    def __call__(self, probe_ids, gallery_ids):
        return np.full((len(probe_ids), len(gallery_ids)), self.value)


class TestMining:
    def base_set(self, manifest):
        positives = build_positive_pairs(manifest, PairMode.CROSS_DOMAIN)
        negatives = sample_negative_pairs(
            manifest, len(positives), exclude=PairSet(list(positives)), seed=0
        )
        return PairSet(positives + negatives)

    def test_all_scores_zero_yields_empty_with_warning(self):
        manifest = two_sided_manifest(5, bhs_views=2, cp_views=2)
        base = self.base_set(manifest)
        with pytest.warns(UserWarning):
            mined = mine_hard_negatives(
                ConstantScorer(0.0), manifest, n_identities=5, base=base, seed=0
            )
        assert mined == []

    def test_all_scores_one_truncates_by_tie_break(self):
        manifest = two_sided_manifest(4, bhs_views=2, cp_views=2)
        base = self.base_set(manifest)
        mined = mine_hard_negatives(
            ConstantScorer(1.0), manifest, n_identities=4, base=base,
            target_ratio=2.0, seed=0,
        )
        needed = base.n_positive * 2 - base.n_negative
        assert len(mined) == needed
        # equal probability: lexicographic (probe, gallery) order decides
        keys = [m.key() for m in mined]
        candidates = sorted(
            (p.image_id, g.image_id)
            for p in manifest.records_by_domain(Domain.CHECKPOINT)
            for g in manifest.records_by_domain(Domain.BHS)
            if p.identity_id != g.identity_id and (p.image_id, g.image_id) not in base.keys()
        )
        assert keys == candidates[:needed]

    def test_mined_pairs_marked_and_negative(self):
        manifest = two_sided_manifest(4, bhs_views=2, cp_views=2)
        base = self.base_set(manifest)
        mined = mine_hard_negatives(
            ConstantScorer(0.9), manifest, n_identities=4, base=base, seed=0
        )
        for m in mined:
            assert m.source is PairSource.MINED
            assert m.label is PairLabel.NEGATIVE
            assert (
                manifest.record_for(m.probe_image_id).identity_id
                != manifest.record_for(m.gallery_image_id).identity_id
            )

    def test_augmented_ratio_within_tolerance(self):
        manifest = two_sided_manifest(8, bhs_views=3, cp_views=3)
        base = self.base_set(manifest)
        mined = mine_hard_negatives(
            ConstantScorer(0.8), manifest, n_identities=8, base=base,
            target_ratio=2.0, seed=3,
        )
        augmented = base.extended(mined)
        assert augmented.ratio == pytest.approx(2.0, rel=0.02)

    def test_confusable_twin_pair_is_mined(self, tmp_path):
        # near-twin identities: score by raw pixel similarity and verify the
        # most confusable cross pair is selected
        config = SynthConfig(
            n_identities=10, bhs_views=1, checkpoint_views=1, image_size=96,
            distractor_similarity=0.9, max_decals=0,
            domain_noise=DomainNoise(checkpoint_blur=0, color_shift=0,
                                     occlusion_prob=0, missing_view_prob=0),
            seed=31,
        )
        manifest = generate_dataset(config, tmp_path / "twins")
        bank = ImageBank(
            manifest, tmp_path / "twins",
            PreprocessConfig(resize_to=48, crop_to=48, train_mode=False),
        )

        def pixel_scorer(probe_ids, gallery_ids):
            probes = bank.batch(probe_ids)
            galleries = bank.batch(gallery_ids)
            diffs = np.abs(probes[:, None] - galleries[None, :]).mean(axis=(2, 3, 4))
            return 1.0 / (1.0 + diffs)

        positives = build_positive_pairs(manifest, PairMode.CROSS_DOMAIN)
        base = PairSet(list(positives))
        mined = mine_hard_negatives(
            pixel_scorer, manifest, n_identities=10, threshold=0.0,
            target_ratio=1.0, seed=0, base=base,
        )
        probe_ids = sorted(r.image_id for r in manifest.records_by_domain(Domain.CHECKPOINT))
        gallery_ids = sorted(r.image_id for r in manifest.records_by_domain(Domain.BHS))
        scores = pixel_scorer(probe_ids, gallery_ids)
        best = None
        for i, p in enumerate(probe_ids):
            for j, g in enumerate(gallery_ids):
                if manifest.record_for(p).identity_id == manifest.record_for(g).identity_id:
                    continue
                if best is None or scores[i, j] > best[0]:
                    best = (scores[i, j], (p, g))
        assert best[1] in {m.key() for m in mined}

    def test_scorer_shape_mismatch_rejected(self):
        manifest = two_sided_manifest(3)
        with pytest.raises(PairError, match="shape"):
            mine_hard_negatives(
                lambda p, g: np.zeros((1, 1)), manifest, n_identities=3,
                base=self.base_set(manifest), seed=0,
            )


class TestPairSetIO:
    def test_round_trip(self, tmp_path):
        manifest = two_sided_manifest(3, bhs_views=2, cp_views=2)
        positives = build_positive_pairs(manifest, PairMode.CROSS_DOMAIN)
        negatives = sample_negative_pairs(
            manifest, len(positives), exclude=PairSet(list(positives)), seed=0
        )
        pair_set = PairSet(positives + negatives, provenance={"seed": 0, "mode": "CROSS_DOMAIN"})
        path = tmp_path / "pairs.jsonl"
        save_pair_set(pair_set, path)
        loaded = load_pair_set(path)
        assert loaded.samples == pair_set.samples
        assert loaded.provenance == pair_set.provenance

    def test_duplicate_detection(self):
        sample = PairSample("p", "g", PairLabel.NEGATIVE)
        with pytest.raises(PairError, match="duplicate"):
            PairSet([sample, sample]).validate()
