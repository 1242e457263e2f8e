import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bagreid.manifest import DatasetManifest, Domain
from bagreid.metrics import (
    CMCReport,
    EvaluationError,
    ScoreKind,
    ScoreTable,
    aggregate_identity,
    cmc,
    evaluate,
    load_cmc_report,
    plot_cmc,
    rank_identities,
    save_cmc_report,
    save_score_tables,
)
from bagreid.preprocessing import PreprocessConfig
from tests.test_manifest import record


def brute_force_cmc(scores, gallery_identities, truths, kind, ranks):
    """Independent oracle: plain python sort over aggregated identity scores."""
    hits = {k: 0 for k in ranks}
    n_probes = scores.shape[0]
    for i in range(n_probes):
        per_identity = {}
        for j, identity in enumerate(gallery_identities):
            per_identity.setdefault(identity, []).append(float(scores[i, j]))
        aggregated = {}
        for identity, values in per_identity.items():
            values = sorted(values)
            if kind == ScoreKind.PROBABILITY:
                values = values[::-1]
            aggregated[identity] = (
                values[0] if len(values) == 1 else (values[0] + values[1]) / 2.0
            )
        if kind == ScoreKind.PROBABILITY:
            ordered = sorted(aggregated, key=lambda x: (-aggregated[x], x))
        else:
            ordered = sorted(aggregated, key=lambda x: (aggregated[x], x))
        position = ordered.index(truths[i]) + 1
        for k in ranks:
            if position <= k:
                hits[k] += 1
    return [hits[k] / n_probes for k in ranks]


def library_cmc(scores, gallery_identities, truths, kind, ranks):
    rankings = []
    for i in range(scores.shape[0]):
        per_identity = {}
        for j, identity in enumerate(gallery_identities):
            per_identity.setdefault(identity, []).append(float(scores[i, j]))
        identity_scores = {
            identity: aggregate_identity(values, kind)
            for identity, values in per_identity.items()
        }
        rankings.append(rank_identities(identity_scores, kind))
    return cmc(rankings, truths, ranks)


class TestAggregateIdentity:
    def test_distance_mean_of_two_smallest(self):
        assert aggregate_identity([0.2, 0.5, 0.9], ScoreKind.DISTANCE) == pytest.approx(0.35)

    def test_single_probability_stands_alone(self):
        assert aggregate_identity([0.7], ScoreKind.PROBABILITY) == pytest.approx(0.7)

    def test_probability_mean_of_two_largest(self):
        assert aggregate_identity(
            [0.1, 0.9, 0.8, 0.2], ScoreKind.PROBABILITY
        ) == pytest.approx(0.85)

    def test_empty_rejected(self):
        with pytest.raises(EvaluationError):
            aggregate_identity([], ScoreKind.DISTANCE)

    @given(
        st.lists(st.floats(-10, 10, allow_nan=False), min_size=1, max_size=12),
        st.randoms(),
    )
    @settings(max_examples=60, deadline=None)
    def test_permutation_invariant(self, values, rnd):
        shuffled = list(values)
        rnd.shuffle(shuffled)
        for kind in (ScoreKind.DISTANCE, ScoreKind.PROBABILITY):
            assert aggregate_identity(values, kind) == pytest.approx(
                aggregate_identity(shuffled, kind)
            )

    def test_top2_of_two_is_plain_mean(self):
        values = [0.3, 0.8]
        for kind in (ScoreKind.DISTANCE, ScoreKind.PROBABILITY):
            assert aggregate_identity(values, kind) == pytest.approx(np.mean(values))


class TestRankIdentities:
    def test_probability_descending(self):
        assert rank_identities({"A": 0.1, "B": 0.9}, ScoreKind.PROBABILITY) == ["B", "A"]

    def test_distance_ascending(self):
        assert rank_identities({"A": 0.1, "B": 0.9}, ScoreKind.DISTANCE) == ["A", "B"]

    def test_tie_break_lexicographic(self):
        assert rank_identities({"B": 0.5, "A": 0.5}, ScoreKind.PROBABILITY) == ["A", "B"]
        assert rank_identities({"B": 0.5, "A": 0.5}, ScoreKind.DISTANCE) == ["A", "B"]

    def test_monotone_transform_leaves_ranking_unchanged(self):
        rng = np.random.default_rng(2)
        probabilities = {f"id{i}": float(rng.uniform(0, 1)) for i in range(20)}
        base = rank_identities(probabilities, ScoreKind.PROBABILITY)
        squashed = {k: float(np.tanh(3 * v) + 7) for k, v in probabilities.items()}
        assert rank_identities(squashed, ScoreKind.PROBABILITY) == base

        distances = {f"id{i}": float(rng.uniform(0, 5)) for i in range(20)}
        base_d = rank_identities(distances, ScoreKind.DISTANCE)
        # strictly decreasing map turns distances into probability-like scores
        flipped = {k: 1.0 / (1.0 + v) for k, v in distances.items()}
        assert rank_identities(flipped, ScoreKind.PROBABILITY) == base_d


class TestCMC:
    def test_positions_example(self):
        rankings = [["a", "b", "c"], ["b", "c", "a"], ["c", "a", "b"]]
        truths = ["a", "a", "a"]  # positions 1, 3, 2
        report = cmc(rankings, truths, ranks=(1, 2, 3))
        assert report.cmc_values == pytest.approx([1 / 3, 2 / 3, 1.0])
        assert report.probe_gt_ranks == [1, 3, 2]

    def test_all_correct_first(self):
        rankings = [["x", "y"], ["x", "y"]]
        report = cmc(rankings, ["x", "x"], ranks=(1,))
        assert report.cmc_values == [1.0]

    def test_missing_ground_truth_rejected(self):
        with pytest.raises(EvaluationError):
            cmc([["a", "b"]], ["z"], ranks=(1,))

    def test_monotone_in_rank(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            n_id = int(rng.integers(2, 20))
            n_gal = int(rng.integers(n_id, 40))
            n_probe = int(rng.integers(1, 15))
            identities = [f"id{i:03d}" for i in range(n_id)]
            gallery_identities = identities + [
                identities[int(rng.integers(0, n_id))] for _ in range(n_gal - n_id)
            ]
            scores = rng.normal(0, 1, (n_probe, n_gal))
            truths = [identities[int(rng.integers(0, n_id))] for _ in range(n_probe)]
            report = library_cmc(
                scores, gallery_identities, truths, ScoreKind.PROBABILITY,
                tuple(range(1, n_id + 1)),
            )
            assert all(
                a <= b for a, b in zip(report.cmc_values, report.cmc_values[1:])
            )
            assert report.cmc_values[-1] == pytest.approx(1.0)

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(4)
        for trial in range(100):
            n_id = int(rng.integers(2, 20))
            n_gal = int(rng.integers(n_id, 50))
            n_probe = int(rng.integers(1, 10))
            identities = [f"id{i:03d}" for i in range(n_id)]
            gallery_identities = identities + [
                identities[int(rng.integers(0, n_id))] for _ in range(n_gal - n_id)
            ]
            kind = ScoreKind.PROBABILITY if trial % 2 else ScoreKind.DISTANCE
            scores = rng.normal(0, 1, (n_probe, n_gal))
            truths = [identities[int(rng.integers(0, n_id))] for _ in range(n_probe)]
            report = library_cmc(scores, gallery_identities, truths, kind, (1, 2, 3))
            expected = brute_force_cmc(scores, gallery_identities, truths, kind, (1, 2, 3))
            assert report.cmc_values == pytest.approx(expected, abs=0)

    def test_report_invariants_enforced(self):
        with pytest.raises(EvaluationError):
            CMCReport(ranks_evaluated=[1, 2], cmc_values=[0.9, 0.5], n_probes=1,
                      n_gallery_identities=2)
        with pytest.raises(EvaluationError):
            CMCReport(ranks_evaluated=[1], cmc_values=[1.5], n_probes=1,
                      n_gallery_identities=2)


class StubModel:
    """Deterministic model over image means for protocol tests."""

    score_kind = ScoreKind.PROBABILITY

    def __init__(self, constant=None):
        self.constant = constant

    def score_matrix(self, probes, galleries):
        if self.constant is not None:
            return np.full((len(probes), len(galleries)), self.constant)
        p = probes.mean(axis=(1, 2, 3))
        g = galleries.mean(axis=(1, 2, 3))
        return 1.0 / (1.0 + np.abs(p[:, None] - g[None, :]))


class TestEvaluate:
    def test_single_probe_own_identity(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        identity = sorted(manifest.identities)[0]
        records = [r for r in manifest.records if r.identity_id == identity]
        sub = DatasetManifest(records=records)
        report, tables = evaluate(
            StubModel(), sub, root,
            preprocess=PreprocessConfig(resize_to=48, crop_to=48, train_mode=False),
            ranks=(1,),
        )
        assert report.cmc_values == [1.0]
        assert len(tables) == len(sub.records_by_domain(Domain.CHECKPOINT))

    def test_constant_model_chance_level(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        # constant scores: ranking is pure lexicographic tie-break, so only
        # probes of the first identity land at rank 1
        report, _ = evaluate(
            StubModel(constant=0.5), manifest, root,
            preprocess=PreprocessConfig(resize_to=48, crop_to=48, train_mode=False),
        )
        n = len(manifest.identities)
        first = sorted(manifest.identities)[0]
        n_first_probes = sum(
            1 for r in manifest.records_by_domain(Domain.CHECKPOINT)
            if r.identity_id == first
        )
        expected = n_first_probes / report.n_probes
        assert report.value_at(1) == pytest.approx(expected)
        # analytic chance level over uniformly random ground truth is 1/n
        assert expected == pytest.approx(1.0 / n, abs=0.2)

    def test_probe_without_gallery_rejected(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        keep = sorted(manifest.identities)[:2]
        records = [
            r for r in manifest.records
            if r.identity_id in keep and not (
                r.identity_id == keep[0] and r.domain is Domain.BHS
            )
        ]
        broken = DatasetManifest(records=records)
        with pytest.raises(EvaluationError, match="cannot be identified"):
            evaluate(
                StubModel(), broken, root,
                preprocess=PreprocessConfig(resize_to=48, crop_to=48, train_mode=False),
            )

    def test_two_image_gallery_equals_plain_mean_aggregator(self, tiny_dataset):
        root, manifest, _ = tiny_dataset  # exactly 2 BHS views per identity

        def plain_mean(values, kind):
            return float(np.mean(values))

        pp = PreprocessConfig(resize_to=48, crop_to=48, train_mode=False)
        top2, _ = evaluate(StubModel(), manifest, root, preprocess=pp)
        mean, _ = evaluate(StubModel(), manifest, root, preprocess=pp, aggregator=plain_mean)
        assert top2.cmc_values == pytest.approx(mean.cmc_values)
        assert top2.probe_gt_ranks == mean.probe_gt_ranks


class TestPersistence:
    def test_cmc_report_round_trip(self, tmp_path):
        report = cmc([["a", "b"], ["b", "a"]], ["a", "a"], ranks=(1, 2))
        path = tmp_path / "report.json"
        save_cmc_report(report, path)
        loaded = load_cmc_report(path)
        assert loaded.to_dict() == report.to_dict()

    def test_score_table_rejects_nonfinite(self):
        with pytest.raises(EvaluationError):
            ScoreTable("p", [("g", float("nan"))], ScoreKind.DISTANCE)

    def test_score_tables_written(self, tmp_path):
        tables = [ScoreTable("p1", [("g1", 0.5), ("g2", 0.25)], ScoreKind.PROBABILITY)]
        path = tmp_path / "tables.jsonl"
        save_score_tables(tables, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2

    def test_plot_written(self, tmp_path):
        report = cmc([["a", "b"]], ["a"], ranks=(1, 2))
        out = tmp_path / "curve.png"
        plot_cmc(report, out)
        assert out.stat().st_size > 0
