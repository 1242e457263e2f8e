import numpy as np
import pytest
import torch

from bagreid.manifest import Domain
from bagreid.nets import NetworkConfig
from bagreid.pairs import PairLabel, PairSource
from bagreid.preprocessing import PreprocessConfig
from bagreid.train import (
    AblationCell,
    MiningConfig,
    TrainConfig,
    TrainError,
    default_ablation_grid,
    run_ablation,
    train,
    write_training_log,
)

MICRO_NET = dict(backbone_scale=0.0625, head_widths=(32, 16), embed_dim=16)


def micro_train_config(**kwargs):
    defaults = dict(
        iterations=3,
        batch_pairs=4,
        seed=0,
        preprocess=PreprocessConfig(resize_to=40, crop_to=32, train_mode=True),
    )
    defaults.update(kwargs)
    return TrainConfig(**defaults)


class TestTrain:
    def test_smoke_single_iteration(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        config = micro_train_config(iterations=1, batch_pairs=2)
        result = train(NetworkConfig(variant="merged", **MICRO_NET), manifest, config, root)
        assert len(result.log) == 1
        assert np.isfinite(result.log[0]["loss"])

    def test_without_mining_ratio_exactly_one(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        config = micro_train_config()
        result = train(NetworkConfig(variant="merged", **MICRO_NET), manifest, config, root)
        assert result.pair_set.n_positive == result.pair_set.n_negative
        assert result.pair_set.ratio == pytest.approx(1.0)

    def test_with_mining_reaches_target_ratio(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        config = micro_train_config(
            iterations=8,
            mining=MiningConfig(enabled=True, base_epochs=1, n_identities=6, threshold=0.0),
        )
        result = train(NetworkConfig(variant="merged", **MICRO_NET), manifest, config, root)
        # threshold 0 guarantees ample candidates on this tiny set
        assert result.pair_set.ratio == pytest.approx(2.0, rel=0.02)

    def test_two_phase_schedule_and_mined_labels(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        config = micro_train_config(
            iterations=20,
            mining=MiningConfig(enabled=True, base_epochs=1, n_identities=6, threshold=0.0),
        )
        result = train(NetworkConfig(variant="merged", **MICRO_NET), manifest, config, root)
        phases = [r["phase"] for r in result.log]
        assert set(phases) == {"base", "augmented"}
        switch = phases.index("augmented")
        assert all(p == "base" for p in phases[:switch])
        assert all(p == "augmented" for p in phases[switch:])
        mined = [s for s in result.pair_set.samples if s.source is PairSource.MINED]
        assert mined
        assert all(s.label is PairLabel.NEGATIVE for s in mined)
        assert len(result.log) == config.iterations

    def test_deterministic_under_seed(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        config = micro_train_config(iterations=5, seed=3)
        net_config = NetworkConfig(variant="basic", **MICRO_NET)
        first = train(net_config, manifest, config, root)
        second = train(net_config, manifest, config, root)
        assert [r["loss"] for r in first.log] == [r["loss"] for r in second.log]
        assert first.pair_set.samples == second.pair_set.samples

    def test_frozen_stages_untouched_by_pipeline(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        config = micro_train_config(iterations=4)
        result = train(NetworkConfig(variant="merged", **MICRO_NET), manifest, config, root)
        net = result.estimator.net_
        reference = NetworkConfig(variant="merged", **MICRO_NET)
        torch.manual_seed(config.seed)
        from bagreid.nets import build_network

        fresh = build_network(reference, config.preprocess.crop_to)
        for (name, trained), (_, initial) in zip(
            net.named_parameters(), fresh.named_parameters()
        ):
            if not trained.requires_grad:
                assert torch.equal(trained, initial), f"{name} drifted despite freeze"

    def test_loss_decreases_over_epochs_on_easy_data(self, tiny_dataset):
        # average loss over the first epoch vs the third, easy config
        root, manifest, _ = tiny_dataset
        n_pairs = None
        from bagreid.train import build_base_pair_set
        from bagreid.pairs import PairMode

        n_pairs = len(build_base_pair_set(manifest, PairMode.CROSS_DOMAIN, 0).samples)
        batch = 8
        per_epoch = max(1, n_pairs // batch)
        config = micro_train_config(
            iterations=3 * per_epoch, batch_pairs=batch, learning_rate=5e-3, seed=1
        )
        result = train(NetworkConfig(variant="merged", **MICRO_NET), manifest, config, root)
        losses = [r["loss"] for r in result.log]
        epoch1 = np.mean(losses[:per_epoch])
        epoch3 = np.mean(losses[2 * per_epoch : 3 * per_epoch])
        assert epoch3 < epoch1

    def test_training_log_written(self, tiny_dataset, tmp_path):
        root, manifest, _ = tiny_dataset
        config = micro_train_config(iterations=2)
        result = train(NetworkConfig(variant="basic", **MICRO_NET), manifest, config, root)
        path = tmp_path / "log.jsonl"
        write_training_log(result.log, path)
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        assert '"phase"' in lines[0] and '"loss"' in lines[0]


class TestAblation:
    def test_default_grid_has_ten_rows(self):
        grid = default_ablation_grid()
        assert len(grid) == 10
        assert len(set(grid)) == 10
        # merged-only SE rows and the plain baseline are both present
        assert AblationCell(False, False, False, False) in grid
        assert AblationCell(True, True, True, True) in grid
        assert all(cell.merged for cell in grid if cell.se)

    def test_single_row_grid(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        grid = [AblationCell(merged=True, ats=False, se=False, mask=True)]
        report = run_ablation(
            grid,
            NetworkConfig(variant="merged", **MICRO_NET),
            micro_train_config(iterations=2),
            manifest,
            manifest,
            root,
        )
        assert len(report.rows) == 1
        assert report.rows[0].report is not None
        assert report.rows[0].error is None

    def test_row_failure_recorded_and_harness_continues(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        grid = [
            AblationCell(merged=True, ats=False, se=False, mask=False),
            AblationCell(merged=True, ats=False, se=False, mask=True),
        ]
        config = micro_train_config(iterations=2, learning_rate=float("nan"))
        report = run_ablation(
            grid, NetworkConfig(variant="merged", **MICRO_NET), config,
            manifest, manifest, root,
        )
        assert all(row.error is not None for row in report.rows)
        assert len(report.rows) == 2

    def test_basic_rows_drop_branch_bn(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        grid = [AblationCell(merged=False, ats=False, se=False, mask=True)]
        report = run_ablation(
            grid,
            NetworkConfig(variant="merged", **MICRO_NET),
            micro_train_config(iterations=1),
            manifest,
            manifest,
            root,
        )
        assert report.rows[0].error is None

    def test_empty_grid_rejected(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        with pytest.raises(TrainError):
            run_ablation(
                [], NetworkConfig(**MICRO_NET), micro_train_config(), manifest, manifest, root
            )

    def test_render_table_shape(self, tiny_dataset):
        root, manifest, _ = tiny_dataset
        grid = [AblationCell(True, False, False, False)]
        report = run_ablation(
            grid, NetworkConfig(variant="merged", **MICRO_NET),
            micro_train_config(iterations=1), manifest, manifest, root,
        )
        table = report.render_table()
        lines = table.splitlines()
        assert len(lines) == 2
        assert "Merged" in lines[0] and "Rank1" in lines[0]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(iterations=0)
    with pytest.raises(ValueError):
        TrainConfig(batch_pairs=1)
