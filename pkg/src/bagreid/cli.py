"""Command-line entry point wiring the full pipeline.

Subcommands mirror the pipeline stages: generate, pairs, train, mine, eval,
ablate, report. Every run writes a provenance record (config snapshot, seed,
code version) next to its outputs, and all randomness flows from the single
--seed through named per-module substreams.

Exit codes: 0 success, 1 module error (diagnostic on stderr), 2 usage error.
The BAGREID_DATA_ROOT environment variable, when set, resolves relative
--data paths.
"""

from __future__ import annotations

import dataclasses
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import click

from . import __version__
from .estimators import load_verifier
from .manifest import (
    MANIFEST_FILENAME,
    load_manifest,
    split_train_test,
    validate_manifest,
)
from .metrics import evaluate, load_cmc_report, plot_cmc, save_cmc_report, save_score_tables
from .nets import NetworkConfig
from .pairs import PairMode, load_pair_set, mine_hard_negatives, save_pair_set
from .preprocessing import PreprocessConfig
from .synth import DomainNoise, SynthConfig, generate_dataset
from .train import (
    AblationCell,
    MiningConfig,
    TrainConfig,
    build_base_pair_set,
    default_ablation_grid,
    run_ablation,
    train,
    write_training_log,
)

DATA_ROOT_ENV = "BAGREID_DATA_ROOT"


def _resolve_data(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(DATA_ROOT_ENV)
    if not p.is_absolute() and root:
        return Path(root) / p
    return p


def _apply_overrides(config, overrides: tuple[str, ...]):
    """Apply ``dotted.key=value`` overrides onto nested config dataclasses."""
    for item in overrides:
        if "=" not in item:
            raise click.ClickException(f"override {item!r} is not of the form key=value")
        dotted, raw = item.split("=", 1)
        config = _set_dotted(config, dotted.strip().split("."), raw.strip())
    return config


def _set_dotted(config, keys: list[str], raw: str):
    key = keys[0]
    if not dataclasses.is_dataclass(config) or key not in {
        f.name for f in dataclasses.fields(config)
    }:
        raise click.ClickException(f"unknown config key {key!r} on {type(config).__name__}")
    current = getattr(config, key)
    if len(keys) > 1:
        return replace(config, **{key: _set_dotted(current, keys[1:], raw)})
    return replace(config, **{key: _coerce_like(current, raw, key)})


def _coerce_like(current, raw: str, key: str):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise click.ClickException(f"{key} expects a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.split(",") if p]
        elem = current[0] if current else 0.0
        return tuple(type(elem)(p) for p in parts)
    if isinstance(current, PairMode):
        return PairMode(raw)
    return raw


def _write_provenance(out_dir: Path, command: str, payload: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "code_version": __version__, **payload}
    with (out_dir / "provenance.json").open("w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _load_split(data_dir: Path, test_identities: int | None, split_seed: int):
    """(train part, test part) of the dataset manifest, or the whole manifest twice."""
    manifest = load_manifest(data_dir / MANIFEST_FILENAME)
    if test_identities:
        return split_train_test(manifest, test_identities, split_seed)
    return manifest, manifest


@click.group()
@click.version_option(version=__version__)
def cli() -> None:
    """Cross-domain baggage re-identification pipeline."""


@cli.command()
@click.option("--identities", type=int, required=True, help="Number of identities to generate.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output dataset directory.")
@click.option("--seed", type=int, default=0, show_default=True, help="Root random seed.")
@click.option("--bhs-views", type=int, default=3, show_default=True, help="BHS views per identity (1..3).")
@click.option("--checkpoint-views", type=int, default=4, show_default=True, help="Checkpoint views per identity (1..4).")
@click.option("--image-size", type=int, default=320, show_default=True, help="Square image size in pixels.")
@click.option("--distractor-similarity", type=float, default=0.3, show_default=True, help="0 = distinct identities, 1 = near twins.")
@click.option("--blur", type=float, default=1.0, show_default=True, help="Checkpoint motion blur strength.")
@click.option("--color-shift", type=float, default=0.5, show_default=True, help="Checkpoint lighting shift strength.")
@click.option("--occlusion-prob", type=float, default=0.25, show_default=True, help="Per-view checkpoint occlusion probability.")
@click.option("--missing-view-prob", type=float, default=0.15, show_default=True, help="Per-view checkpoint capture-loss probability.")
@click.option("--max-decals", type=int, default=3, show_default=True, help="Maximum decals (sticker/rope cues) per identity.")
def generate(identities, out_dir, seed, bhs_views, checkpoint_views, image_size,
             distractor_similarity, blur, color_shift, occlusion_prob,
             missing_view_prob, max_decals):
    """Generate a synthetic multi-view dataset with ground-truth masks."""
    config = SynthConfig(
        n_identities=identities,
        bhs_views=bhs_views,
        checkpoint_views=checkpoint_views,
        image_size=image_size,
        domain_noise=DomainNoise(
            checkpoint_blur=blur,
            color_shift=color_shift,
            occlusion_prob=occlusion_prob,
            missing_view_prob=missing_view_prob,
        ),
        distractor_similarity=distractor_similarity,
        max_decals=max_decals,
        seed=seed,
    )
    out = Path(out_dir)
    manifest = generate_dataset(config, out)
    _write_provenance(out, "generate", {"config": config.to_dict(), "seed": seed})
    report = validate_manifest(manifest, out)
    click.echo(report.render())
    click.echo(f"wrote {len(manifest.records)} images for {len(manifest.identities)} identities to {out}")


@cli.command("pairs")
@click.option("--data", "data_dir", type=click.Path(), required=True, help="Dataset directory (manifest + images).")
@click.option("--out", "out_path", type=click.Path(), required=True, help="Output pair file.")
@click.option("--mode", type=click.Choice([m.value for m in PairMode]), default=PairMode.CROSS_DOMAIN.value, show_default=True, help="Positive-pair construction mode.")
@click.option("--seed", type=int, default=0, show_default=True, help="Root random seed.")
@click.option("--test-identities", type=int, default=None, help="Hold out this many identities before pairing.")
@click.option("--split-seed", type=int, default=0, show_default=True, help="Seed for the held-out split.")
def pairs_cmd(data_dir, out_path, mode, seed, test_identities, split_seed):
    """Build the balanced base pair set (all positives + 1:1 negatives)."""
    data = _resolve_data(data_dir)
    train_manifest, _ = _load_split(data, test_identities, split_seed)
    pair_set = build_base_pair_set(train_manifest, PairMode(mode), seed)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pair_set(pair_set, out)
    _write_provenance(
        out.parent,
        "pairs",
        {"config": {"mode": mode, "data": str(data)}, "seed": seed},
    )
    click.echo(
        f"wrote {len(pair_set.samples)} pairs "
        f"({pair_set.n_positive} positive / {pair_set.n_negative} negative) to {out}"
    )


def _train_configs(variant, se, mask, mine, iterations, batch_pairs, backbone_scale,
                   resize_to, crop_to, seed, overrides):
    # The basic baseline keeps the backbone fully shared; per-branch batch
    # normalization belongs to the merged design (override with --set bn_stages=...).
    net_config = NetworkConfig(
        variant=variant,
        use_se=se,
        backbone_scale=backbone_scale,
        bn_stages=("conv4", "conv5") if variant == "merged" else (),
    )
    config = TrainConfig(
        iterations=iterations,
        batch_pairs=batch_pairs,
        mining=MiningConfig(enabled=mine),
        seed=seed,
        preprocess=PreprocessConfig(use_mask=mask, resize_to=resize_to, crop_to=crop_to, train_mode=True),
    )
    for item in overrides:
        key = item.split("=", 1)[0].split(".")[0]
        if key in {f.name for f in dataclasses.fields(NetworkConfig)}:
            net_config = _apply_overrides(net_config, (item,))
        else:
            config = _apply_overrides(config, (item,))
    return net_config, config


_train_options = [
    click.option("--variant", type=click.Choice(["basic", "merged"]), default="merged", show_default=True, help="Verifier variant."),
    click.option("--se/--no-se", default=False, show_default=True, help="Enable squeeze-excite channel gates."),
    click.option("--mask/--no-mask", default=True, show_default=True, help="Zero pixels outside the annotated polygon."),
    click.option("--mine/--no-mine", default=False, show_default=True, help="Enable hard-example mining (two-phase schedule)."),
    click.option("--iterations", type=int, default=2000, show_default=True, help="Total SGD steps."),
    click.option("--batch-pairs", type=int, default=32, show_default=True, help="Image pairs per minibatch."),
    click.option("--backbone-scale", type=float, default=0.25, show_default=True, help="Channel-width multiplier, 1.0 = full width."),
    click.option("--resize-to", type=int, default=256, show_default=True, help="Resize size before cropping."),
    click.option("--crop-to", type=int, default=224, show_default=True, help="Crop window size (multiple of 32)."),
    click.option("--seed", type=int, default=0, show_default=True, help="Root random seed."),
    click.option("--set", "overrides", multiple=True, metavar="KEY=VALUE", help="Override any config field, e.g. mining.threshold=0.6."),
    click.option("--test-identities", type=int, default=None, help="Hold out this many identities from training."),
    click.option("--split-seed", type=int, default=0, show_default=True, help="Seed for the held-out split."),
]


def _with_options(options):
    def wrap(fn):
        for option in reversed(options):
            fn = option(fn)
        return fn

    return wrap


@cli.command("train")
@click.option("--data", "data_dir", type=click.Path(), required=True, help="Dataset directory (manifest + images).")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory for checkpoint and logs.")
@_with_options(_train_options)
def train_cmd(data_dir, out_dir, variant, se, mask, mine, iterations, batch_pairs,
              backbone_scale, resize_to, crop_to, seed, overrides,
              test_identities, split_seed):
    """Train a verifier on a dataset (optionally with mining)."""
    data = _resolve_data(data_dir)
    train_manifest, _ = _load_split(data, test_identities, split_seed)
    net_config, config = _train_configs(
        variant, se, mask, mine, iterations, batch_pairs, backbone_scale,
        resize_to, crop_to, seed, overrides
    )
    try:
        result = train(net_config, train_manifest, config, data)
    except Exception as exc:
        raise click.ClickException(str(exc)) from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.estimator.save(
        out / "checkpoint.pt",
        extra_info={"preprocess": config.preprocess.to_dict()},
    )
    write_training_log(result.log, out / "train_log.jsonl")
    save_pair_set(result.pair_set, out / "pairs.jsonl")
    _write_provenance(
        out,
        "train",
        {
            "config": config.to_dict(),
            "net_config": net_config.to_dict(),
            "data": str(data),
            "seed": seed,
        },
    )
    final_loss = result.log[-1]["loss"] if result.log else float("nan")
    click.echo(
        f"trained {variant} verifier for {len(result.log)} iterations "
        f"(final loss {final_loss:.4f}); artifacts in {out}"
    )


@cli.command("mine")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True, help="Trained verifier checkpoint.")
@click.option("--data", "data_dir", type=click.Path(), required=True, help="Dataset directory.")
@click.option("--pairs", "pairs_path", type=click.Path(), required=True, help="Base pair file to augment.")
@click.option("--out", "out_path", type=click.Path(), required=True, help="Output augmented pair file.")
@click.option("--n-identities", type=int, default=300, show_default=True, help="Identities sampled for mining.")
@click.option("--threshold", type=float, default=0.5, show_default=True, help="Same-identity probability threshold.")
@click.option("--target-ratio", type=float, default=2.0, show_default=True, help="Target negatives per positive.")
@click.option("--seed", type=int, default=0, show_default=True, help="Root random seed.")
def mine_cmd(checkpoint_path, data_dir, pairs_path, out_path, n_identities,
             threshold, target_ratio, seed):
    """Mine hard negatives with a trained verifier and write the augmented set."""
    data = _resolve_data(data_dir)
    manifest = load_manifest(data / MANIFEST_FILENAME)
    estimator = load_verifier(checkpoint_path)
    base = load_pair_set(pairs_path)
    preprocess = _checkpoint_preprocess(checkpoint_path, estimator)
    from .data import ImageBank  # local import keeps CLI import light

    bank = ImageBank(manifest, data, preprocess)

    def scorer(probe_ids, gallery_ids):
        return estimator.same_probability_matrix(
            bank.batch(probe_ids), bank.batch(gallery_ids)
        )

    mined = mine_hard_negatives(
        scorer,
        manifest,
        n_identities=min(n_identities, len(manifest.identities)),
        threshold=threshold,
        target_ratio=target_ratio,
        seed=seed,
        base=base,
    )
    augmented = base.extended(mined)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_pair_set(augmented, out)
    _write_provenance(
        out.parent,
        "mine",
        {
            "config": {
                "n_identities": n_identities,
                "threshold": threshold,
                "target_ratio": target_ratio,
                "checkpoint": str(checkpoint_path),
            },
            "seed": seed,
        },
    )
    click.echo(
        f"mined {len(mined)} hard negatives; augmented set has "
        f"{augmented.n_positive} positives / {augmented.n_negative} negatives "
        f"(ratio 1:{augmented.ratio:.2f})"
    )


def _checkpoint_preprocess(checkpoint_path, estimator) -> PreprocessConfig:
    from .nets import load_checkpoint

    _, extra = load_checkpoint(checkpoint_path)
    stored = extra.get("preprocess")
    if stored:
        return PreprocessConfig.from_dict({**stored, "train_mode": False})
    scale = 256 / 224
    return PreprocessConfig(
        resize_to=round(estimator.input_size_ * scale),
        crop_to=estimator.input_size_,
        train_mode=False,
    )


@cli.command("eval")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(), required=True, help="Trained verifier checkpoint.")
@click.option("--data", "data_dir", type=click.Path(), required=True, help="Dataset directory to evaluate on.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory for reports.")
@click.option("--test-identities", type=int, default=None, help="Evaluate only this many held-out identities.")
@click.option("--split-seed", type=int, default=0, show_default=True, help="Seed for the held-out split.")
@click.option("--plot/--no-plot", default=False, show_default=True, help="Also write a CMC curve image.")
@click.option("--ranks", type=str, default="1,2,3", show_default=True, help="Comma-separated CMC ranks.")
def eval_cmd(checkpoint_path, data_dir, out_dir, test_identities, split_seed, plot, ranks):
    """Evaluate a verifier: identity ranking and CMC on a test dataset."""
    data = _resolve_data(data_dir)
    _, test_manifest = _load_split(data, test_identities, split_seed)
    estimator = load_verifier(checkpoint_path)
    preprocess = _checkpoint_preprocess(checkpoint_path, estimator)
    rank_list = tuple(int(r) for r in ranks.split(","))
    try:
        report, tables = evaluate(
            estimator, test_manifest, data, preprocess=preprocess, ranks=rank_list
        )
    except Exception as exc:
        raise click.ClickException(str(exc)) from exc
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_cmc_report(report, out / "cmc_report.json")
    save_score_tables(tables, out / "score_tables.jsonl")
    if plot:
        plot_cmc(report, out / "cmc_curve.png")
    _write_provenance(
        out,
        "eval",
        {
            "config": {
                "checkpoint": str(checkpoint_path),
                "data": str(data),
                "ranks": list(rank_list),
                "test_identities": test_identities,
            },
            "seed": split_seed,
        },
    )
    click.echo(report.render())


@cli.command("ablate")
@click.option("--data", "data_dir", type=click.Path(), required=True, help="Dataset directory.")
@click.option("--out", "out_dir", type=click.Path(), required=True, help="Output directory for the ablation report.")
@click.option("--grid", "grid_spec", type=str, default="default", show_default=True, help="'default' (10 rows) or a JSON grid file.")
@_with_options(_train_options)
def ablate_cmd(data_dir, out_dir, grid_spec, variant, se, mask, mine, iterations,
               batch_pairs, backbone_scale, resize_to, crop_to, seed, overrides,
               test_identities, split_seed):
    """Run the merged/ATS/SE/mask ablation grid and report CMC per row."""
    data = _resolve_data(data_dir)
    if not test_identities:
        raise click.ClickException("--test-identities is required for ablation")
    train_manifest, test_manifest = _load_split(data, test_identities, split_seed)
    net_config, config = _train_configs(
        variant, se, mask, mine, iterations, batch_pairs, backbone_scale,
        resize_to, crop_to, seed, overrides
    )
    if grid_spec == "default":
        grid = default_ablation_grid()
    else:
        with Path(grid_spec).open("r", encoding="utf-8") as fh:
            grid = [AblationCell(**row) for row in json.load(fh)]
    report = run_ablation(grid, net_config, config, train_manifest, test_manifest, data)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / "ablation.json")
    (out / "ablation_table.txt").write_text(report.render_table() + "\n", encoding="utf-8")
    _write_provenance(
        out,
        "ablate",
        {
            "config": config.to_dict(),
            "net_config": net_config.to_dict(),
            "grid": [cell.to_dict() for cell in grid],
            "data": str(data),
            "seed": seed,
        },
    )
    click.echo(report.render_table())


@cli.command("report")
@click.option("--results", "results_path", type=click.Path(), required=True, help="A cmc_report.json or ablation.json file.")
@click.option("--out", "out_dir", type=click.Path(), default=None, help="Directory for rendered outputs (default: print only).")
@click.option("--plot/--no-plot", default=False, show_default=True, help="Also write a CMC curve image (CMC reports only).")
def report_cmd(results_path, out_dir, plot):
    """Render a stored evaluation or ablation result as a table."""
    path = Path(results_path)
    with path.open("r", encoding="utf-8") as fh:
        payload = json.load(fh)
    kind = payload.get("kind")
    if kind == "cmc-report":
        report = load_cmc_report(path)
        text = report.render()
    elif kind == "ablation-report":
        from .train import AblationReport, AblationRow
        from .metrics import CMCReport

        rows = [
            AblationRow(
                cell=AblationCell(**row["cell"]),
                report=CMCReport.from_dict(row["report"]) if row.get("report") else None,
                error=row.get("error"),
            )
            for row in payload["rows"]
        ]
        report = AblationReport(rows=rows, ranks=tuple(payload["ranks"]))
        text = report.render_table()
    else:
        raise click.ClickException(f"unrecognized results file kind {kind!r}")
    click.echo(text)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text + "\n", encoding="utf-8")
        if plot and kind == "cmc-report":
            plot_cmc(report, out / "cmc_curve.png")


def main() -> None:
    try:
        cli(standalone_mode=False)
    except click.exceptions.NoArgsIsHelpError as exc:
        click.echo(exc.format_message() if hasattr(exc, "format_message") else cli.get_help(click.Context(cli)))
        sys.exit(0)
    except click.UsageError as exc:
        exc.show()
        sys.exit(2)
    except click.ClickException as exc:
        exc.show()
        sys.exit(1)
    except click.exceptions.Abort:
        sys.exit(1)
    except Exception as exc:  # module errors: diagnostic on stderr, exit 1
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
