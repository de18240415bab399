"""Single entry point exposing the pipeline as subcommands.

Every subcommand reads the shared config file, prints the resolved config
path and its output directory, writes a config echo into its run directory,
and exits 0 on success.  Failures print one machine-parsable line to stderr
(``semsr-error class=<ExceptionName> detail="..."``) with a class-specific
exit code.
"""

from __future__ import annotations

import sys
from pathlib import Path

import click

from . import evaluation as ev
from . import training as tr
from .config import RunConfig, apply_strict_determinism, apply_thread_cap
from .dataset import DatasetManifest, build_dataset
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    PrerequisiteError,
    SemsrError,
    ShapeError,
    TrainingError,
)

EXIT_CODES = {
    ConfigError: 2,
    PrerequisiteError: 3,
    TrainingError: 4,
    DataError: 5,
    CheckpointError: 6,
    ShapeError: 7,
}


def _fail(exc: Exception) -> "None":
    code = 1
    for klass, c in EXIT_CODES.items():
        if isinstance(exc, klass):
            code = c
            break
    extra = f" stage={exc.stage}" if isinstance(exc, PrerequisiteError) else ""
    click.echo(f'semsr-error class={type(exc).__name__}{extra} detail="{exc}"', err=True)
    sys.exit(code)


def _load_config(ctx: click.Context) -> RunConfig:
    opts = ctx.obj
    if opts["config"] is None:
        raise ConfigError("--config PATH is required")
    cfg = RunConfig.load(
        opts["config"],
        seed=opts["seed"],
        output_root=opts["out"],
        strict_determinism=opts["strict_determinism"],
    )
    apply_thread_cap()
    if cfg.strict_determinism:
        apply_strict_determinism()
    return cfg


def _announce(cfg: RunConfig, out_dir: Path) -> None:
    click.echo(f"config: {cfg.source}")
    click.echo(f"output: {out_dir}")


def _require_manifest(cfg: RunConfig) -> DatasetManifest:
    try:
        return DatasetManifest.load(cfg.dataset_root)
    except DataError as exc:
        raise PrerequisiteError("dataset", f"dataset stage has not run: {exc}") from exc


def _require_checkpoint(path: Path, stage: str) -> Path:
    if not (Path(path) / "metadata.json").is_file():
        raise PrerequisiteError(stage, f"missing {stage} checkpoint at {path}; run {stage} first")
    return Path(path)


@click.group()
@click.option("--config", type=click.Path(), default=None, help="Path to the run config YAML.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--out", type=click.Path(), default=None, help="Override output_root.")
@click.option(
    "--strict-determinism",
    is_flag=True,
    default=False,
    help="Force deterministic kernels (slower, reproducible to the bit).",
)
@click.pass_context
def main(ctx, config, seed, out, strict_determinism):
    """Segmentation-aware super-resolution pipeline."""
    ctx.obj = {
        "config": config,
        "seed": seed,
        "out": out,
        "strict_determinism": strict_determinism,
    }


@main.command(
    epilog="Config keys: output_root, seed, dataset.{root,size,class_count,"
    "seed_start,seed_count,scales,splits}."
)
@click.pass_context
def dataset(ctx):
    """Build the synthetic tile corpus and its manifest."""
    try:
        cfg = _load_config(ctx)
        out_dir = cfg.stage_dir("dataset")
        _announce(cfg, out_dir)
        d = cfg.raw["dataset"]
        manifest = build_dataset(
            root=out_dir,
            seeds=cfg.dataset_seeds(),
            scales=d["scales"],
            splits=d["splits"],
            size=d["size"],
            class_count=d["class_count"],
        )
        cfg.write_echo(out_dir / "config_echo.yaml")
        counts = {s: len(r) for s, r in manifest.records.items()}
        click.echo(f"dataset built: {counts} tiles at {d['size']}px, scales {d['scales']}")
    except SemsrError as exc:
        _fail(exc)


@main.command(
    name="train-segmenter",
    epilog="Config keys: output_root, seed, segmenter.encoder_channels, dataset.class_count, "
    "training.{batch_size,crop,segmenter_steps,segmenter_lr,seg_val_interval,"
    "segmenter_miou_floor}.",
)
@click.pass_context
def train_segmenter(ctx):
    """Train the segmentation network F on hr/mask pairs; freeze the best."""
    try:
        cfg = _load_config(ctx)
        manifest = _require_manifest(cfg)
        out_dir = cfg.stage_dir("segmenter")
        _announce(cfg, out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.write_echo(out_dir / "config_echo.yaml")
        ckpt = tr.train_segmenter(manifest, cfg.train_config(), cfg.segmenter_config(), out_dir)
        click.echo(f"segmenter checkpoint: {ckpt}")
    except SemsrError as exc:
        _fail(exc)


@main.command(
    epilog="Config keys: output_root, seed, generator.*, training.{batch_size,crop,"
    "pretrain_steps,pretrain_lr_g,lr_decay_factor,lr_decay_interval,val_interval,"
    "checkpoint_interval,init_from}."
)
@click.pass_context
def pretrain(ctx):
    """Stage 1: supervised MAE pretraining of the generator."""
    try:
        cfg = _load_config(ctx)
        manifest = _require_manifest(cfg)
        scale = cfg.raw["generator"]["scale"]
        out_dir = cfg.stage_dir("pretrain", scale)
        _announce(cfg, out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.write_echo(out_dir / "config_echo.yaml")
        ckpt = tr.pretrain_generator(
            manifest,
            cfg.train_config(),
            cfg.generator_config(),
            out_dir,
            init_from=cfg.raw["training"]["init_from"],
        )
        click.echo(f"pretrain checkpoint: {ckpt}")
    except SemsrError as exc:
        _fail(exc)


@main.command(
    epilog="Config keys: output_root, seed, generator.*, discriminator.*, "
    "training.{batch_size,crop,finetune_steps,finetune_lr_g,finetune_lr_d,"
    "lr_decay_factor,lr_decay_interval,d_steps_per_g_step,weights,feat_loss,"
    "guard_accuracy,guard_patience,val_interval,checkpoint_interval}."
)
@click.pass_context
def finetune(ctx):
    """Stage 2: adversarial fine-tuning with the weighted three-term loss."""
    try:
        cfg = _load_config(ctx)
        manifest = _require_manifest(cfg)
        scale = cfg.raw["generator"]["scale"]
        seg_ckpt = _require_checkpoint(cfg.segmenter_checkpoint(), "train-segmenter")
        pre_ckpt = _require_checkpoint(cfg.generator_checkpoint("cnn", scale), "pretrain")
        out_dir = cfg.stage_dir("finetune", scale)
        _announce(cfg, out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.write_echo(out_dir / "config_echo.yaml")
        ckpt = tr.finetune_gan(
            manifest,
            cfg.train_config(),
            cfg.generator_config(),
            cfg.discriminator_config(),
            out_dir,
            pretrained_g=pre_ckpt,
            frozen_f=seg_ckpt,
        )
        click.echo(f"finetune checkpoint: {ckpt}")
    except SemsrError as exc:
        _fail(exc)


@main.command(
    epilog="Config keys: output_root, eval.{scales,split,segmenter_checkpoint,"
    "cnn_checkpoints,gan_checkpoints}."
)
@click.pass_context
def evaluate(ctx):
    """Per-method metric reports (CSV + text summary) on the eval split."""
    try:
        cfg = _load_config(ctx)
        manifest = _require_manifest(cfg)
        seg_ckpt = _require_checkpoint(cfg.segmenter_checkpoint(), "train-segmenter")
        segmenter = tr.load_segmenter(seg_ckpt)
        out_dir = cfg.stage_dir("evaluate")
        _announce(cfg, out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.write_echo(out_dir / "config_echo.yaml")
        split = cfg.raw["eval"]["split"]
        for scale in cfg.raw["eval"]["scales"]:
            generators = {}
            for method in ("cnn", "gan"):
                path = cfg.generator_checkpoint(method, scale)
                if (path / "metadata.json").is_file():
                    generators[method] = tr.load_generator(path)[0]
            reports = ev.evaluate_all_methods(manifest, scale, segmenter, generators, split)
            for method, report in reports.items():
                stem = out_dir / f"{method.replace('-', '_')}_x{scale}"
                report.to_csv(stem.with_suffix(".csv"))
                stem.with_suffix(".txt").write_text(report.summary_text())
                click.echo(f"wrote {stem.with_suffix('.csv')}")
    except SemsrError as exc:
        _fail(exc)


@main.command(
    epilog="Config keys: output_root, eval.{scales,split,segmenter_checkpoint,"
    "cnn_checkpoints,gan_checkpoints}. Requires dataset, train-segmenter, pretrain "
    "and finetune artifacts for every eval scale."
)
@click.pass_context
def compare(ctx):
    """Cross-method comparison table, class-wise analysis, and plots."""
    try:
        cfg = _load_config(ctx)
        manifest = _require_manifest(cfg)
        seg_ckpt = _require_checkpoint(cfg.segmenter_checkpoint(), "train-segmenter")
        segmenter = tr.load_segmenter(seg_ckpt)
        out_dir = cfg.stage_dir("compare")
        _announce(cfg, out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        cfg.write_echo(out_dir / "config_echo.yaml")
        scales = cfg.raw["eval"]["scales"]
        split = cfg.raw["eval"]["split"]
        generators_by_scale = {}
        for scale in scales:
            gens = {}
            for method, stage in (("cnn", "pretrain"), ("gan", "finetune")):
                path = _require_checkpoint(cfg.generator_checkpoint(method, scale), stage)
                gens[method] = tr.load_generator(path)[0]
            generators_by_scale[scale] = gens
        rows = ev.compare_all(manifest, scales, segmenter, generators_by_scale, split)
        classwise = ev.classwise_report(
            manifest,
            scales[0],
            segmenter,
            generators_by_scale[scales[0]]["cnn"],
            generators_by_scale[scales[0]]["gan"],
            split,
        )
        for path in ev.emit_plots(rows, classwise, out_dir):
            click.echo(f"wrote {path}")
    except SemsrError as exc:
        _fail(exc)


if __name__ == "__main__":
    main()
