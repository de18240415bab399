"""Run configuration: one YAML file, sections per pipeline stage.

Loading validates against the published JSON schema (unknown keys are
rejected), fills every default, and returns a fully resolved mapping.
Resolution is a fixed point: the echo file a command writes re-parses to
the identical resolved mapping.
"""

from __future__ import annotations

import copy
import json
import os
from importlib import resources
from pathlib import Path

import jsonschema
import yaml

from .errors import ConfigError
from .losses import LossWeights
from .models import DiscriminatorConfig, GeneratorConfig, SegmenterConfig
from .training import TrainConfig

DEFAULTS: dict = {
    "output_root": "runs/semsr",
    "seed": 0,
    "strict_determinism": False,
    "dataset": {
        "root": None,
        "size": 256,
        "class_count": 6,
        "seed_start": 0,
        "seed_count": 200,
        "scales": [4],
        "splits": {"train": 0.8, "val": 0.1, "test": 0.1},
    },
    "generator": {
        "scale": 4,
        "rrdb_count": 3,
        "dense_blocks": 3,
        "base_channels": 32,
        "growth_channels": 16,
        "residual_scale": 0.2,
    },
    "discriminator": {
        "stage_channels": [64, 128, 256, 512],
        "leaky_slope": 0.2,
    },
    "segmenter": {
        "encoder_channels": [16, 32, 64],
    },
    "training": {
        "batch_size": 16,
        "crop": None,
        "pretrain_steps": 10000,
        "finetune_steps": 10000,
        "segmenter_steps": 2000,
        "pretrain_lr_g": 2e-4,
        "finetune_lr_g": 1e-4,
        "finetune_lr_d": 2e-4,
        "segmenter_lr": 1e-3,
        "lr_decay_factor": 0.5,
        "lr_decay_interval": 10000,
        "d_steps_per_g_step": 1,
        "weights": {"alpha": 1e-3, "beta": 5.0, "gamma": 1e-3},
        "feat_loss": "l2",
        "val_interval": 500,
        "seg_val_interval": 200,
        "checkpoint_interval": 1000,
        "segmenter_miou_floor": 0.75,
        "guard_accuracy": 0.95,
        "guard_patience": 500,
        "init_from": None,
    },
    "eval": {
        "scales": None,
        "split": "test",
        "segmenter_checkpoint": None,
        "cnn_checkpoints": {},
        "gan_checkpoints": {},
    },
}


def _schema() -> dict:
    return json.loads(resources.files("semsr").joinpath("config_schema.json").read_text())


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, val in override.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


class RunConfig:
    """Resolved configuration with typed accessors for the model/train layers."""

    def __init__(self, resolved: dict, source: Path | None = None):
        self.raw = resolved
        self.source = source

    # -- construction --------------------------------------------------------

    @classmethod
    def load(
        cls,
        path,
        seed: int | None = None,
        output_root: str | None = None,
        strict_determinism: bool | None = None,
    ) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            user = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"config {path} must be a mapping at top level")
        try:
            jsonschema.validate(user, _schema())
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"config {path} invalid at {where}: {exc.message}") from exc
        resolved = _merge(DEFAULTS, user)
        if seed is not None:
            resolved["seed"] = int(seed)
        if output_root is not None:
            resolved["output_root"] = str(output_root)
        if strict_determinism:
            resolved["strict_determinism"] = True
        if resolved["dataset"]["root"] is None:
            resolved["dataset"]["root"] = str(Path(resolved["output_root"]) / "dataset")
        if resolved["eval"]["scales"] is None:
            resolved["eval"]["scales"] = [resolved["generator"]["scale"]]
        cfg = cls(resolved, source=path)
        cfg._check_consistency()
        return cfg

    def _check_consistency(self):
        d = self.raw["dataset"]
        gscale = self.raw["generator"]["scale"]
        if gscale not in d["scales"]:
            raise ConfigError(
                f"generator.scale {gscale} must be listed in dataset.scales {d['scales']}"
            )
        crop = self.raw["training"]["crop"]
        if crop is not None:
            if crop > d["size"]:
                raise ConfigError(f"training.crop {crop} exceeds tile size {d['size']}")
            seg_stride = 2 ** len(self.raw["segmenter"]["encoder_channels"])
            if crop % gscale or crop % seg_stride:
                raise ConfigError(
                    f"training.crop {crop} must be divisible by the scale ({gscale}) "
                    f"and the segmenter stride ({seg_stride})"
                )
            if crop // gscale < 8:
                raise ConfigError(f"training.crop {crop} gives a sub-8px generator input")
        splits = d["splits"]
        if abs(sum(splits.values()) - 1.0) > 1e-9:
            raise ConfigError(f"dataset.splits must sum to 1, got {splits}")

    # -- echo ------------------------------------------------------------------

    def echo_text(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True, default_flow_style=False)

    def write_echo(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.echo_text())
        return path

    # -- paths -------------------------------------------------------------

    @property
    def output_root(self) -> Path:
        return Path(self.raw["output_root"])

    @property
    def dataset_root(self) -> Path:
        return Path(self.raw["dataset"]["root"])

    def stage_dir(self, stage: str, scale: int | None = None) -> Path:
        if stage == "dataset":
            return self.dataset_root
        if stage in ("pretrain", "finetune") and scale is not None:
            return self.output_root / f"{stage}_x{scale}"
        return self.output_root / stage

    def segmenter_checkpoint(self) -> Path:
        override = self.raw["eval"]["segmenter_checkpoint"]
        return Path(override) if override else self.stage_dir("segmenter") / "checkpoint"

    def generator_checkpoint(self, method: str, scale: int) -> Path:
        key = {"cnn": "cnn_checkpoints", "gan": "gan_checkpoints"}[method]
        override = self.raw["eval"][key].get(str(scale))
        if override:
            return Path(override)
        stage = "pretrain" if method == "cnn" else "finetune"
        return self.stage_dir(stage, scale) / "checkpoint"

    # -- typed sections -----------------------------------------------------

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def strict_determinism(self) -> bool:
        return bool(self.raw["strict_determinism"])

    def dataset_seeds(self) -> list[int]:
        d = self.raw["dataset"]
        return list(range(d["seed_start"], d["seed_start"] + d["seed_count"]))

    def generator_config(self, scale: int | None = None) -> GeneratorConfig:
        g = self.raw["generator"]
        return GeneratorConfig(
            scale=scale if scale is not None else g["scale"],
            rrdb_count=g["rrdb_count"],
            dense_blocks=g["dense_blocks"],
            base_channels=g["base_channels"],
            growth_channels=g["growth_channels"],
            residual_scale=g["residual_scale"],
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        d = self.raw["discriminator"]
        return DiscriminatorConfig(
            stage_channels=tuple(d["stage_channels"]), leaky_slope=d["leaky_slope"]
        )

    def segmenter_config(self) -> SegmenterConfig:
        return SegmenterConfig(
            class_count=self.raw["dataset"]["class_count"],
            encoder_channels=tuple(self.raw["segmenter"]["encoder_channels"]),
        )

    def train_config(self) -> TrainConfig:
        t = dict(self.raw["training"])
        t.pop("init_from", None)
        weights = LossWeights(**t.pop("weights"))
        return TrainConfig(weights=weights, seed=self.seed, **t)


def apply_thread_cap() -> None:
    """Honour SEMSR_MAX_THREADS for torch intra-op parallelism."""
    cap = os.environ.get("SEMSR_MAX_THREADS")
    if cap:
        try:
            n = max(1, int(cap))
        except ValueError as exc:
            raise ConfigError(f"SEMSR_MAX_THREADS must be an integer, got {cap!r}") from exc
        import torch

        torch.set_num_threads(n)


def apply_strict_determinism() -> None:
    import torch

    torch.use_deterministic_algorithms(True)
