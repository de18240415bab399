"""Training stages: segmenter, supervised generator pretraining, adversarial
fine-tuning.

Everything that feeds a training step is a pure function of (run seed, step):
batch composition shuffles per-epoch with a permutation keyed on (seed,
epoch), and crop/flip augmentation draws from a SeedSequence keyed on (seed,
step).  Together with fixed parameter-init seeds this makes runs replayable
and resumable: restoring a checkpoint at step t continues with exactly the
batches the unbroken run would have seen.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, asdict, field, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import dataset as ds
from .checkpoint import (
    TrainState,
    load_checkpoint,
    pack_module,
    pack_optimizer,
    require_kind,
    save_checkpoint,
    unpack_module,
    unpack_optimizer,
)
from .errors import CheckpointError, ConfigError, TrainingError
from .losses import (
    LossWeights,
    discriminator_loss,
    feature_loss,
    gan_generator_loss,
    mae_loss,
    patch_accuracy,
    total_generator_loss,
)
from .metrics import pooled_class_ious, psnr
from .models import (
    Discriminator,
    DiscriminatorConfig,
    Generator,
    GeneratorConfig,
    Segmenter,
    SegmenterConfig,
    parameter_hash,
    to_numpy,
    to_tensor,
)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

# stream tags so the independent rng consumers never collide
_TAG_BATCH = 0x0B17C4
_TAG_INIT_G = 0x0601
_TAG_INIT_D = 0x0602
_TAG_INIT_F = 0x0603


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for all three stages."""

    batch_size: int = 16
    crop: int | None = None  # high-resolution crop size; None trains on full tiles
    pretrain_steps: int = 10000
    finetune_steps: int = 10000
    segmenter_steps: int = 2000
    pretrain_lr_g: float = 2e-4
    finetune_lr_g: float = 1e-4
    finetune_lr_d: float = 2e-4
    segmenter_lr: float = 1e-3
    lr_decay_factor: float = 0.5
    lr_decay_interval: int = 10000
    d_steps_per_g_step: int = 1
    weights: LossWeights = field(default_factory=LossWeights)
    feat_loss: str = "l2"
    seed: int = 0
    val_interval: int = 500
    seg_val_interval: int = 200
    checkpoint_interval: int = 1000
    segmenter_miou_floor: float = 0.75
    guard_accuracy: float = 0.95
    guard_patience: int = 500

    def __post_init__(self):
        for name in ("pretrain_lr_g", "finetune_lr_g", "finetune_lr_d", "segmenter_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.lr_decay_interval <= 0:
            raise ConfigError("lr_decay_interval must be positive")
        if self.batch_size <= 0:
            raise ConfigError("batch_size must be positive")


def lr_schedule(step: int, lr0: float, factor: float = 0.5, interval: int = 10000) -> float:
    """lr(step) = lr0 * factor ** floor(step / interval)."""
    return lr0 * factor ** (step // interval)


def _set_lr(opt: torch.optim.Optimizer, lr: float) -> None:
    for group in opt.param_groups:
        group["lr"] = lr


@lru_cache(maxsize=64)
def _epoch_perm(n: int, seed: int, epoch: int) -> tuple:
    rng = np.random.default_rng(np.random.SeedSequence([seed, _TAG_BATCH, epoch]))
    return tuple(rng.permutation(n).tolist())


def batch_indices(n: int, batch: int, step: int, seed: int) -> list[int]:
    """Tile indices for one step of the deterministic shuffled stream."""
    start = step * batch
    out: list[int] = []
    while len(out) < batch:
        epoch, pos = divmod(start, n)
        perm = _epoch_perm(n, seed, epoch)
        take = min(batch - len(out), n - pos)
        out.extend(perm[pos : pos + take])
        start += take
    return out


class SplitData:
    """One dataset split preloaded as arrays, with deterministic sampling."""

    def __init__(self, manifest: ds.DatasetManifest, split: str, scale: int):
        recs = manifest.split_records(split)
        if not recs:
            raise ConfigError(f"split {split!r} is empty")
        batch = ds.load_batch(manifest, split, list(range(len(recs))), scale)
        self.hr = batch["hr"]
        self.lr = batch["lr"]
        self.labels = batch["labels"]
        self.seeds = batch["seeds"]
        self.scale = scale
        self.tile_size = self.hr.shape[1]

    def __len__(self) -> int:
        return self.hr.shape[0]

    def sample(self, step: int, cfg: TrainConfig, with_labels: bool = False) -> dict:
        """Crop+flip-augmented batch for one training step, as NCHW tensors."""
        idx = batch_indices(len(self), cfg.batch_size, step, cfg.seed)
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, step]))
        crop = cfg.crop or self.tile_size
        if crop % self.scale:
            raise ConfigError(f"crop {crop} not divisible by scale {self.scale}")
        hr_list, lr_list, lab_list = [], [], []
        max_off = (self.tile_size - crop) // self.scale
        for i in idx:
            oy, ox = (rng.integers(0, max_off + 1, 2) * self.scale if max_off else (0, 0))
            flip_h, flip_v = rng.integers(0, 2, 2)
            hr = self.hr[i, oy : oy + crop, ox : ox + crop]
            lr = self.lr[
                i,
                oy // self.scale : (oy + crop) // self.scale,
                ox // self.scale : (ox + crop) // self.scale,
            ]
            lab = self.labels[i, oy : oy + crop, ox : ox + crop] if with_labels else None
            if flip_h:
                hr, lr = hr[:, ::-1], lr[:, ::-1]
                lab = lab[:, ::-1] if lab is not None else None
            if flip_v:
                hr, lr = hr[::-1], lr[::-1]
                lab = lab[::-1] if lab is not None else None
            hr_list.append(np.ascontiguousarray(hr))
            lr_list.append(np.ascontiguousarray(lr))
            if with_labels:
                lab_list.append(np.ascontiguousarray(lab))
        out = {
            "hr": to_tensor(np.stack(hr_list)),
            "lr": to_tensor(np.stack(lr_list)),
        }
        if with_labels:
            out["labels"] = torch.from_numpy(np.stack(lab_list).astype(np.int64))
        return out


class RunLog:
    """Append-only line-delimited JSON training log."""

    def __init__(self, path: Path, resume: bool = False):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        if not resume:
            self.path.write_text("")

    def write(self, record: dict) -> None:
        with self.path.open("a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")

    @staticmethod
    def read(path) -> list[dict]:
        return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def _seeded(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _check_finite(value: float, term: str, step: int, out_dir: Path) -> None:
    if not math.isfinite(value):
        raise TrainingError(
            f"non-finite loss term {term}={value} at step {step}; "
            f"last good checkpoint retained under {out_dir}"
        )


def _write_stage_meta(out_dir: Path, name: str, payload: dict) -> None:
    (out_dir / name).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# segmenter training
# ---------------------------------------------------------------------------


def val_miou(segmenter: Segmenter, data: SplitData, batch: int = 4) -> float:
    """Pooled mean IoU of the segmenter on a split's full-size tiles."""
    segmenter.eval()
    preds = []
    with torch.no_grad():
        for i in range(0, len(data), batch):
            probs = segmenter(to_tensor(data.hr[i : i + batch]))
            preds.extend(np.argmax(to_numpy(probs), axis=-1).astype(np.uint8))
    ious = pooled_class_ious(preds, list(data.labels), segmenter.cfg.class_count)
    defined = [v for v in ious if v is not None]
    return float(np.mean(defined))


def train_segmenter(
    manifest: ds.DatasetManifest,
    cfg: TrainConfig,
    seg_cfg: SegmenterConfig,
    out_dir,
) -> Path:
    """Train F on hr/mask pairs until val mIoU plateaus; save frozen best.

    Raises TrainingError when the best validation mIoU stays below the
    configured floor.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if seg_cfg.class_count != manifest.class_count:
        raise ConfigError(
            f"segmenter class_count {seg_cfg.class_count} != dataset {manifest.class_count}"
        )
    scale = manifest.scales[0]
    train = SplitData(manifest, "train", scale)
    val = SplitData(manifest, "val", scale)
    log = RunLog(out_dir / "log.jsonl")

    torch.manual_seed(_seeded(cfg.seed, _TAG_INIT_F))
    segmenter = Segmenter(seg_cfg)
    opt = torch.optim.Adam(segmenter.parameters(), lr=cfg.segmenter_lr, betas=ADAM_BETAS, eps=ADAM_EPS)

    best_miou = -1.0
    best_state = None
    best_step = 0
    stale = 0
    t0 = time.monotonic()
    for step in range(cfg.segmenter_steps):
        segmenter.train()
        batch = train.sample(step, cfg, with_labels=True)
        opt.zero_grad()
        logits = segmenter.forward_logits(batch["hr"])
        loss = F.cross_entropy(logits, batch["labels"])
        loss.backward()
        opt.step()
        _check_finite(float(loss.detach()), "cross_entropy", step, out_dir)

        last = step == cfg.segmenter_steps - 1
        if step % cfg.seg_val_interval == cfg.seg_val_interval - 1 or last:
            miou_now = val_miou(segmenter, val)
            if miou_now > best_miou:
                best_miou = miou_now
                best_state = {k: v.detach().clone() for k, v in segmenter.state_dict().items()}
                best_step = step
                stale = 0
            else:
                stale += 1
            log.write(
                {
                    "stage": "segmenter",
                    "step": step,
                    "loss": float(loss.detach()),
                    "val_miou": miou_now,
                    "best_miou": best_miou,
                    "lr": cfg.segmenter_lr,
                }
            )
            if stale >= 5:
                break
        elif step % 50 == 0:
            log.write({"stage": "segmenter", "step": step, "loss": float(loss.detach()), "lr": cfg.segmenter_lr})

    if best_miou < cfg.segmenter_miou_floor:
        raise TrainingError(
            f"segmenter val mIoU {best_miou:.4f} below floor {cfg.segmenter_miou_floor} "
            f"after {cfg.segmenter_steps} steps (best at step {best_step})"
        )
    segmenter.load_state_dict(best_state)
    segmenter.freeze()

    tensors: dict = {}
    pack_module(segmenter, "f", tensors)
    state = TrainState(
        meta={
            "kind": "segmenter",
            "step": best_step,
            "scale": scale,
            "frozen": True,
            "val_miou": best_miou,
            "class_count": seg_cfg.class_count,
            "encoder_channels": list(seg_cfg.encoder_channels),
            "param_hash": parameter_hash(segmenter),
            "train_config": _config_echo(cfg),
        },
        tensors=tensors,
    )
    ckpt = save_checkpoint(state, out_dir / "checkpoint")
    _write_stage_meta(
        out_dir,
        "stage.json",
        {"stage": "segmenter", "val_miou": best_miou, "seconds": time.monotonic() - t0},
    )
    return ckpt


def load_segmenter(path) -> Segmenter:
    state = require_kind(load_checkpoint(path), "segmenter", path)
    seg_cfg = SegmenterConfig(
        class_count=state.meta["class_count"],
        encoder_channels=tuple(state.meta["encoder_channels"]),
    )
    segmenter = Segmenter(seg_cfg)
    unpack_module(segmenter, "f", state.tensors)
    return segmenter.freeze()


# ---------------------------------------------------------------------------
# stage 1: supervised MAE pretraining
# ---------------------------------------------------------------------------


def _pack_generator_state(
    kind: str,
    step: int,
    gen: Generator,
    opt_g: torch.optim.Optimizer,
    cfg: TrainConfig,
    extra_meta: dict | None = None,
    extra_tensors: dict | None = None,
) -> TrainState:
    tensors: dict = dict(extra_tensors or {})
    pack_module(gen, "g", tensors)
    pack_optimizer(opt_g, "opt_g", tensors)
    meta = {
        "kind": kind,
        "step": step,
        "scale": gen.cfg.scale,
        "generator_config": asdict(gen.cfg),
        "train_config": _config_echo(cfg),
    }
    meta.update(extra_meta or {})
    return TrainState(meta=meta, tensors=tensors)


def _config_echo(cfg: TrainConfig) -> dict:
    echo = asdict(cfg)
    echo["weights"] = asdict(cfg.weights)
    return echo


def _restore_generator(state: TrainState, gen_cfg: GeneratorConfig) -> Generator:
    stored = state.meta.get("generator_config", {})
    if stored.get("scale") != gen_cfg.scale:
        raise CheckpointError(
            f"checkpoint was trained at scale {stored.get('scale')}, config wants "
            f"{gen_cfg.scale}; use a cross-scale transfer instead of a plain load"
        )
    gen = Generator(gen_cfg)
    unpack_module(gen, "g", state.tensors)
    return gen


def val_psnr(gen: Generator, data: SplitData, limit: int = 8) -> float:
    gen.eval()
    n = min(limit, len(data))
    vals = []
    with torch.no_grad():
        for i in range(n):
            sr = to_numpy(gen(to_tensor(data.lr[i : i + 1])))[0]
            vals.append(psnr(data.hr[i], sr))
    return float(np.mean(vals))


def pretrain_generator(
    manifest: ds.DatasetManifest,
    cfg: TrainConfig,
    gen_cfg: GeneratorConfig,
    out_dir,
    resume_from=None,
    init_from=None,
) -> Path:
    """Stage-1 training of G with the pixel MAE objective only."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if gen_cfg.scale not in manifest.scales:
        raise ConfigError(f"scale {gen_cfg.scale} not built in dataset (has {manifest.scales})")
    train = SplitData(manifest, "train", gen_cfg.scale)
    val = SplitData(manifest, "val", gen_cfg.scale)

    start_step = 0
    torch.manual_seed(_seeded(cfg.seed, _TAG_INIT_G))
    if resume_from is not None:
        state = require_kind(load_checkpoint(resume_from), "pretrain", resume_from)
        gen = _restore_generator(state, gen_cfg)
        opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.pretrain_lr_g, betas=ADAM_BETAS, eps=ADAM_EPS)
        unpack_optimizer(opt_g, "opt_g", state.tensors)
        start_step = state.step
    else:
        gen = Generator(gen_cfg)
        if init_from is not None:
            lower = load_checkpoint(init_from)
            from .models import transfer_generator

            src_cfg = GeneratorConfig(**lower.meta["generator_config"])
            src = Generator(src_cfg)
            unpack_module(src, "g", lower.tensors)
            gen = transfer_generator(src, gen_cfg)
        opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.pretrain_lr_g, betas=ADAM_BETAS, eps=ADAM_EPS)

    log = RunLog(out_dir / "log.jsonl", resume=start_step > 0)
    t0 = time.monotonic()
    for step in range(start_step, cfg.pretrain_steps):
        gen.train()
        lr_now = lr_schedule(step, cfg.pretrain_lr_g, cfg.lr_decay_factor, cfg.lr_decay_interval)
        _set_lr(opt_g, lr_now)
        batch = train.sample(step, cfg)
        opt_g.zero_grad()
        loss = mae_loss(batch["hr"], gen(batch["lr"]))
        loss.backward()
        opt_g.step()
        _check_finite(float(loss.detach()), "mae", step, out_dir)

        record = {"stage": "pretrain", "step": step, "mae": float(loss.detach()), "lr_g": lr_now}
        if step % cfg.val_interval == cfg.val_interval - 1 or step == cfg.pretrain_steps - 1:
            record["val_psnr"] = val_psnr(gen, val)
        log.write(record)
        if cfg.checkpoint_interval and step % cfg.checkpoint_interval == cfg.checkpoint_interval - 1:
            save_checkpoint(
                _pack_generator_state("pretrain", step + 1, gen, opt_g, cfg), out_dir / "checkpoint"
            )

    final = _pack_generator_state("pretrain", cfg.pretrain_steps, gen, opt_g, cfg)
    ckpt = save_checkpoint(final, out_dir / "checkpoint")
    _write_stage_meta(
        out_dir,
        "stage.json",
        {"stage": "pretrain", "steps": cfg.pretrain_steps, "seconds": time.monotonic() - t0},
    )
    return ckpt


def load_generator(path) -> tuple[Generator, TrainState]:
    state = load_checkpoint(path)
    if state.kind not in ("pretrain", "finetune"):
        raise CheckpointError(f"checkpoint at {path} holds no generator (kind={state.kind!r})")
    gen_cfg = GeneratorConfig(**state.meta["generator_config"])
    gen = Generator(gen_cfg)
    unpack_module(gen, "g", state.tensors)
    return gen, state


# ---------------------------------------------------------------------------
# stage 2: adversarial fine-tuning
# ---------------------------------------------------------------------------


def finetune_gan(
    manifest: ds.DatasetManifest,
    cfg: TrainConfig,
    gen_cfg: GeneratorConfig,
    disc_cfg: DiscriminatorConfig,
    out_dir,
    pretrained_g,
    frozen_f,
    resume_from=None,
) -> Path:
    """Stage-2 alternating D/G training with the weighted three-term loss.

    Per iteration: one D update on (real | x_nn) vs (fake | x_nn) patches
    (power iteration advanced once), then one G update on the weighted sum
    of adversarial, segmentation-feature and MAE terms.  The segmenter is
    frozen throughout; its parameter hash is recorded before and after.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train = SplitData(manifest, "train", gen_cfg.scale)
    val = SplitData(manifest, "val", gen_cfg.scale)

    segmenter = load_segmenter(frozen_f)
    f_hash_start = parameter_hash(segmenter)

    torch.manual_seed(_seeded(cfg.seed, _TAG_INIT_D))
    disc = Discriminator(disc_cfg)
    start_step = 0
    if resume_from is not None:
        state = require_kind(load_checkpoint(resume_from), "finetune", resume_from)
        gen = _restore_generator(state, gen_cfg)
        unpack_module(disc, "d", state.tensors)
        opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.finetune_lr_g, betas=ADAM_BETAS, eps=ADAM_EPS)
        opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.finetune_lr_d, betas=ADAM_BETAS, eps=ADAM_EPS)
        unpack_optimizer(opt_g, "opt_g", state.tensors)
        unpack_optimizer(opt_d, "opt_d", state.tensors)
        start_step = state.step
    else:
        pre = load_checkpoint(pretrained_g)
        if pre.kind not in ("pretrain", "finetune"):
            raise CheckpointError(f"{pretrained_g} is not a generator checkpoint")
        gen = _restore_generator(pre, gen_cfg)
        opt_g = torch.optim.Adam(gen.parameters(), lr=cfg.finetune_lr_g, betas=ADAM_BETAS, eps=ADAM_EPS)
        opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.finetune_lr_d, betas=ADAM_BETAS, eps=ADAM_EPS)

    log = RunLog(out_dir / "log.jsonl", resume=start_step > 0)
    guard_streak = 0
    aborted = None
    t0 = time.monotonic()

    def pack(step: int) -> TrainState:
        tensors: dict = {}
        pack_module(disc, "d", tensors)
        pack_optimizer(opt_d, "opt_d", tensors)
        return _pack_generator_state(
            "finetune",
            step,
            gen,
            opt_g,
            cfg,
            extra_meta={
                "discriminator_config": {
                    "stage_channels": list(disc_cfg.stage_channels),
                    "leaky_slope": disc_cfg.leaky_slope,
                    "input_channels": disc_cfg.input_channels,
                },
                "f_hash_start": f_hash_start,
                "f_hash_end": parameter_hash(segmenter),
                "aborted": aborted,
            },
            extra_tensors=tensors,
        )

    for step in range(start_step, cfg.finetune_steps):
        gen.train()
        disc.train()
        lr_g_now = lr_schedule(step, cfg.finetune_lr_g, cfg.lr_decay_factor, cfg.lr_decay_interval)
        lr_d_now = lr_schedule(step, cfg.finetune_lr_d, cfg.lr_decay_factor, cfg.lr_decay_interval)
        _set_lr(opt_g, lr_g_now)
        _set_lr(opt_d, lr_d_now)

        batch = train.sample(step, cfg)
        hr, lr = batch["hr"], batch["lr"]
        x_nn = F.interpolate(lr, scale_factor=gen_cfg.scale, mode="nearest")

        # -- discriminator update(s)
        d_loss_val = acc = 0.0
        for _ in range(cfg.d_steps_per_g_step):
            disc.advance_power_iteration(1)
            with torch.no_grad():
                fake = gen(lr)
            opt_d.zero_grad()
            logits_real = disc(hr, x_nn)
            logits_fake = disc(fake, x_nn)
            d_loss = discriminator_loss(logits_real, logits_fake)
            d_loss.backward()
            opt_d.step()
            d_loss_val = float(d_loss.detach())
            acc = patch_accuracy(logits_real, logits_fake)
            _check_finite(d_loss_val, "d_loss", step, out_dir)

        # -- generator update
        opt_g.zero_grad()
        x_hat = gen(lr)
        zero = torch.zeros((), dtype=x_hat.dtype)
        gan_term = gan_generator_loss(disc(x_hat, x_nn)) if cfg.weights.alpha != 0 else zero
        if cfg.weights.beta != 0:
            with torch.no_grad():
                f_real = segmenter(hr)
            feat_term = feature_loss(f_real, segmenter(x_hat), cfg.feat_loss)
        else:
            feat_term = zero
        mae_term = mae_loss(hr, x_hat)
        breakdown = total_generator_loss(gan_term, feat_term, mae_term, cfg.weights)
        breakdown.total.backward()
        opt_g.step()
        for term, value in breakdown.floats().items():
            _check_finite(value, term, step, out_dir)

        record = {
            "stage": "finetune",
            "step": step,
            "lr_g": lr_g_now,
            "lr_d": lr_d_now,
            "d_loss": d_loss_val,
            "d_accuracy": acc,
            **{f"g_{k}": v for k, v in breakdown.floats().items()},
        }
        if step % cfg.val_interval == cfg.val_interval - 1 or step == cfg.finetune_steps - 1:
            record["val_psnr"] = val_psnr(gen, val)
        log.write(record)

        guard_streak = guard_streak + 1 if acc > cfg.guard_accuracy else 0
        if guard_streak >= cfg.guard_patience:
            aborted = "divergence_guard"
            _write_stage_meta(
                out_dir,
                "warning.json",
                {
                    "warning": "divergence_guard",
                    "step": step,
                    "detail": f"discriminator accuracy stayed above {cfg.guard_accuracy} "
                    f"for {cfg.guard_patience} consecutive steps",
                },
            )
            save_checkpoint(pack(step + 1), out_dir / "checkpoint")
            break

        if cfg.checkpoint_interval and step % cfg.checkpoint_interval == cfg.checkpoint_interval - 1:
            save_checkpoint(pack(step + 1), out_dir / "checkpoint")

    if aborted is None:
        save_checkpoint(pack(cfg.finetune_steps), out_dir / "checkpoint")

    f_hash_end = parameter_hash(segmenter)
    _write_stage_meta(
        out_dir,
        "stage.json",
        {
            "stage": "finetune",
            "steps": cfg.finetune_steps,
            "aborted": aborted,
            "f_hash_start": f_hash_start,
            "f_hash_end": f_hash_end,
            "f_frozen": f_hash_start == f_hash_end,
            "seconds": time.monotonic() - t0,
        },
    )
    return out_dir / "checkpoint"
