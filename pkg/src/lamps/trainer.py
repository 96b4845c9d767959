"""Cyclic student-teacher pretraining over the three perspectives."""
from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from .backbone import (
    EncoderConfig,
    ModelPair,
    PatchEncoder,
    load_checkpoint,
    pool_global,
    save_checkpoint,
)
from .geometry import (
    ConfigError,
    CropRatioSchedule,
    crop_ratio,
    make_grid,
    mask_from_pair,
    sample_crop_pair,
    sample_permutation,
    sample_ratio_crop,
    shuffle_cells,
    split_quadrants,
)
from .heads import CompDecompHead, ExtrapolationDecoder, OrderClassifier
from .losses import LossBreakdown, loss_comp_decomp, loss_extrap, loss_shuffle

log = logging.getLogger(__name__)


class Perspective(str, Enum):
    EXTRAP = "extrap"
    SHUFFLE = "shuffle"
    COMPDECOMP = "compdecomp"


SCHEDULE_MODES = ("cyclic", "direct_sum", "single:extrap", "single:shuffle", "single:compdecomp")
LOG_FIELDS = [
    "epoch", "step", "perspective", "total", "lr", "momentum",
    "l1_masked", "ce_order", "mse_consistency", "comp", "decomp",
]


def select_perspective(epoch: int, mode: str) -> tuple[Perspective, ...]:
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    if mode == "cyclic":
        return ((Perspective.EXTRAP, Perspective.SHUFFLE, Perspective.COMPDECOMP)[epoch % 3],)
    if mode == "direct_sum":
        return (Perspective.EXTRAP, Perspective.SHUFFLE, Perspective.COMPDECOMP)
    if mode.startswith("single:"):
        return (Perspective(mode.split(":", 1)[1]),)
    raise ConfigError(f"unknown schedule_mode {mode!r}; expected one of {SCHEDULE_MODES}")


@dataclass
class TrainConfig:
    epochs: int = 30
    schedule_mode: str = "cyclic"
    batch_size: int = 64
    base_lr: float = 5e-4  # at batch 256, scaled linearly
    min_lr: float = 1e-6
    warmup_epochs: int = 10
    weight_decay: float = 0.04
    seed: int = 0
    image_pixels: int = 144
    grid_size: int = 18
    n1: int = 14
    n2: int = 11
    lam: float = 0.1
    r_min: float = 0.4
    t_schedule: list = field(default_factory=lambda: [[0, 20.0], [50, 60.0]])
    base_m: float = 0.996
    final_m: float = 1.0
    allow_identity: bool = False
    decoder_layers: int = 8
    decoder_heads: int = 2
    comp_hidden: int | None = None
    comp_linear: bool = False
    checkpoint_every: int = 1
    phantom_images: int = 2000
    phantom_seed: int = 0
    encoder: EncoderConfig | dict | None = None

    def __post_init__(self):
        grid = make_grid(self.image_pixels, self.grid_size)
        if self.encoder is None:
            self.encoder = EncoderConfig.preset("tiny", grid.cell_pixels)
        elif isinstance(self.encoder, dict):
            # preset of the named variant, overridden key by key
            values = dict(self.encoder)
            base = dataclasses.asdict(EncoderConfig.preset(values.get("variant", "tiny"), grid.cell_pixels))
            unknown = set(values) - set(base)
            if unknown:
                raise ConfigError(f"unknown encoder keys: {sorted(unknown)}")
            base.update(values)
            self.encoder = _build(EncoderConfig, base, "encoder")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not self.n2 < self.n1 <= self.grid_size:
            raise ConfigError(f"need n2 < n1 <= grid_size, got n1={self.n1}, n2={self.n2}")
        if self.schedule_mode not in SCHEDULE_MODES:
            raise ConfigError(f"unknown schedule_mode {self.schedule_mode!r}; expected one of {SCHEDULE_MODES}")
        if not 0 < self.r_min <= 1:
            raise ConfigError(f"r_min must be in (0, 1], got {self.r_min}")
        if grid.cell_pixels != self.encoder.cell_pixels:
            raise ConfigError(
                f"encoder.cell_pixels={self.encoder.cell_pixels} but grid gives {grid.cell_pixels}"
            )
        self.t_schedule = [[int(e), float(t)] for e, t in self.t_schedule]
        CropRatioSchedule(tuple(map(tuple, self.t_schedule)))

    @property
    def grid(self):
        return make_grid(self.image_pixels, self.grid_size)

    @property
    def crop_schedule(self) -> CropRatioSchedule:
        return CropRatioSchedule(tuple(map(tuple, self.t_schedule)))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def diff(self, other: "TrainConfig") -> list[str]:
        a, b = self.to_dict(), other.to_dict()
        return sorted(k for k in a if a[k] != b.get(k))


def _build(cls, values: dict, where: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown {where} keys: {sorted(unknown)}")
    try:
        return cls(**values)
    except TypeError as exc:
        raise ConfigError(f"bad {where} section: {exc}") from None


def config_from_dict(values: dict) -> TrainConfig:
    return _build(TrainConfig, dict(values or {}), "config")


def load_config(path: str | Path) -> TrainConfig:
    with open(path) as fh:
        values = yaml.safe_load(fh) or {}
    if not isinstance(values, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(values)


def dump_config(config: TrainConfig, path: str | Path) -> None:
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))


class TrainingDiverged(RuntimeError):
    pass


def _crop(images: torch.Tensor, boxes) -> torch.Tensor:
    return torch.stack([images[i, :, t : t + s, l : l + s] for i, (t, l, s) in enumerate(boxes)])


class Trainer:
    """Owns the model pair, heads, optimizer and RNG; one instance per run."""

    def __init__(self, config: TrainConfig, steps_per_epoch: int):
        self.config = config
        self.grid = config.grid
        self.steps_per_epoch = steps_per_epoch
        torch.manual_seed(config.seed)
        student = PatchEncoder(config.encoder)
        d = config.encoder.embed_dim
        self.pair = ModelPair(
            student, config.base_m, config.final_m, total_steps=config.epochs * steps_per_epoch
        )
        self.heads = nn.ModuleDict(
            {
                "head1": ExtrapolationDecoder(
                    d, config.n1, config.decoder_layers, config.decoder_heads, config.encoder.mlp_ratio
                ),
                "head2": OrderClassifier(d, config.n1 * config.n1),
                "head3": CompDecompHead(d, config.comp_hidden, config.comp_linear),
            }
        )
        decay, no_decay = [], []
        for p in list(self.pair.student.parameters()) + list(self.heads.parameters()):
            (decay if p.ndim > 1 else no_decay).append(p)
        self.optimizer = torch.optim.AdamW(
            [{"params": decay, "weight_decay": config.weight_decay}, {"params": no_decay, "weight_decay": 0.0}],
            lr=0.0,
        )
        self.rng = np.random.default_rng(config.seed)
        self.epoch = 0
        self.global_step = 0
        self.momentum_override: float | None = None

    @property
    def student(self):
        return self.pair.student

    @property
    def teacher(self):
        return self.pair.teacher

    def learning_rate(self, step: int) -> float:
        c = self.config
        peak = c.base_lr * c.batch_size / 256
        warmup = c.warmup_epochs * self.steps_per_epoch
        total = c.epochs * self.steps_per_epoch
        if step < warmup:
            return peak * (step + 1) / warmup
        progress = (step - warmup) / max(1, total - warmup)
        return c.min_lr + (peak - c.min_lr) * 0.5 * (1 + math.cos(math.pi * min(progress, 1.0)))

    # perspective branches

    def _extrap(self, images: torch.Tensor) -> LossBreakdown:
        c, cell = self.config, self.grid.cell_pixels
        outer_boxes, inner_boxes, masks = [], [], []
        for _ in range(images.shape[0]):
            c1, c2 = sample_crop_pair(self.grid, c.n1, c.n2, self.rng)
            outer_boxes.append(c1.pixel_box(cell))
            inner_boxes.append(c2.pixel_box(cell))
            masks.append(mask_from_pair(c1, c2).flags)
        mask = torch.from_numpy(np.stack(masks))
        with torch.no_grad():
            e_t = self.teacher(_crop(images, outer_boxes))
        e_s = self.heads["head1"](self.student(_crop(images, inner_boxes)), mask)
        return loss_extrap(e_s, e_t, mask)

    def _shuffle(self, images: torch.Tensor) -> LossBreakdown:
        c, cell = self.config, self.grid.cell_pixels
        boxes, orders = [], []
        n_tokens = c.n1 * c.n1
        for _ in range(images.shape[0]):
            c1, _ = sample_crop_pair(self.grid, c.n1, c.n2, self.rng)
            boxes.append(c1.pixel_box(cell))
            orders.append(sample_permutation(n_tokens, self.rng, c.allow_identity).order)
        crops = _crop(images, boxes)
        order = torch.from_numpy(np.stack(orders))
        with torch.no_grad():
            e_t = self.teacher(crops)
        e_s = self.student(shuffle_cells(crops, order, cell))
        logits = self.heads["head2"](e_s)
        return loss_shuffle(logits, order, e_s, e_t, c.lam)

    def _compdecomp(self, images: torch.Tensor) -> LossBreakdown:
        c, cell = self.config, self.grid.cell_pixels
        r = crop_ratio(self.epoch, c.crop_schedule, c.r_min)
        side = 2 * math.ceil(c.n1 / 2) * cell
        crops = []
        for i in range(images.shape[0]):
            top, left, s = sample_ratio_crop(self.grid.image_pixels, r, self.rng)
            crop = images[i : i + 1, :, top : top + s, left : left + s]
            if s != side:
                crop = F.interpolate(crop, size=(side, side), mode="bilinear", align_corners=False)
            crops.append(crop)
        whole = torch.cat(crops)
        b = whole.shape[0]
        quads = torch.cat(split_quadrants(whole))  # (4B, ...) quadrant-major
        with torch.no_grad():
            t_global = pool_global(self.teacher(whole))
            t_subs = pool_global(self.teacher(quads)).reshape(4, b, -1).transpose(0, 1)
        s_subs = pool_global(self.student(quads)).reshape(4, b, -1).transpose(0, 1)
        head = self.heads["head3"]
        e_comp = head.compose(s_subs)
        e_decomp = head.decompose(pool_global(self.student(whole)))
        return loss_comp_decomp(e_comp, t_global, e_decomp, t_subs)

    def train_step(self, images: torch.Tensor, perspectives: tuple[Perspective, ...]) -> LossBreakdown:
        """One optimizer step on the student and the active heads, then the EMA update."""
        self.student.train()
        branches = {
            Perspective.EXTRAP: self._extrap,
            Perspective.SHUFFLE: self._shuffle,
            Perspective.COMPDECOMP: self._compdecomp,
        }
        result = None
        for p in perspectives:
            part = branches[p](images)
            result = part if result is None else result.merged(part)
        values = {"total": float(result.total.detach()), **result.components}
        if not all(math.isfinite(v) for v in values.values()):
            raise TrainingDiverged(
                f"non-finite loss at epoch {self.epoch} step {self.global_step} "
                f"({'+'.join(p.value for p in perspectives)}): {values}"
            )
        lr = self.learning_rate(self.global_step)
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.zero_grad(set_to_none=True)
        result.total.backward()
        # inactive heads keep grad=None, so AdamW leaves them (and their state) untouched
        self.optimizer.step()
        m = self.pair.update_teacher(self.momentum_override)
        result.components.update(lr=lr, momentum=m)
        self.global_step += 1
        return result

    # persistence

    def state_payload(self) -> dict:
        head_params = {
            f"{name}/{key}": value
            for name, module in self.heads.items()
            for key, value in module.state_dict().items()
        }
        return {
            "encoder_config": dataclasses.asdict(self.config.encoder),
            "student_params": self.student.state_dict(),
            "teacher_params": self.teacher.state_dict(),
            "momentum_state": self.pair.momentum_state(),
            "trainer_state": {
                "epoch": self.epoch,
                "global_step": self.global_step,
                "steps_per_epoch": self.steps_per_epoch,
                "config": self.config.to_dict(),
                "head_params": head_params,
                "optimizer": self.optimizer.state_dict(),
                "rng_state": self.rng.bit_generator.state,
            },
            "rng_seed": self.config.seed,
        }

    def save(self, path: str | Path) -> Path:
        return save_checkpoint(path, self.state_payload())

    def load(self, path: str | Path) -> None:
        archive = load_checkpoint(path)
        state = archive["trainer_state"]
        saved = config_from_dict(state["config"])
        differing = self.config.diff(saved)
        if differing:
            raise ConfigError(f"resume config differs from checkpoint in: {', '.join(differing)}")
        if state["steps_per_epoch"] != self.steps_per_epoch:
            raise ConfigError(
                f"dataset gives {self.steps_per_epoch} steps/epoch, checkpoint has {state['steps_per_epoch']}"
            )
        self.student.load_state_dict(archive["student_params"])
        self.teacher.load_state_dict(archive["teacher_params"])
        self.pair.load_momentum_state(archive["momentum_state"])
        for name, module in self.heads.items():
            prefix = f"{name}/"
            module.load_state_dict(
                {k[len(prefix):]: v for k, v in state["head_params"].items() if k.startswith(prefix)}
            )
        self.optimizer.load_state_dict(state["optimizer"])
        self.rng.bit_generator.state = state["rng_state"]
        self.epoch = state["epoch"]
        self.global_step = state["global_step"]


def _format(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _log_record(epoch: int, step: int, perspectives, breakdown: LossBreakdown) -> dict:
    record = {k: None for k in LOG_FIELDS}
    record.update(
        epoch=epoch,
        step=step,
        perspective="+".join(p.value for p in perspectives),
        total=float(breakdown.total.detach()),
    )
    for key, value in breakdown.components.items():
        if key in record:
            record[key] = value
    return record


def read_loss_log(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def train(
    config: TrainConfig,
    dataset,
    out_dir: str | Path,
    resume: str | Path | None = None,
    progress: bool = False,
) -> Path:
    """Run pretraining; returns the final checkpoint path.

    Writes ``ckpt_epoch{N}.bin`` (N = completed epochs) and an append-only
    ``loss_log.csv`` into ``out_dir``. ``dataset`` is a :class:`lamps.data.Dataset`.
    """
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    images = dataset.tensor()
    if images.shape[-1] != config.image_pixels or images.shape[-2] != config.image_pixels:
        raise ValueError(
            f"dataset images are {tuple(images.shape[-2:])}, config expects {config.image_pixels}^2"
        )
    n = images.shape[0]
    steps_per_epoch = math.ceil(n / config.batch_size)
    trainer = Trainer(config, steps_per_epoch)
    log_path = out_dir / "loss_log.csv"
    if resume is not None:
        trainer.load(resume)
        kept = [r for r in read_loss_log(log_path) if int(r["epoch"]) < trainer.epoch] if log_path.exists() else []
        with open(log_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, LOG_FIELDS)
            writer.writeheader()
            writer.writerows(kept)
    else:
        with open(log_path, "w", newline="") as fh:
            csv.DictWriter(fh, LOG_FIELDS).writeheader()

    last = None
    with open(log_path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, LOG_FIELDS)
        for epoch in range(trainer.epoch, config.epochs):
            trainer.epoch = epoch
            perspectives = select_perspective(epoch, config.schedule_mode)
            order = trainer.rng.permutation(n)
            for start in range(0, n, config.batch_size):
                idx = torch.from_numpy(order[start : start + config.batch_size])
                breakdown = trainer.train_step(images[idx], perspectives)
                record = _log_record(epoch, trainer.global_step - 1, perspectives, breakdown)
                writer.writerow({k: _format(v) for k, v in record.items()})
            fh.flush()
            trainer.epoch = epoch + 1
            if progress:
                log.info("epoch %d/%d %s loss %.4f", epoch + 1, config.epochs,
                         record["perspective"], record["total"])
            if trainer.epoch % config.checkpoint_every == 0 or trainer.epoch == config.epochs:
                last = trainer.save(out_dir / f"ckpt_epoch{trainer.epoch}.bin")
    if last is None:
        last = trainer.save(out_dir / f"ckpt_epoch{trainer.epoch}.bin")
    return last
