"""Training loop: Adam, warmup + cosine learning-rate schedule, checkpoints, CSV log."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetIndex, ImagePair, make_batches, scan_dataset_root
from .errors import ConfigError, DataError, NumericError
from .losses import LossWeights, check_ms_ssim_size, total_loss
from .model import URSCT, ModelConfig
from .tensor import Tensor

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "lr", "L_C", "L_gd", "L_M", "L_sum")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    lr: float = 5e-4
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    batch_size: int = 8
    epochs: int = 800
    warmup_epochs: int = 3
    min_lr: float = 1e-6
    # "cosine" (warmup + cosine decay) or "constant"
    schedule: str = "cosine"
    # advance the schedule once per "epoch" or fractionally per "iteration"
    schedule_step: str = "epoch"
    seed: int = 0
    checkpoint_every: int = 50
    train_dir: str = ""
    test_dir: str = ""
    shuffle: bool = True
    hflip: bool = False

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        self.validate()

    def validate(self) -> None:
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.epochs > 0 and not 0 <= self.warmup_epochs < self.epochs:
            raise ConfigError(f"warmup_epochs ({self.warmup_epochs}) must be < epochs ({self.epochs})")
        if not self.lr > self.min_lr >= 0:
            raise ConfigError(f"need lr > min_lr >= 0, got lr={self.lr}, min_lr={self.min_lr}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigError(f"betas must be two values in [0, 1), got {self.betas}")
        if self.schedule not in ("cosine", "constant"):
            raise ConfigError(f"schedule must be 'cosine' or 'constant', got {self.schedule!r}")
        if self.schedule_step not in ("epoch", "iteration"):
            raise ConfigError(f"schedule_step must be 'epoch' or 'iteration', got {self.schedule_step!r}")
        if self.checkpoint_every < 0:
            raise ConfigError("checkpoint_every must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        d["loss"] = self.loss.to_dict()
        d["betas"] = list(self.betas)
        return d


def lr_schedule(e: float, cfg: TrainConfig) -> float:
    """Learning rate at (possibly fractional) epoch ``e`` in [0, epochs].

    Linear ramp from 0 to ``lr`` over the warmup, then cosine decay from
    ``lr`` down to ``min_lr`` at ``e == epochs``.
    """
    if cfg.schedule == "constant":
        return cfg.lr
    if e < cfg.warmup_epochs:
        return cfg.lr * e / cfg.warmup_epochs
    span = cfg.epochs - cfg.warmup_epochs
    progress = min(max((e - cfg.warmup_epochs) / span, 0.0), 1.0) if span > 0 else 1.0
    return cfg.lr - (cfg.lr - cfg.min_lr) * 0.5 * (1.0 - math.cos(math.pi * progress))


def adam_step(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    lr: float,
    betas: tuple[float, float],
    eps: float,
    t: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected Adam update (no weight decay). Returns new (param, m, v)."""
    if t < 1:
        raise ConfigError("Adam step counter starts at 1")
    b1, b2 = betas
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1**t)
    v_hat = v / (1.0 - b2**t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    def __init__(self, named_params, betas=(0.9, 0.999), eps=1e-8):
        self.params: OrderedDict[str, Tensor] = OrderedDict(named_params)
        self.betas, self.eps = tuple(betas), eps
        self.m = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())
        self.v = OrderedDict((k, np.zeros_like(p.data)) for k, p in self.params.items())
        self.t = 0

    def step(self, lr: float) -> None:
        for name, p in self.params.items():
            if p.grad is None:
                raise NumericError(f"parameter {name} received no gradient")
            if not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {name}")
        self.t += 1
        for name, p in self.params.items():
            new, self.m[name], self.v[name] = adam_step(
                p.data, p.grad.astype(p.dtype), self.m[name], self.v[name], lr, self.betas, self.eps, self.t
            )
            p.data = new.astype(p.dtype, copy=False)

    def state(self) -> OrderedDict[str, np.ndarray]:
        out = OrderedDict()
        for k in self.params:
            out[f"m.{k}"] = self.m[k].copy()
            out[f"v.{k}"] = self.v[k].copy()
        return out

    def load_state(self, moments: dict[str, np.ndarray], t: int) -> None:
        for k in self.params:
            try:
                self.m[k] = moments[f"m.{k}"].astype(self.params[k].dtype)
                self.v[k] = moments[f"v.{k}"].astype(self.params[k].dtype)
            except KeyError:
                raise ConfigError(f"checkpoint lacks optimizer moments for {k}") from None
        self.t = t


def _rng_blob(rng: np.random.Generator) -> bytes:
    return json.dumps(rng.bit_generator.state, sort_keys=True).encode("utf-8")


def _restore_rng(blob: bytes) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(blob.decode("utf-8"))
    return rng


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list[dict[str, float]]
    step_losses: list[float]
    model: URSCT


def make_checkpoint(model: URSCT, opt: Adam, epoch: int, rng: np.random.Generator, cfg: TrainConfig) -> Checkpoint:
    return Checkpoint(
        params=model.state_dict(),
        moments=opt.state(),
        step=opt.t,
        epoch=epoch,
        rng_state=_rng_blob(rng),
        config=cfg.to_dict(),
    )


def model_from_checkpoint(ckpt: Checkpoint) -> URSCT:
    try:
        model_cfg = ModelConfig.from_dict(ckpt.config["model"])
    except (KeyError, TypeError):
        raise ConfigError("checkpoint has no usable model config snapshot") from None
    model = URSCT(model_cfg)
    model.load_state_dict(ckpt.params)
    return model.eval()


class _InMemoryIndex:
    """Adapter so a list of ImagePairs can be batched like a DatasetIndex."""

    def __init__(self, pairs: list[ImagePair]):
        self.pairs = pairs

    def __len__(self):
        return len(self.pairs)

    def load(self, i):
        p = self.pairs[i]
        return ImagePair(p.raw.copy(), None if p.reference is None else p.reference.copy(), p.id)


def _resolve_dataset(cfg: TrainConfig, dataset):
    if dataset is None:
        if not cfg.train_dir:
            raise DataError("no training data: set data.train_dir")
        dataset = scan_dataset_root(cfg.train_dir, cfg.model.image_size, full_reference=True)
    elif isinstance(dataset, list):
        dataset = _InMemoryIndex(dataset)
    if len(dataset) == 0:
        raise DataError("training dataset is empty")
    if isinstance(dataset, DatasetIndex) and not dataset.has_references:
        raise DataError("training needs reference images for every raw image")
    if isinstance(dataset, _InMemoryIndex):
        h, w = cfg.model.image_size
        for p in dataset.pairs:
            if p.reference is None:
                raise DataError(f"training pair {p.id} has no reference")
            if p.raw.shape != (3, h, w) or p.reference.shape != (3, h, w):
                raise DataError(f"training pair {p.id} is not 3x{h}x{w}")
    return dataset


def train(
    cfg: TrainConfig,
    dataset=None,
    out_dir: str | Path | None = None,
    resume: Checkpoint | str | Path | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Train a URSCT model.

    ``dataset`` is a DatasetIndex, a list of ImagePair, or None to scan
    ``cfg.train_dir``. With ``out_dir``, periodic checkpoints
    (``epoch_XXXX.ckpt``), ``last.ckpt`` and ``train_log.csv`` are written.
    ``stop_after_epoch`` ends the run early (used to test resumption).
    """
    cfg.validate()
    dataset = _resolve_dataset(cfg, dataset)
    h, w = cfg.model.image_size
    # L_M is logged even when its weight is zero
    check_ms_ssim_size(h, w, cfg.loss.ms_ssim_scales)

    model = URSCT(cfg.model).train()
    opt = Adam(model.named_parameters(), cfg.betas, cfg.adam_eps)
    rng = np.random.default_rng([cfg.seed, 2])
    start_epoch = 0
    if resume is not None:
        ckpt = resume if isinstance(resume, Checkpoint) else load_checkpoint(resume)
        model.load_state_dict(ckpt.params)
        opt.load_state(ckpt.moments, ckpt.step)
        rng = _restore_rng(ckpt.rng_state)
        start_epoch = ckpt.epoch
    model.set_rng(rng)

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        log_path = out / "train_log.csv"
        if resume is None or not log_path.exists():
            with open(log_path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow(LOG_COLUMNS)

    n_batches = math.ceil(len(dataset) / cfg.batch_size)
    history: list[dict[str, float]] = []
    step_losses: list[float] = []
    last = make_checkpoint(model, opt, start_epoch, rng, cfg)
    end_epoch = cfg.epochs if stop_after_epoch is None else min(cfg.epochs, stop_after_epoch)
    for epoch in range(start_epoch, end_epoch):
        sums = dict.fromkeys(("L_C", "L_gd", "L_M", "L_sum"), 0.0)
        batches = make_batches(dataset, cfg.batch_size, cfg.shuffle, seed=[cfg.seed, epoch], hflip=cfg.hflip)
        lr = lr_schedule(epoch + 1, cfg)
        for i, (raw, ref, _) in enumerate(batches):
            if cfg.schedule_step == "iteration":
                lr = lr_schedule(epoch + (i + 1) / n_batches, cfg)
            model.zero_grad()
            try:
                pred = model(Tensor(raw.astype(cfg.model.np_dtype)), clamp=False)
                loss, parts = total_loss(pred, Tensor(ref.astype(cfg.model.np_dtype)), cfg.loss)
                loss.backward()
                opt.step(lr)
            except NumericError as exc:
                raise NumericError(f"epoch {epoch} step {opt.t + 1}: {exc}; last checkpoint retained") from exc
            step_losses.append(parts["L_sum"])
            for k in sums:
                sums[k] += parts[k]
        row = {"epoch": epoch + 1, "lr": lr, **{k: v / n_batches for k, v in sums.items()}}
        history.append(row)
        log.info("epoch %d lr %.3e L_sum %.6f", epoch + 1, lr, row["L_sum"])
        last = make_checkpoint(model, opt, epoch + 1, rng, cfg)
        if out is not None:
            with open(out / "train_log.csv", "a", newline="", encoding="utf-8") as fh:
                csv.writer(fh, lineterminator="\n").writerow([row["epoch"]] + [f"{row[k]:.9g}" for k in LOG_COLUMNS[1:]])
            if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                save_checkpoint(last, out / f"epoch_{epoch + 1:04d}.ckpt")
            save_checkpoint(last, out / "last.ckpt")
    if out is not None and not history:
        save_checkpoint(last, out / "last.ckpt")
    return TrainResult(checkpoint=last, log=history, step_losses=step_losses, model=model)
