"""ADAM with per-step cosine annealing, batching, validation and checkpointing."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import Checkpoint
from .data import Dataset, augment
from .losses import LossConfig, total_loss
from .metrics import psnr, sam_metric
from .model import HyFusion, ModelConfig
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 4
    epochs: int = 50
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_min: float = 0.0
    seed: int = 0
    val_every: int = 1
    fraction: float = 1.0
    grad_clip: float | None = None
    crop: int | None = None
    rotate: bool = True
    shuffle: bool = True

    def __post_init__(self):
        self.betas = tuple(self.betas)
        if self.lr < 0:
            raise ValueError("lr must be non-negative")
        if self.batch < 1 or self.epochs < 0 or self.val_every < 1:
            raise ValueError("batch and val_every must be >= 1, epochs >= 0")
        if not 0 < self.fraction <= 1:
            raise ValueError(f"fraction must lie in (0, 1], got {self.fraction}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown TrainConfig keys: {sorted(unknown)}")
        return cls(**d)


class TrainingDiverged(RuntimeError):
    def __init__(self, msg: str, checkpoint: Checkpoint):
        super().__init__(msg)
        self.checkpoint = checkpoint


def cosine_lr(step: int, total_steps: int, lr0: float, lr_min: float = 0.0) -> float:
    if total_steps <= 0 or step >= total_steps:
        return lr_min if step >= total_steps else lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              betas=(0.9, 0.999), eps: float = 1e-8) -> None:
    """In-place bias-corrected ADAM update; rejects non-finite gradients before touching anything."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype, copy=False)


def _clip_grads(grads: dict[str, np.ndarray], max_norm: float) -> None:
    total = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if total > max_norm:
        for g in grads.values():
            g *= max_norm / total


def _stack(samples, dtype, rng, cfg: TrainConfig, scale: int):
    xs_h, xs_m, ys = [], [], []
    for s in samples:
        if cfg.crop is not None or cfg.rotate:
            x_h, x_m, y = augment(s.x_h, s.x_m, s.y, rng, crop=cfg.crop, rotate=cfg.rotate, scale=scale)
        else:
            x_h, x_m, y = s.x_h, s.x_m, s.y
        xs_h.append(x_h)
        xs_m.append(x_m)
        ys.append(y)
    to = lambda arrs: Tensor(np.stack(arrs).astype(dtype))
    return to(xs_h), to(xs_m), to(ys)


def validate(model: HyFusion, data: Dataset) -> dict[str, float]:
    """Mean PSNR (dB) and SAM (degrees) over ``data``."""
    ps, sams = [], []
    with no_grad():
        for s in data:
            y_star = model(s.x_h, s.x_m).y.data[0]
            ps.append(psnr(s.y, y_star))
            sams.append(sam_metric(s.y, y_star))
    return {"psnr": float(np.mean(ps)), "sam": float(np.mean(sams))}


@dataclass
class TrainResult:
    last: Checkpoint
    best: Checkpoint | None
    log: list[dict]
    best_val_psnr: float = -math.inf


def make_checkpoint(model: HyFusion, state: AdamState, epoch: int, cfg: TrainConfig,
                    loss_cfg: LossConfig, info: dict | None = None) -> Checkpoint:
    names = [n for n, _ in model.named_parameters()]
    return Checkpoint(
        params=model.state_dict(),
        adam_m={n: state.m[n].copy() for n in names if n in state.m},
        adam_v={n: state.v[n].copy() for n in names if n in state.v},
        step=state.t, epoch=epoch, seed=cfg.seed,
        model_config=model.cfg.to_dict(), train_config=cfg.to_dict(),
        loss_config=loss_cfg.to_dict(), info=dict(info or {}),
    )


def restore(checkpoint: Checkpoint, seed: int | None = None) -> tuple[HyFusion, AdamState]:
    model = HyFusion(ModelConfig.from_dict(checkpoint.model_config), seed=checkpoint.seed if seed is None else seed)
    model.load_state_dict(checkpoint.params)
    state = AdamState({k: v.copy() for k, v in checkpoint.adam_m.items()},
                      {k: v.copy() for k, v in checkpoint.adam_v.items()}, checkpoint.step)
    return model, state


def train(model: HyFusion, train_set: Dataset, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
          val_set: Dataset | None = None, resume: Checkpoint | None = None,
          log_path=None, ckpt_dir=None, epochs: int | None = None) -> TrainResult:
    """Train for ``cfg.epochs`` epochs (or stop early after ``epochs`` when resuming in pieces).

    Shuffling and augmentation draw from a generator seeded by ``(seed, epoch)``,
    so a run resumed from an end-of-epoch checkpoint replays the
    uninterrupted run exactly.
    """
    loss_cfg = loss_cfg or LossConfig()
    if len(train_set) == 0:
        raise ValueError("training set is empty")
    data = train_set.subset(cfg.fraction, cfg.seed) if cfg.fraction < 1 else train_set
    params = dict(model.named_parameters())
    dtype = model.cfg.np_dtype
    steps_per_epoch = math.ceil(len(data) / cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch

    state = AdamState()
    start_epoch = 0
    best_psnr, best = -math.inf, None
    if resume is not None:
        model.load_state_dict(resume.params)
        state = AdamState({k: v.copy() for k, v in resume.adam_m.items()},
                          {k: v.copy() for k, v in resume.adam_v.items()}, resume.step)
        start_epoch = resume.epoch
        best_psnr = resume.info.get("best_val_psnr", -math.inf)
    stop_epoch = cfg.epochs if epochs is None else min(cfg.epochs, start_epoch + epochs)

    records: list[dict] = []
    last_good = make_checkpoint(model, state, start_epoch, cfg, loss_cfg, {"best_val_psnr": best_psnr})
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(start_epoch, stop_epoch):
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(len(data)) if cfg.shuffle else np.arange(len(data))
            sums = {"total": 0.0, "l1": 0.0, "sam": 0.0, "swt": 0.0}
            lr = cfg.lr
            for b0 in range(0, len(data), cfg.batch):
                batch = [data[int(i)] for i in order[b0:b0 + cfg.batch]]
                x_h, x_m, y = _stack(batch, dtype, rng, cfg, model.cfg.scale)
                model.zero_grad()
                terms = total_loss(y, model(x_h, x_m).y, loss_cfg, terms=True)
                if not math.isfinite(terms.total.item()):
                    raise TrainingDiverged(f"non-finite loss at step {state.t}", last_good)
                backward(terms.total)
                grads = {n: p.grad for n, p in params.items() if p.grad is not None}
                if cfg.grad_clip is not None:
                    _clip_grads(grads, cfg.grad_clip)
                lr = cosine_lr(state.t, total_steps, cfg.lr, cfg.lr_min)
                adam_step(params, grads, state, lr, cfg.betas, cfg.eps)
                for k, v in terms.as_dict().items():
                    sums[k] += v * len(batch)
            rec = {"epoch": epoch + 1, "step": state.t, "lr": lr,
                   "loss": {k: v / len(data) for k, v in sums.items()}}
            if val_set is not None and len(val_set) and ((epoch + 1) % cfg.val_every == 0 or epoch + 1 == cfg.epochs):
                rec["val"] = validate(model, val_set)
                if rec["val"]["psnr"] > best_psnr:
                    best_psnr = rec["val"]["psnr"]
                    best = make_checkpoint(model, state, epoch + 1, cfg, loss_cfg, {"best_val_psnr": best_psnr})
                    if ckpt_dir:
                        best.save(Path(ckpt_dir) / "best")
            records.append(rec)
            log.info("epoch %d step %d loss %.6g", epoch + 1, state.t, rec["loss"]["total"])
            if log_fh:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
                log_fh.flush()
            last_good = make_checkpoint(model, state, epoch + 1, cfg, loss_cfg, {"best_val_psnr": best_psnr})
            if ckpt_dir:
                last_good.save(Path(ckpt_dir) / "last")
    finally:
        if log_fh:
            log_fh.close()
    return TrainResult(last_good, best, records, best_psnr)


def train_steps(model: HyFusion, sample, steps: int, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
                total_steps: int | None = None) -> list[float]:
    """Fixed-batch optimisation on one sample (no augmentation); returns per-step total loss."""
    loss_cfg = loss_cfg or LossConfig()
    params = dict(model.named_parameters())
    dt = model.cfg.np_dtype
    x_h, x_m, y = (Tensor(np.asarray(a, dtype=dt)[None]) for a in (sample.x_h, sample.x_m, sample.y))
    state = AdamState()
    total_steps = steps if total_steps is None else total_steps
    losses = []
    for _ in range(steps):
        model.zero_grad()
        loss = total_loss(y, model(x_h, x_m).y, loss_cfg)
        losses.append(loss.item())
        backward(loss)
        grads = {n: p.grad for n, p in params.items() if p.grad is not None}
        adam_step(params, grads, state, cosine_lr(state.t, total_steps, cfg.lr, cfg.lr_min), cfg.betas, cfg.eps)
    return losses
