"""Losses, optimizer, schedule, and the two-stage training protocol.

Stage 1 pretrains every parameter on video_like episodes (supports are
jittered near-copies of the query, standing in for video-style
pretraining on effectively unlimited footage). Stage 2 meta-trains only
a strategy-selected parameter set on episodes drawn from a finite
per-class image pool, early-stopped on held-out-class mIoU; the finite
pool is what separates low-capacity adapters from full fine-tuning,
which is free to memorize it.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .checkpoint import _state_arrays
from .data import (SyntheticConfig, SyntheticIndex, episode_rng,
                   generate_synthetic_episode, sample_episode_class_first)
from .errors import ConfigError, ContractError, TrainingError
from .evaluation import MetricsReport, iou_accumulate
from .lora import select_trainable
from .model import FewShotSegmenter


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    lr0: float = 1e-4
    batch: int = 16
    betas: tuple = (0.9, 0.999)
    weight_decay: float = 1e-2
    eps: float = 1e-8
    lr_min: float = 0.0
    w_bce: float = 1.0
    w_dice: float = 1.0
    strategy: str = "lora_enc_mem"
    episodes_per_epoch: int = 128
    patience: int = 10
    train_K: int = 1
    val_episodes: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1 or self.episodes_per_epoch < 1:
            raise ConfigError("epochs, batch, episodes_per_epoch must be >= 1")
        if self.lr0 < 0 or self.lr_min < 0 or self.weight_decay < 0:
            raise ConfigError("learning rates and weight decay must be >= 0")
        if not (0.0 < self.betas[0] < 1.0 and 0.0 < self.betas[1] < 1.0):
            raise ConfigError(f"betas must lie in (0, 1), got {self.betas}")
        if self.w_bce < 0 or self.w_dice < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.train_K < 1 or self.val_episodes < 0 or self.patience < 0:
            raise ConfigError("train_K >= 1, val_episodes >= 0, patience >= 0")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _check_target(logits: Tensor, target) -> np.ndarray:
    t = np.asarray(target, dtype=np.float64)
    if t.shape != logits.shape:
        raise ContractError(f"target shape {t.shape} != logits shape {logits.shape}")
    return t


def bce_loss(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel binary cross-entropy in the stable logit form."""
    return ag.tensor_mean(ag.bce_with_logits(logits, _check_target(logits, target)))


def dice_loss(logits: Tensor, target: np.ndarray, smooth: float = 1.0) -> Tensor:
    """1 - (2*|p*t| + s) / (|p| + |t| + s) with p = sigmoid(logits)."""
    t = _check_target(logits, target)
    p = ag.sigmoid(logits)
    num = ag.add(ag.mul(ag.tensor_sum(ag.mul(p, Tensor(t))), 2.0), smooth)
    den = ag.add(ag.add(ag.tensor_sum(p), float(t.sum())), smooth)
    return ag.add(1.0, ag.mul(ag.div(num, den), -1.0))


def combined_loss(logits: Tensor, target: np.ndarray, w_bce: float = 1.0,
                  w_dice: float = 1.0) -> Tensor:
    if w_bce < 0 or w_dice < 0:
        raise ContractError("loss weights must be >= 0")
    return ag.add(ag.mul(bce_loss(logits, target), w_bce),
                  ag.mul(dice_loss(logits, target), w_dice))


# ---------------------------------------------------------------------------
# optimizer and schedule
# ---------------------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay.

    Parameters are updated in place, the one sanctioned mutation of tensor
    data; the caller must hold exclusive access during step().
    A parameter missing from the gradient table steps with g = 0: moments
    decay and weight decay still applies.
    """

    def __init__(self, params, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 1e-2):
        self.params = list(params)
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]

    def step(self, grads: dict, lr: float):
        if lr < 0:
            raise ContractError(f"lr must be >= 0, got {lr}")
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for i, p in enumerate(self.params):
            g = grads.get(p)
            if g is None:
                g = np.zeros(p.shape)
            elif np.asarray(g).shape != p.shape:
                raise ContractError(f"gradient shape {np.asarray(g).shape} != "
                                    f"parameter shape {p.shape}")
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g * g
            update = (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)
            p.data -= lr * update + lr * self.weight_decay * p.data


def cosine_lr(t: int, total: int, lr0: float, lr_min: float = 0.0) -> float:
    """Cosine decay from lr0 to lr_min over total steps; clamps past the end."""
    if t < 0:
        raise ContractError(f"step {t} negative")
    if total < 1 or t >= total:
        return lr_min if t > 0 else lr0
    return lr_min + 0.5 * (lr0 - lr_min) * (1.0 + math.cos(math.pi * t / total))


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: FewShotSegmenter
    history: list = field(default_factory=list)
    best_metric: float = math.nan
    best_epoch: int = -1
    warning: str = ""


class JsonlLogger:
    def __init__(self, path=None):
        self.path = path
        self.records = []
        if path is not None:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("")

    def write(self, record: dict):
        self.records.append(record)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def _snapshot(model) -> dict:
    return {name: arr.copy() for name, arr in _state_arrays(model)}


def _restore(model, snap: dict):
    for name, arr in _state_arrays(model):
        arr[...] = snap[name]


def _batch_loss(model, episodes, cfg: TrainConfig) -> Tensor:
    total = None
    for ep in episodes:
        logits = model.forward_logits(ep.query_image, ep.support)
        logits = ag.reshape(logits, ep.query_mask.shape)
        loss = combined_loss(logits, ep.query_mask, cfg.w_bce, cfg.w_dice)
        total = loss if total is None else ag.add(total, loss)
    return ag.mul(total, 1.0 / len(episodes))


def _episode_stream(synth: SyntheticConfig, classes, similarity: str, K: int,
                    seed: int):
    """Deterministic unbounded stream of fresh scenes; episode i depends
    only on (seed, i)."""
    i = 0
    while True:
        rng = episode_rng(seed, i)
        class_id = classes[rng.integers(len(classes))]
        yield generate_synthetic_episode(synth, int(class_id), K, similarity, rng)
        i += 1


def _index_stream(index: SyntheticIndex, classes, K: int, seed: int):
    """Deterministic unbounded stream over a finite image pool; episode i
    depends only on (seed, i)."""
    i = 0
    while True:
        yield sample_episode_class_first(index, classes, K, episode_rng(seed, i))
        i += 1


def _val_miou(model, episodes) -> float:
    report = MetricsReport()
    for ep in episodes:
        pred = model.segment(ep.query_image, ep.support).mask
        iou_accumulate(report, ep.class_id, pred, ep.query_mask)
    value = report.miou()
    return float("nan") if value is None else value


def _fit(model, trainable, cfg: TrainConfig, stream, val_episodes,
         log: JsonlLogger, select_best) -> TrainResult:
    opt = AdamW(trainable, cfg.betas, cfg.eps, cfg.weight_decay)
    steps_per_epoch = max(1, cfg.episodes_per_epoch // cfg.batch)
    total_steps = cfg.epochs * steps_per_epoch

    best = math.inf
    best_snap = _snapshot(model)
    best_epoch = -1
    stale = 0
    step = 0
    for epoch in range(cfg.epochs):
        epoch_loss = 0.0
        for _ in range(steps_per_epoch):
            lr = cosine_lr(step, total_steps, cfg.lr0, cfg.lr_min)
            batch = [next(stream) for _ in range(cfg.batch)]
            loss = _batch_loss(model, batch, cfg)
            if not np.isfinite(loss.data):
                raise TrainingError(f"non-finite loss at step {step}", step=step)
            opt.step(ag.backward(loss), lr)
            epoch_loss += loss.item()
            step += 1
        metric, val_miou = select_best(model, val_episodes)
        log.write({"epoch": epoch, "step": step,
                   "lr": cosine_lr(step - 1, total_steps, cfg.lr0, cfg.lr_min),
                   "loss": epoch_loss / steps_per_epoch, "val_miou": val_miou})
        if metric < best - 1e-12:
            best, best_epoch, stale = metric, epoch, 0
            best_snap = _snapshot(model)
        else:
            stale += 1
            if stale > cfg.patience:
                break
    _restore(model, best_snap)
    return TrainResult(model, history=log.records, best_metric=best,
                       best_epoch=best_epoch)


def pretrain_base(model: FewShotSegmenter, synth: SyntheticConfig,
                  cfg: TrainConfig, classes, log: JsonlLogger | None = None) -> TrainResult:
    """Train all parameters on video_like episodes; best epoch by val loss."""
    classes = sorted(classes)
    if not classes:
        raise ConfigError("pretraining needs a non-empty class set")
    log = log or JsonlLogger()
    model.set_requires_grad(True)
    trainable = model.parameters()

    val = [ep for ep, _ in zip(
        _episode_stream(synth, classes, "video_like", cfg.train_K,
                        seed=cfg.seed + 500_000), range(cfg.val_episodes))]

    def select_best(m, episodes):
        with ag.no_grad():
            losses = [combined_loss(
                ag.reshape(m.forward_logits(ep.query_image, ep.support),
                           ep.query_mask.shape),
                ep.query_mask, cfg.w_bce, cfg.w_dice).item()
                for ep in episodes]
        return float(np.mean(losses)) if losses else math.inf, _val_miou(m, episodes)

    stream = _episode_stream(synth, classes, "video_like", cfg.train_K,
                             seed=cfg.seed)
    result = _fit(model, trainable, cfg, stream, val, log, select_best)
    model.set_requires_grad(False)
    return result


def meta_train(model: FewShotSegmenter, strategy: str, synth: SyntheticConfig,
               cfg: TrainConfig, train_classes, heldout_classes,
               log: JsonlLogger | None = None,
               images_per_class: int = 8) -> TrainResult:
    """Adapt a pretrained model on class-first episodes drawn from a
    finite image pool of train_classes, early-stopping on held-out-class
    mIoU (higher is better)."""
    train_classes = sorted(train_classes)
    heldout_classes = sorted(heldout_classes)
    if set(train_classes) & set(heldout_classes):
        raise ConfigError("train and held-out classes overlap")
    log = log or JsonlLogger()
    trainable = select_trainable(model, strategy,
                                 np.random.default_rng(cfg.seed))
    log.write({"strategy": strategy,
               "trainable_params": int(sum(t.size for t in trainable))})
    if not trainable:
        log.write({"warning": f"strategy '{strategy}' selects no parameters; no-op"})
        return TrainResult(model, history=log.records,
                           warning="no trainable parameters")

    index = SyntheticIndex(synth, images_per_class)
    val = [ep for ep, _ in zip(
        _index_stream(index, heldout_classes, cfg.train_K,
                      seed=cfg.seed + 700_000), range(cfg.val_episodes))]

    def select_best(m, episodes):
        miou = _val_miou(m, episodes)
        return -miou if not math.isnan(miou) else math.inf, miou

    stream = _index_stream(index, train_classes, cfg.train_K, seed=cfg.seed)
    return _fit(model, trainable, cfg, stream, val, log, select_best)
