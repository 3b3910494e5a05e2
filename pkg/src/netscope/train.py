"""SGD training with momentum, step learning-rate decay and checkpointing."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import graph as G
from . import tensor as T
from .checkpoint import read_checkpoint, save_checkpoint
from .data import Dataset, WhitenStats, apply_whiten, horizontal_flip, random_resized_crop
from .rng import ALGORITHM, stream

log = logging.getLogger(__name__)

METRICS_HEADER = "epoch\tsplit\tloss\ttop1\n"


@dataclass
class TrainConfig:
    lr0: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_drop_factor: float = 10.0
    lr_drop_every: int = 30
    epochs: int = 90
    batch: int = 256
    seed: int = 0
    augment: bool = True
    flip: bool = True
    decay_all: bool = False  # also decay BN gamma/beta and biases
    eval_batch: int = 256
    conv_impl: str = "gemm"

    def __post_init__(self):
        if min(self.lr0, self.lr_drop_factor) <= 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("rates must be positive (momentum and weight decay non-negative)")
        if self.batch < 2:
            raise ValueError("batch must be at least 2 for batch normalisation")
        if self.epochs < 0 or self.lr_drop_every < 1:
            raise ValueError("epochs must be >= 0 and lr_drop_every >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


def lr_at(config: TrainConfig, epoch: int) -> float:
    return config.lr0 / config.lr_drop_factor ** (epoch // config.lr_drop_every)


def sgd_step(model: G.ModelGraph, grads: dict, velocity: dict, config: TrainConfig, epoch: int) -> None:
    """In place: ``v <- m*v + g + wd*theta``; ``theta <- theta - lr*v``."""
    lr = lr_at(config, epoch)
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {name!r}")
    for name, g in grads.items():
        theta = model.params[name]
        step = g.astype(theta.dtype, copy=True)
        if config.weight_decay and (config.decay_all or model.decays(name)):
            step += config.weight_decay * theta
        v = velocity.get(name)
        if v is None:
            v = np.zeros_like(theta)
        v *= config.momentum
        v += step
        velocity[name] = v
        theta -= lr * v


def train_step(model, x, labels, velocity, config, epoch) -> tuple[float, int]:
    values = G.run(model, x, "train")
    logits = values[model.output]
    loss, dlogits = T.softmax_cross_entropy(logits, labels)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
    _, grads = G.backward(model, values, {model.output: dlogits.astype(logits.dtype)}, "train")
    sgd_step(model, grads, velocity, config, epoch)
    return loss, int((logits.argmax(axis=1) == labels).sum())


def evaluate(model: G.ModelGraph, val: Dataset, whiten: WhitenStats | None = None, batch: int = 256,
             hooks_for_batch=None) -> tuple[float, float]:
    """Mean cross-entropy and top-1 accuracy in eval mode.

    ``hooks_for_batch(batch_index)`` may return forward hooks for that batch.
    """
    if len(val) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    total, correct = 0.0, 0
    for b, (start, x, y) in enumerate(val.batches(batch)):
        if whiten is not None:
            x = apply_whiten(x, whiten)
        hooks = hooks_for_batch(b) if hooks_for_batch else None
        logits, _ = G.forward(model, x, "eval", hooks=hooks)
        loss, _ = T.softmax_cross_entropy(logits, y)
        total += loss * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total / len(val), correct / len(val)


def augment_batch(images: np.ndarray, index: np.ndarray, seed: int, epoch: int, flip: bool) -> np.ndarray:
    out = np.empty_like(images)
    hw = images.shape[-2:]
    for k, (img, idx) in enumerate(zip(images, index)):
        rng = stream(seed, epoch, int(idx))
        img = random_resized_crop(img, hw, rng)
        if flip:
            img = horizontal_flip(img, rng)
        out[k] = img
    return out


def epoch_batches(n: int, batch: int, seed: int, epoch: int) -> list[np.ndarray]:
    order = stream(seed, epoch).permutation(n)
    chunks = [order[i : i + batch] for i in range(0, n, batch)]
    return [c for c in chunks if len(c) >= 2]


@dataclass
class TrainResult:
    model: G.ModelGraph
    metrics: list[tuple[int, str, float, float]]
    checkpoint: Path | None


def train(model: G.ModelGraph, train_set: Dataset, val_set: Dataset | None, config: TrainConfig,
          whiten: WhitenStats | None = None, out_dir=None, resume=None) -> TrainResult:
    """Train ``model`` in place.

    Each completed epoch appends ``epoch, split, loss, top1`` rows to
    ``out_dir/metrics.tsv`` and writes ``out_dir/epoch{E:03d}.nsck`` plus
    ``out_dir/last.nsck``.  ``resume`` names a checkpoint written by an
    earlier run; training continues after its epoch.
    """
    out_dir = Path(out_dir) if out_dir else None
    velocity: dict[str, np.ndarray] = {}
    start = 0
    if resume is not None:
        ck = read_checkpoint(resume)
        for k, v in ck.model().params.items():
            model.params[k][...] = v
        velocity = {k: v.copy() for k, v in ck.extras().items() if k in model.params}
        start = int(ck.metadata["epoch"])
        if ck.metadata.get("whiten") and whiten is None:
            whiten = WhitenStats.from_dict(ck.metadata["whiten"])
    metrics = []
    last = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        mpath = out_dir / "metrics.tsv"
        if not mpath.exists() or start == 0:
            mpath.write_text(METRICS_HEADER)
    with T.conv_impl(config.conv_impl):
        for epoch in range(start, config.epochs):
            loss_sum, correct, seen = 0.0, 0, 0
            for index in epoch_batches(len(train_set), config.batch, config.seed, epoch):
                x = train_set.images[index]
                if config.augment:
                    x = augment_batch(x, index, config.seed, epoch, config.flip)
                if whiten is not None:
                    x = apply_whiten(x, whiten)
                loss, ok = train_step(model, x, train_set.labels[index], velocity, config, epoch)
                loss_sum += loss * len(index)
                correct += ok
                seen += len(index)
            rows = [(epoch + 1, "train", loss_sum / max(seen, 1), correct / max(seen, 1))]
            if val_set is not None and len(val_set):
                vl, vt = evaluate(model, val_set, whiten, config.eval_batch)
                rows.append((epoch + 1, "val", vl, vt))
            metrics.extend(rows)
            for r in rows:
                log.info("epoch %d %s loss %.4f top1 %.4f", *r)
            if out_dir:
                with open(out_dir / "metrics.tsv", "a") as fh:
                    for e, split, l, a in rows:
                        fh.write(f"{e}\t{split}\t{l:.6f}\t{a:.6f}\n")
                meta = {
                    "epoch": epoch + 1,
                    "seed": config.seed,
                    "train_config": asdict(config),
                    "rng": ALGORITHM,
                    "whiten": whiten.to_dict() if whiten is not None else None,
                }
                last = out_dir / f"epoch{epoch + 1:03d}.nsck"
                save_checkpoint(model, last, meta, extras=velocity)
                save_checkpoint(model, out_dir / "last.nsck", meta, extras=velocity)
    return TrainResult(model, metrics, last)
