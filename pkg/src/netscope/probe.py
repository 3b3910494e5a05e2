"""Inactive channels and the noise-injection loss experiment."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as G
from .data import Dataset, WhitenStats, apply_whiten
from .rng import stream
from .train import evaluate

NOISE_MODES = ("all", "random_one")


@dataclass
class InactiveReport:
    layer: str
    inactive: list[int]
    max_activation: np.ndarray  # per channel, over every image and position
    dataset_hash: str

    def tsv(self) -> str:
        lines = ["channel\tmax_activation\tinactive"]
        dead = set(self.inactive)
        for c, v in enumerate(self.max_activation):
            lines.append(f"{c}\t{float(v):.9g}\t{int(c in dead)}")
        return "\n".join(lines) + "\n"


@dataclass
class NoiseEvalResult:
    clean_loss: float
    noised_loss: float
    delta: float
    mode: str
    seed: int
    batch_channels: list[list[int]] = field(default_factory=list)

    def tsv(self) -> str:
        return ("mode\tseed\tclean_loss\tnoised_loss\tdelta\n"
                f"{self.mode}\t{self.seed}\t{self.clean_loss:.9g}\t{self.noised_loss:.9g}\t{self.delta:.9g}\n")


def dataset_hash(ds: Dataset) -> str:
    h = hashlib.sha256()
    h.update("\n".join(ds.ids).encode())
    h.update(np.ascontiguousarray(ds.images, dtype=np.float32).tobytes())
    return h.hexdigest()[:16]


def find_inactive(model: G.ModelGraph, dataset: Dataset, layer: str = "stem.maxpool",
                  whiten: WhitenStats | None = None, batch: int = 64) -> InactiveReport:
    """Channels whose output is exactly zero for every image and position."""
    if len(dataset) == 0:
        raise ValueError("find_inactive needs a non-empty dataset")
    name = model.resolve(layer)
    peak = None
    for _, x, _ in dataset.batches(batch):
        if whiten is not None:
            x = apply_whiten(x, whiten)
        act = G.run(model, x, "eval", stop_at=name)[name]
        m = act.max(axis=(0, 2, 3))
        peak = m if peak is None else np.maximum(peak, m)
    inactive = [int(c) for c in np.flatnonzero(peak == 0.0)]
    return InactiveReport(name, inactive, peak, dataset_hash(dataset))


def inject_noise(fmap: np.ndarray, channels, rng: np.random.Generator) -> np.ndarray:
    """Add ``max(g, 0)``, ``g ~ N(0, 1)`` i.i.d. per sample and position, on ``channels``."""
    channels = list(channels)
    out = fmap.copy()
    if not channels:
        return out
    n, _, h, w = fmap.shape
    g = rng.standard_normal((n, len(channels), h, w))
    out[:, channels] += np.maximum(g, 0).astype(fmap.dtype)
    return out


def eval_noised(model: G.ModelGraph, dataset: Dataset, report: InactiveReport, mode: str = "all",
                seed: int = 0, whiten: WhitenStats | None = None, batch: int = 64) -> NoiseEvalResult:
    """Validation loss with noise injected at ``report.layer`` minus the clean loss.

    Batch ``b`` draws from ``stream(seed, b)``; in ``random_one`` mode that
    stream first picks one channel of the report, then the noise.
    """
    if mode not in NOISE_MODES:
        raise ValueError(f"mode must be one of {NOISE_MODES}, got {mode!r}")
    if mode == "random_one" and not report.inactive:
        raise ValueError("random_one mode needs at least one inactive channel")
    chosen: list[list[int]] = []

    def hooks(b):
        rng = stream(seed, b)
        if mode == "all":
            channels = list(report.inactive)
        else:
            channels = [report.inactive[int(rng.integers(len(report.inactive)))]]
        chosen.append(channels)
        return {report.layer: lambda y: inject_noise(y, channels, rng)}

    clean, _ = evaluate(model, dataset, whiten, batch)
    noised, _ = evaluate(model, dataset, whiten, batch, hooks_for_batch=hooks)
    return NoiseEvalResult(clean, noised, noised - clean, mode, seed, chosen)


def write_report(path, report: InactiveReport) -> None:
    Path(path).write_text(report.tsv())
