"""Preferred-stimulus mining over a dataset.

For a layer and a set of channels, :func:`scan` records one neuron per
(image, channel) together with its receptive-field rectangle.  Records are
ranked with :func:`topk` and averaged over the positively responding images
with :func:`mean_preferred`.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import graph as G
from .data import Dataset, WhitenStats, apply_whiten, invert_whiten
from .imageio import minmax, tile, upscale, write_ppm
from .rf import ReceptiveField, extract_patch, project

NEURON_MODES = ("center", "max_spatial")
RECORD_FIELDS = ("image_id", "layer", "channel", "i", "j", "activation", "top", "left", "bottom", "right")


@dataclass(frozen=True)
class StimulusRecord:
    image_id: str
    layer: str
    channel: int
    i: int
    j: int
    activation: float
    rf: ReceptiveField

    @property
    def clipped(self) -> bool:
        return self.rf.clipped

    def tsv(self) -> str:
        r = self.rf
        return (f"{self.image_id}\t{self.layer}\t{self.channel}\t{self.i}\t{self.j}\t"
                f"{self.activation:.9g}\t{r.top}\t{r.left}\t{r.bottom}\t{r.right}")


@dataclass
class MeanStimulus:
    mean: np.ndarray | None  # (C, r, r); None when nothing unclipped is positive
    n: int  # |X+|
    n_averaged: int  # members of X+ whose receptive field is unclipped
    inactive_on_dataset: bool


def scan(model: G.ModelGraph, dataset: Dataset, layer: str, channels: Sequence[int] | None = None,
         neuron_mode: str = "center", whiten: WhitenStats | None = None,
         batch: int = 64) -> dict[int, list[StimulusRecord]]:
    """One record per (image, channel), in dataset order."""
    if neuron_mode not in NEURON_MODES:
        raise ValueError(f"neuron_mode must be one of {NEURON_MODES}, got {neuron_mode!r}")
    name = model.resolve(layer)
    dims = model.output_dims()[name]
    if len(dims) != 3:
        raise G.GraphError(f"layer {name!r} has no spatial feature map")
    c, h, w = dims
    channels = list(range(c)) if channels is None else [int(ch) for ch in channels]
    for ch in channels:
        if not 0 <= ch < c:
            raise IndexError(f"channel {ch} outside 0..{c - 1} of {name}")
    rf_cache: dict[tuple[int, int], ReceptiveField] = {}

    def rf_of(i, j):
        if (i, j) not in rf_cache:
            rf_cache[(i, j)] = project(model, name, (i, j))
        return rf_cache[(i, j)]

    out: dict[int, list[StimulusRecord]] = {ch: [] for ch in channels}
    for start, x, _ in dataset.batches(batch):
        if whiten is not None:
            x = apply_whiten(x, whiten)
        act = G.run(model, x, "eval", stop_at=name)[name]
        for b in range(act.shape[0]):
            ident = dataset.ids[start + b]
            for ch in channels:
                fmap = act[b, ch]
                if neuron_mode == "center":
                    i, j = h // 2, w // 2
                else:
                    i, j = divmod(int(np.argmax(fmap)), w)
                out[ch].append(StimulusRecord(ident, name, ch, i, j, float(fmap[i, j]), rf_of(i, j)))
    return out


def topk(records: Sequence[StimulusRecord], k: int = 16) -> list[StimulusRecord]:
    """Highest activations first; equal activations in ascending image-id order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    return sorted(records, key=lambda r: (-r.activation, r.image_id))[:k]


def mean_preferred(records: Sequence[StimulusRecord], images: Mapping[str, np.ndarray]) -> MeanStimulus:
    """Average receptive-field patch over records with strictly positive activation.

    Clipped receptive fields count towards ``n`` but are left out of the
    average.  Patches are summed in image-id order so the result does not
    depend on record order.
    """
    if len({(r.layer, r.channel) for r in records}) > 1:
        raise ValueError("records mix layers or channels")
    positive = sorted((r for r in records if r.activation > 0), key=lambda r: r.image_id)
    usable = [r for r in positive if not r.clipped]
    if not usable:
        return MeanStimulus(None, len(positive), 0, len(positive) == 0)
    total = None
    for r in usable:
        patch = extract_patch(images[r.image_id], r.rf).astype(np.float64)
        total = patch if total is None else total + patch
    return MeanStimulus((total / len(usable)).astype(np.float32), len(positive), len(usable), False)


def images_by_id(dataset: Dataset, whiten: WhitenStats | None = None) -> dict[str, np.ndarray]:
    imgs = dataset.images if whiten is None else apply_whiten(dataset.images, whiten)
    return dict(zip(dataset.ids, imgs))


# ---------------------------------------------------------------------------
# persistence / presentation
# ---------------------------------------------------------------------------

def write_records(path, records: Sequence[StimulusRecord]) -> None:
    lines = ["\t".join(RECORD_FIELDS)] + [r.tsv() for r in records]
    Path(path).write_text("\n".join(lines) + "\n")


def read_records(path) -> list[dict]:
    rows = Path(path).read_text().splitlines()
    header = rows[0].split("\t")
    out = []
    for line in rows[1:]:
        d = dict(zip(header, line.split("\t")))
        for key in ("channel", "i", "j", "top", "left", "bottom", "right"):
            d[key] = int(d[key])
        d["activation"] = float(d["activation"])
        out.append(d)
    return out


def grid_image(records: Sequence[StimulusRecord], images: Mapping[str, np.ndarray],
               whiten: WhitenStats | None = None, scale: int = 1) -> np.ndarray:
    patches, marked = [], []
    for r in records:
        p = extract_patch(images[r.image_id], r.rf)
        if whiten is not None:
            p = invert_whiten(p, whiten)
        patches.append(np.clip(p, 0, 1))
        marked.append(r.clipped)
    return upscale(tile(patches, marked=marked), scale)


def export_grid(records: Sequence[StimulusRecord], images: Mapping[str, np.ndarray], path,
                whiten: WhitenStats | None = None, scale: int = 1) -> None:
    """Tiled PPM of the records' patches (ceil(sqrt(K)) columns, 1-px separators)."""
    write_ppm(path, grid_image(records, images, whiten, scale))


def export_mean(mean: MeanStimulus, path, scale: int = 1) -> bool:
    """Min-max normalised PPM of a mean stimulus; returns False when there is nothing to draw."""
    if mean.mean is None:
        return False
    write_ppm(path, upscale(minmax(mean.mean), scale))
    return True
