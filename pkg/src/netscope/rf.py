"""Receptive-field geometry of graph layers and patch extraction.

A layer's geometry is the triple (size, jump, offset): the side of the input
square seen by one neuron, the input-pixel distance between neighbouring
neurons, and the input coordinate of the centre of neuron (0, 0).  Pixel
``k`` has its centre at coordinate ``k``; offsets can be half-integers.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .graph import INPUT, GraphError, ModelGraph


@dataclass(frozen=True)
class RFGeometry:
    size: int = 1
    jump: int = 1
    offset: float = 0.0
    merged: bool = False  # an add node joined branches of different size

    def __post_init__(self):
        if self.size < 1 or self.jump < 1:
            raise ValueError(f"invalid geometry {self}")


IDENTITY = RFGeometry()


def compose(geom: RFGeometry, kernel: int, stride: int = 1, padding: int = 0) -> RFGeometry:
    if kernel < 1 or stride < 1:
        raise ValueError(f"kernel and stride must be >= 1, got k={kernel}, s={stride}")
    return RFGeometry(
        size=geom.size + (kernel - 1) * geom.jump,
        jump=geom.jump * stride,
        offset=geom.offset + ((kernel - 1) / 2 - padding) * geom.jump,
        merged=geom.merged,
    )


def fold(layers, geom: RFGeometry = IDENTITY) -> RFGeometry:
    """Compose a sequence of ``(kernel, stride, padding)`` triples."""
    for k, s, p in layers:
        geom = compose(geom, k, s, p)
    return geom


def geometries(model: ModelGraph, input_dims=None) -> dict[str, RFGeometry]:
    """Geometry of every layer, propagated through the graph in order.

    At an add node both branches must agree on jump and offset; the larger
    size is kept and the result is marked ``merged`` when sizes differ.
    """
    dims = model.output_dims(input_dims)
    geo = {INPUT: IDENTITY}
    for s in model.layers:
        g = geo[s.inputs[0]]
        if s.kind in ("conv", "maxpool"):
            g = compose(g, s.kernel, s.stride, s.padding)
        elif s.kind == "avgpool":
            h = dims[s.inputs[0]][1]
            g = compose(g, h, 1, 0)
        elif s.kind == "add":
            other = geo[s.inputs[1]]
            if other.jump != g.jump or other.offset != g.offset:
                raise ValueError(f"{s.name}: branches disagree on jump/offset: {g} vs {other}")
            g = RFGeometry(max(g.size, other.size), g.jump, g.offset,
                           g.merged or other.merged or g.size != other.size)
        geo[s.name] = g
    return geo


def geometry_of(model: ModelGraph, layer: str) -> RFGeometry:
    return geometries(model)[model.resolve(layer)]


def geometry_table(model: ModelGraph) -> str:
    """TSV with one row per spatial layer: ``layer, r, jump, c0`` (plus the ``layerN`` alias)."""
    geo = geometries(model)
    alias = {name: f"layer{k}" for k, name in enumerate(model.main_path_convs(), start=1)}
    rows = ["layer\talias\tr\tjump\tc0"]
    for s in model.layers:
        if s.kind == "linear":
            continue
        g = geo[s.name]
        rows.append(f"{s.name}\t{alias.get(s.name, '-')}\t{g.size}\t{g.jump}\t{g.offset:g}")
    return "\n".join(rows) + "\n"


@dataclass(frozen=True)
class ReceptiveField:
    """Input rectangle of one neuron; bounds are inclusive pixel indices."""

    layer: str
    neuron: tuple[int, int]
    top: int
    left: int
    bottom: int
    right: int
    clipped: bool
    size: int

    @property
    def height(self) -> int:
        return self.bottom - self.top + 1

    @property
    def width(self) -> int:
        return self.right - self.left + 1

    def slices(self) -> tuple[slice, slice]:
        return slice(self.top, self.bottom + 1), slice(self.left, self.right + 1)


def rect_from_geometry(geom: RFGeometry, i: int, j: int) -> tuple[int, int, int, int]:
    """Unclipped inclusive rectangle ``(top, left, bottom, right)`` of neuron (i, j)."""
    cy = geom.offset + i * geom.jump
    cx = geom.offset + j * geom.jump
    top = math.floor(cy - (geom.size - 1) / 2)
    left = math.floor(cx - (geom.size - 1) / 2)
    return top, left, top + geom.size - 1, left + geom.size - 1


def project(model: ModelGraph, layer: str, neuron: tuple[int, int], input_dims=None) -> ReceptiveField:
    name = model.resolve(layer)
    input_dims = tuple(input_dims or model.input_dims)
    dims = model.output_dims(input_dims)[name]
    if len(dims) != 3:
        raise GraphError(f"layer {name!r} has no spatial map")
    i, j = neuron
    if not (0 <= i < dims[1] and 0 <= j < dims[2]):
        raise IndexError(f"neuron {neuron} outside {name} map of size {dims[1]}x{dims[2]}")
    geom = geometries(model, input_dims)[name]
    top, left, bottom, right = rect_from_geometry(geom, i, j)
    h, w = input_dims[1], input_dims[2]
    ct, cl = max(top, 0), max(left, 0)
    cb, cr = min(bottom, h - 1), min(right, w - 1)
    clipped = (ct, cl, cb, cr) != (top, left, bottom, right)
    return ReceptiveField(name, (i, j), ct, cl, cb, cr, clipped, geom.size)


def extract_patch(image: np.ndarray, rf: ReceptiveField) -> np.ndarray:
    """Copy of ``image[..., top:bottom+1, left:right+1]``; works for (C,H,W) and (N,C,H,W)."""
    h, w = image.shape[-2:]
    top, left = max(rf.top, 0), max(rf.left, 0)
    bottom, right = min(rf.bottom, h - 1), min(rf.right, w - 1)
    if top > bottom or left > right:
        raise ValueError(f"receptive field {rf} does not intersect a {h}x{w} image")
    return image[..., top : bottom + 1, left : right + 1].copy()
