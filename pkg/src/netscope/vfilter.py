"""Virtual filters: second-layer filters expressed in first-layer filter space.

For output channel ``p`` of the second layer, each intermediate channel
``k`` contributes its first-layer filter scaled by the second layer's
largest-magnitude tap on ``k``::

    vf[q, i, j] = sum_k W2[p, k, ti_k, tj_k] * W1[k, q, i, j]
    (ti_k, tj_k) = argmax_{i', j'} |W2[p, k, i', j']|

Nonlinearities between the two layers are ignored, so this is an
approximation for anything but a linear stack.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imageio import minmax, tile, upscale, write_ppm


@dataclass(frozen=True)
class Coupling:
    k: int
    coefficient: float
    i: int
    j: int


@dataclass
class VirtualFilter:
    p: int
    filter: np.ndarray  # (in_channels, kh, kw) of the first layer
    couplings: list[Coupling]  # sorted, strongest first


def argmax_taps(w2_p: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-major-first argmax of |W2[p, k]| for every k; returns (rows, cols)."""
    kk, a, b = w2_p.shape
    flat = np.abs(w2_p).reshape(kk, a * b).argmax(axis=1)
    return flat // b, flat % b


def virtual_filter(w1: np.ndarray, w2: np.ndarray, p: int, sort_by: str = "signed") -> VirtualFilter:
    """Virtual filter of second-layer channel ``p``.

    ``sort_by="signed"`` orders couplings by descending signed coefficient,
    ``"abs"`` by descending magnitude; ties keep ascending ``k``.
    """
    if w2.shape[1] != w1.shape[0]:
        raise ValueError(f"W2 expects {w2.shape[1]} input channels but W1 has {w1.shape[0]} filters "
                         f"(W1{w1.shape}, W2{w2.shape})")
    if not 0 <= p < w2.shape[0]:
        raise IndexError(f"channel {p} outside 0..{w2.shape[0] - 1}")
    if sort_by not in ("signed", "abs"):
        raise ValueError(f"sort_by must be 'signed' or 'abs', got {sort_by!r}")
    rows, cols = argmax_taps(w2[p])
    coef = w2[p, np.arange(w2.shape[1]), rows, cols]
    dtype = np.result_type(w1, w2)
    vf = np.zeros(w1.shape[1:], dtype=dtype)
    for k in range(w1.shape[0]):
        vf += coef[k] * w1[k]
    key = -coef if sort_by == "signed" else -np.abs(coef)
    order = np.argsort(key, kind="stable")
    couplings = [Coupling(int(k), float(coef[k]), int(rows[k]), int(cols[k])) for k in order]
    return VirtualFilter(p, vf, couplings)


def virtual_filter_all(w1: np.ndarray, w2: np.ndarray, sort_by: str = "signed") -> list[VirtualFilter]:
    return [virtual_filter(w1, w2, p, sort_by) for p in range(w2.shape[0])]


def _as_rgb_tiles(f: np.ndarray) -> np.ndarray:
    """Single filter (Q, h, w) -> displayable (1|3, h, w), min-max normalised."""
    if f.shape[0] in (1, 3):
        return minmax(f)
    return tile([minmax(c)[None] for c in f], ncols=f.shape[0], sep=1, sep_value=0.0)


def couplings_tsv(vf: VirtualFilter) -> str:
    lines = ["rank\tk\tcoefficient\ti_tilde\tj_tilde"]
    for rank, c in enumerate(vf.couplings):
        lines.append(f"{rank}\t{c.k}\t{c.coefficient:.9g}\t{c.i}\t{c.j}")
    return "\n".join(lines) + "\n"


def export_vfilter_report(vf: VirtualFilter, w1: np.ndarray, out_dir, scale: int = 8,
                          prefix: str | None = None) -> list[Path]:
    """Write ``<prefix>.ppm`` (the virtual filter), ``<prefix>_sorted.ppm``
    (first-layer filters in coupling order) and ``<prefix>.tsv``."""
    out_dir = Path(out_dir)
    prefix = prefix or f"vfilter_p{vf.p}"
    paths = [out_dir / f"{prefix}.ppm", out_dir / f"{prefix}_sorted.ppm", out_dir / f"{prefix}.tsv"]
    write_ppm(paths[0], upscale(_as_rgb_tiles(vf.filter), scale))
    strip = tile([upscale(_as_rgb_tiles(w1[c.k]), scale) for c in vf.couplings],
                 ncols=min(len(vf.couplings), 16), sep=2)
    write_ppm(paths[1], strip)
    paths[2].write_text(couplings_tsv(vf))
    return paths
