"""Activation maximisation by Adam gradient ascent on the input image."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as G
from .data import WhitenStats, invert_whiten
from .imageio import minmax, upscale, write_ppm
from .rf import ReceptiveField, extract_patch, project

MODES = ("neuron_center", "channel_mean")


@dataclass
class ActMaxConfig:
    layer: str
    channel: int
    mode: str = "neuron_center"
    steps: int = 31
    lr: float = 0.1
    weight_decay: float = 1e-6
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    init: np.ndarray | None = field(default=None, repr=False)  # defaults to a zero image
    input_dims: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 1 or self.lr <= 0 or self.weight_decay < 0:
            raise ValueError("need steps >= 1, lr > 0 and weight_decay >= 0")


@dataclass
class ActMaxResult:
    x_star: np.ndarray  # (1, C, H, W)
    trajectory: list[tuple[int, float, float]]  # (step, objective before the step, l2 norm before the step)
    final_activation: float
    config: ActMaxConfig = field(repr=False)


def _objective(model: G.ModelGraph, config: ActMaxConfig):
    name = model.resolve(config.layer)
    dims = model.output_dims(config.input_dims)[name]
    if len(dims) != 3:
        raise G.GraphError(f"layer {name!r} has no spatial feature map")
    if not 0 <= config.channel < dims[0]:
        raise IndexError(f"channel {config.channel} outside 0..{dims[0] - 1} of {name}")
    if config.mode == "neuron_center":
        return name, G.neuron_objective(config.channel, dims[1] // 2, dims[2] // 2)
    return name, G.channel_mean_objective(config.channel)


def activation_objective(model: G.ModelGraph, x: np.ndarray, config: ActMaxConfig) -> tuple[float, np.ndarray]:
    """Target activation at ``x`` (a single image) and its gradient w.r.t. ``x``."""
    name, objective = _objective(model, config)
    return G.backward_to_input(model, x, name, objective)


def adam_ascent(model: G.ModelGraph, config: ActMaxConfig) -> ActMaxResult:
    """Maximise the target with Adam and decoupled weight decay ``x <- (1 - lr*wd) * x``."""
    dims = tuple(config.input_dims or model.input_dims)
    dtype = next(iter(model.params.values())).dtype
    if config.init is not None:
        x = np.array(config.init, dtype=dtype).reshape(1, *dims)
    else:
        x = np.zeros((1, *dims), dtype)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    b1, b2 = config.beta1, config.beta2
    trajectory = []
    for t in range(1, config.steps + 1):
        value, grad = activation_objective(model, x, config)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            raise FloatingPointError(f"non-finite objective or gradient at step {t - 1}")
        trajectory.append((t - 1, value, float(np.sqrt(np.sum(x.astype(np.float64) ** 2)))))
        g = -grad  # ascent
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        x = x * (1 - config.lr * config.weight_decay)
        x = (x - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)).astype(dtype, copy=False)
    final, _ = activation_objective(model, x, config)
    return ActMaxResult(x, trajectory, final, config)


def target_rf(model: G.ModelGraph, config: ActMaxConfig) -> ReceptiveField:
    """Receptive field of the centre neuron of the target channel's feature map."""
    name = model.resolve(config.layer)
    _, h, w = model.output_dims(config.input_dims)[name]
    return project(model, name, (h // 2, w // 2), config.input_dims)


def trajectory_tsv(result: ActMaxResult) -> str:
    lines = ["step\tobjective\tl2_norm"]
    lines += [f"{s}\t{f:.9g}\t{n:.9g}" for s, f, n in result.trajectory]
    return "\n".join(lines) + "\n"


def export_actmax(result: ActMaxResult, whiten: WhitenStats | None, path, crop: ReceptiveField | None = None,
                  scale: int = 1) -> tuple[Path, Path]:
    """Write the un-whitened, min-max normalised image and ``<stem>.tsv`` with the trajectory."""
    path = Path(path)
    img = result.x_star[0]
    if whiten is not None:
        img = invert_whiten(img, whiten)
    if crop is not None:
        img = extract_patch(img, crop)
    write_ppm(path, upscale(minmax(img), scale))
    tsv = path.with_suffix(".tsv")
    tsv.write_text(trajectory_tsv(result))
    return path, tsv
