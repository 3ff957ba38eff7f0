"""Feature providers and trainable residual adaptation layers.

A feature provider maps an 8-bit raster to one or two (h, w, d) grids of
local descriptors: a fine level and an optional coarse level at half the
fine resolution. `ToyBackbone` is a frozen, randomly initialized
convolutional tower serving as a desk-scale provider; real descriptors can
be supplied instead through `load_feature_grid`, which reads exported SFG1
tensors. Providers are deterministic given their seed and the input.

Adaptation blocks specialize provider features for matching: a single
same-size convolution, per-channel normalization, and a rectifier, added
residually onto the input. The normalization's scale/shift initialize to
zero, so an untrained block is exactly the identity and matching starts
from raw provider features.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffops, tape
from .fileio import load_grid
from .tape import Variable, lift

__all__ = ["ConvLayer", "conv2d", "AdaptationBlock", "ToyBackbone", "load_feature_grid"]

load_feature_grid = load_grid


@dataclass
class ConvLayer:
    """Odd-sized square convolution kernel (k, k, c_in, c_out) plus bias."""

    kernel: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.kernel.ndim != 4 or self.kernel.shape[0] != self.kernel.shape[1]:
            raise ValueError(f"kernel must be (k, k, c_in, c_out), got {self.kernel.shape}")
        if self.kernel.shape[0] % 2 == 0:
            raise ValueError("kernel size must be odd")
        if self.bias.shape != (self.kernel.shape[3],):
            raise ValueError(f"bias shape {self.bias.shape} does not match {self.kernel.shape[3]} outputs")
        if not (np.isfinite(self.kernel).all() and np.isfinite(self.bias).all()):
            raise ValueError("layer weights must be finite")


def conv2d(grid, layer: ConvLayer):
    """Same-size zero-padded cross-correlation of a feature grid."""
    g = lift(grid)
    if g.ndim != 3:
        raise ValueError(f"expected (h, w, d) feature grid, got shape {g.shape}")
    if g.shape[2] != layer.kernel.shape[2]:
        raise ValueError(f"grid depth {g.shape[2]} does not match layer input depth {layer.kernel.shape[2]}")
    out = diffops.conv2d_samepad(g, layer.kernel, layer.bias)
    return out if isinstance(grid, Variable) else out.value


class AdaptationBlock:
    """Trainable residual block: conv -> normalize -> rectify -> add input.

    Normalization uses per-channel statistics over the grids of the current
    call while training (running statistics track them with `momentum`);
    evaluation, and training calls with a single grid, use the stored
    running statistics.
    """

    PARAM_NAMES = ("kernel", "bias", "gamma", "shift")

    def __init__(self, channels: int, kernel_size: int = 5, seed: int = 0,
                 bn_eps: float = 1e-5, momentum: float = 0.1):
        rng = np.random.default_rng(seed)
        fan_in = kernel_size * kernel_size * channels
        self.kernel = rng.standard_normal(
            (kernel_size, kernel_size, channels, channels)) * np.sqrt(2.0 / fan_in)
        self.bias = np.zeros(channels)
        # zero scale/shift: the residual branch starts exactly at zero
        self.gamma = np.zeros(channels)
        self.shift = np.zeros(channels)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.bn_eps = bn_eps
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.kernel.shape[2]

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.PARAM_NAMES}

    def set_params(self, arrays: dict) -> None:
        for name in self.PARAM_NAMES:
            current = getattr(self, name)
            incoming = np.asarray(arrays[name], dtype=np.float64)
            if incoming.shape != current.shape:
                raise ValueError(f"parameter {name}: shape {incoming.shape} != {current.shape}")
            setattr(self, name, incoming.copy())

    def forward(self, grids: list, params: dict | None = None,
                training: bool = False) -> list[Variable]:
        """Adapt a batch of same-shape feature grids; returns tape Variables.

        `params` optionally supplies tape leaves for the trainable arrays so
        gradients reach them; otherwise the stored arrays enter as constants.
        """
        p = params if params is not None else {k: lift(v) for k, v in self.param_arrays().items()}
        grids = [lift(g) for g in grids]
        for g in grids:
            if g.ndim != 3 or g.shape[2] != self.channels:
                raise ValueError(f"expected (h, w, {self.channels}) grids, got {g.shape}")
        conv_outs = [diffops.conv2d_samepad(g, p["kernel"], p["bias"]) for g in grids]

        if training and len(grids) >= 2:
            if len({g.shape for g in grids}) != 1:
                raise ValueError("batch statistics need equal grid shapes")
            stacked = tape.stack(conv_outs, axis=0)
            count = float(np.prod(stacked.shape[:3]))
            mean = tape.div(tape.summation(stacked, axis=(0, 1, 2)), count)
            centered = tape.sub(stacked, mean)
            var = tape.div(tape.summation(tape.square(centered), axis=(0, 1, 2)), count)
            scale = tape.div(1.0, tape.sqrt(tape.add(var, self.bn_eps)))
            normalized = tape.mul(centered, scale)
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mean.value
            self.running_var = (1 - m) * self.running_var + m * var.value
            per_grid = [normalized[i] for i in range(len(grids))]
        else:
            scale = 1.0 / np.sqrt(self.running_var + self.bn_eps)
            per_grid = [tape.mul(tape.sub(co, self.running_mean), scale) for co in conv_outs]

        out = []
        for g, xhat in zip(grids, per_grid):
            residual = tape.relu(tape.add(tape.mul(xhat, p["gamma"]), p["shift"]))
            out.append(tape.add(g, residual))
        return out

    def adapt_one(self, grid, training: bool = False):
        """Single-grid convenience wrapper around forward()."""
        out = self.forward([lift(grid)], training=training)[0]
        return out if isinstance(grid, Variable) else out.value


def adapt(grid, block: AdaptationBlock, training: bool = False):
    """Apply an adaptation block to one feature grid."""
    return block.adapt_one(grid, training=training)


def _conv_edge(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Eager same-size conv with edge padding (keeps constants constant)."""
    k = kernel.shape[0]
    pad = k // 2
    h, w, c_in = x.shape
    padded = np.pad(x, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
    ys, xs = np.mgrid[0:h, 0:w]
    oy, ox = np.mgrid[0:k, 0:k]
    patches = padded[ys[:, :, None, None] + oy, xs[:, :, None, None] + ox]
    cols = patches.reshape(h * w, k * k * c_in)
    return (cols @ kernel.reshape(k * k * c_in, -1)).reshape(h, w, -1) + bias


def _avgpool2(x: np.ndarray) -> np.ndarray:
    h, w, c = x.shape
    return x.reshape(h // 2, 2, w // 2, 2, c).mean(axis=(1, 3))


class ToyBackbone:
    """Frozen random conv tower: image -> (fine, coarse) descriptor grids.

    Four conv+pool stages reduce the image by 16x into the fine grid; one
    more stage gives the coarse grid at 32x. Weights are drawn once from
    the seed and never trained.
    """

    FINE_FACTOR = 16
    COARSE_FACTOR = 32

    def __init__(self, seed: int = 0, widths: tuple = (12, 16, 24, 32),
                 coarse_width: int = 48):
        if len(widths) != 4:
            raise ValueError("widths must list the four stage depths")
        self.seed = int(seed)
        self.widths = tuple(int(w) for w in widths)
        self.coarse_width = int(coarse_width)
        rng = np.random.default_rng(self.seed)
        self._stages = []
        c_in = 3
        for c_out in (*self.widths, self.coarse_width):
            kernel = rng.standard_normal((3, 3, c_in, c_out)) * np.sqrt(2.0 / (9 * c_in))
            self._stages.append((kernel, np.zeros(c_out)))
            c_in = c_out

    @property
    def fine_depth(self) -> int:
        return self.widths[-1]

    @property
    def coarse_depth(self) -> int:
        return self.coarse_width

    def features(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Descriptor grids for one 8-bit grayscale or RGB raster."""
        image = np.asarray(image)
        if image.ndim == 2:
            image = np.repeat(image[:, :, None], 3, axis=2)
        if image.ndim != 3 or image.shape[2] != 3:
            raise ValueError(f"expected (h, w) or (h, w, 3) raster, got shape {image.shape}")
        h, w = image.shape[:2]
        if h % self.COARSE_FACTOR or w % self.COARSE_FACTOR:
            raise ValueError(
                f"image size {w}x{h} must be divisible by {self.COARSE_FACTOR}")
        x = image.astype(np.float64) / 255.0
        for kernel, bias in self._stages[:4]:
            x = _avgpool2(np.maximum(_conv_edge(x, kernel, bias), 0.0))
        fine = x
        kernel, bias = self._stages[4]
        coarse = _avgpool2(np.maximum(_conv_edge(fine, kernel, bias), 0.0))
        return fine, coarse

    def manifest(self) -> dict:
        return {"kind": "toy_backbone", "seed": self.seed,
                "widths": list(self.widths), "coarse_width": self.coarse_width}

    @classmethod
    def from_manifest(cls, data: dict) -> "ToyBackbone":
        if data.get("kind") != "toy_backbone":
            raise ValueError(f"unknown feature provider kind {data.get('kind')!r}")
        return cls(seed=data["seed"], widths=tuple(data["widths"]),
                   coarse_width=data["coarse_width"])


def toy_backbone(image: np.ndarray, seed: int = 0,
                 widths: tuple = (12, 16, 24, 32), coarse_width: int = 48):
    """One-shot helper: build a seeded ToyBackbone and extract features."""
    return ToyBackbone(seed=seed, widths=widths, coarse_width=coarse_width).features(image)
