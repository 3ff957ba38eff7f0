"""End-to-end matcher: feature provider, adaptation, correlation, flow.

`Matcher` owns a frozen feature provider and the trainable adaptation
blocks, and turns an image pair into a flow field via any of the argmax
variants. Checkpoints persist as a directory of named SFG1 tensors plus a
JSON manifest recording shapes, layer order, and seeds; the frozen
provider is reconstructed from its seed rather than stored.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .features import AdaptationBlock, ToyBackbone
from .matching import MatchParams, fused_correlation, hard_flow, kernel_soft_argmax
from .tape import lift

__all__ = ["Matcher", "save_named_tensors", "load_named_tensors"]

ARGMAX_VARIANTS = ("hard", "soft", "kernel")


def save_named_tensors(directory, tensors: dict[str, np.ndarray]) -> dict:
    """Write arrays as SFG1 files (3-D reshaped views); returns the index."""
    from .fileio import save_grid
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    index = {}
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim == 0:
            stored = arr.reshape(1, 1, 1)
        elif arr.ndim == 1:
            stored = arr.reshape(1, 1, -1)
        elif arr.ndim == 2:
            stored = arr[:, :, None]
        elif arr.ndim == 3:
            stored = arr
        else:
            stored = arr.reshape(arr.shape[0], arr.shape[1], -1)
        filename = f"{name}.sfg"
        save_grid(directory / filename, stored)
        index[name] = {"file": filename, "shape": list(arr.shape)}
    return index


def load_named_tensors(directory, index: dict) -> dict[str, np.ndarray]:
    from .fileio import load_grid
    directory = Path(directory)
    out = {}
    for name, entry in index.items():
        arr = load_grid(directory / entry["file"])
        out[name] = arr.reshape(entry["shape"])
    return out


class Matcher:
    """Dense matcher with trainable residual adaptation on frozen features."""

    def __init__(self, backbone: ToyBackbone, fine_block: AdaptationBlock,
                 coarse_block: AdaptationBlock | None,
                 params: MatchParams = MatchParams()):
        self.backbone = backbone
        self.fine_block = fine_block
        self.coarse_block = coarse_block
        self.params = params

    @classmethod
    def create(cls, seed: int = 0, widths: tuple = (12, 16, 24, 32),
               coarse_width: int = 48, params: MatchParams = MatchParams(),
               multi_level: bool = True, fine_kernel: int = 5,
               coarse_kernel: int = 3) -> "Matcher":
        backbone = ToyBackbone(seed=seed, widths=widths, coarse_width=coarse_width)
        fine_block = AdaptationBlock(backbone.fine_depth, fine_kernel, seed=seed + 1)
        coarse_block = (AdaptationBlock(backbone.coarse_depth, coarse_kernel, seed=seed + 2)
                        if multi_level else None)
        return cls(backbone, fine_block, coarse_block, params)

    @property
    def multi_level(self) -> bool:
        return self.coarse_block is not None

    def blocks(self) -> dict[str, AdaptationBlock]:
        out = {"fine": self.fine_block}
        if self.coarse_block is not None:
            out["coarse"] = self.coarse_block
        return out

    def param_arrays(self) -> dict[str, np.ndarray]:
        """Trainable arrays keyed '<level>.<param>'."""
        out = {}
        for prefix, block in self.blocks().items():
            for name, arr in block.param_arrays().items():
                out[f"{prefix}.{name}"] = arr
        return out

    def set_param_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for prefix, block in self.blocks().items():
            block.set_params({name: arrays[f"{prefix}.{name}"]
                              for name in block.PARAM_NAMES})

    def provider_features(self, image: np.ndarray):
        """Frozen (fine, coarse) grids for one raster."""
        return self.backbone.features(image)

    def adapted_levels(self, fine, coarse, params: dict | None = None,
                       training: bool = False) -> list:
        """Adapt one image's grids and bring them to fine resolution.

        `params` optionally maps '<level>.<param>' to tape leaves so the
        output stays differentiable in the adaptation weights.
        """

        def block_params(prefix):
            if params is None:
                return None
            return {name: params[f"{prefix}.{name}"] for name in AdaptationBlock.PARAM_NAMES}

        levels = [self.fine_block.forward([lift(fine)], params=block_params("fine"),
                                          training=training)[0]]
        if self.coarse_block is not None:
            adapted = self.coarse_block.forward([lift(coarse)], params=block_params("coarse"),
                                                training=training)[0]
            h, w = levels[0].shape[:2]
            from .diffops import upsample_bilinear
            levels.append(upsample_bilinear(adapted, h, w))
        return levels

    def eval_levels(self, image: np.ndarray) -> list[np.ndarray]:
        fine, coarse = self.provider_features(image)
        return [lv.value for lv in self.adapted_levels(fine, coarse, training=False)]

    def flow(self, source_image: np.ndarray, target_image: np.ndarray,
             variant: str = "kernel"):
        """Dense flow between two rasters; returns (flow, probability summary)."""
        if variant not in ARGMAX_VARIANTS:
            raise ValueError(f"unknown argmax variant {variant!r}; pick from {ARGMAX_VARIANTS}")
        src = self.eval_levels(source_image)
        tgt = self.eval_levels(target_image)
        fused = fused_correlation(src, tgt, self.params.epsilon)
        if variant == "kernel":
            flow, dist = kernel_soft_argmax(fused, self.params)
        elif variant == "soft":
            flow, dist = kernel_soft_argmax(
                fused, self.params, kernels=np.ones(fused.shape))
        else:
            flow = hard_flow(fused)
            dist = None
        return flow, self._summary(variant, dist)

    @staticmethod
    def _summary(variant: str, dist: np.ndarray | None) -> dict:
        if dist is None:
            return {"variant": variant}
        peak = dist.max(axis=(2, 3))
        entropy = -(dist * np.log(np.maximum(dist, 1e-300))).sum(axis=(2, 3))
        return {
            "variant": variant,
            "peak_probability": {"mean": float(peak.mean()), "min": float(peak.min()),
                                 "max": float(peak.max())},
            "mean_entropy": float(entropy.mean()),
        }

    def grid_shape_for(self, image_shape: tuple[int, int]) -> tuple[int, int]:
        f = self.backbone.FINE_FACTOR
        return image_shape[0] // f, image_shape[1] // f

    # -- persistence ------------------------------------------------------

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = dict(self.param_arrays())
        for prefix, block in self.blocks().items():
            out[f"{prefix}.running_mean"] = block.running_mean
            out[f"{prefix}.running_var"] = block.running_var
        return out

    def save_checkpoint(self, directory, extra: dict | None = None) -> None:
        directory = Path(directory)
        tensors = self.state_tensors()
        index = save_named_tensors(directory, tensors)
        manifest = {
            "kind": "matcher_checkpoint",
            "provider": self.backbone.manifest(),
            "match_params": {"beta": self.params.beta, "sigma": self.params.sigma,
                             "epsilon": self.params.epsilon},
            "multi_level": self.multi_level,
            "fine_kernel_size": int(self.fine_block.kernel.shape[0]),
            "coarse_kernel_size": (int(self.coarse_block.kernel.shape[0])
                                   if self.coarse_block else None),
            "layer_order": list(tensors.keys()),
            "tensors": index,
        }
        if extra:
            manifest.update(extra)
        (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))

    @classmethod
    def load_checkpoint(cls, path) -> tuple["Matcher", dict]:
        """Load from a checkpoint directory or its manifest.json path."""
        path = Path(path)
        manifest_path = path / "manifest.json" if path.is_dir() else path
        directory = manifest_path.parent
        manifest = json.loads(manifest_path.read_text())
        if manifest.get("kind") != "matcher_checkpoint":
            raise ValueError(f"{manifest_path} is not a matcher checkpoint manifest")
        backbone = ToyBackbone.from_manifest(manifest["provider"])
        mp = manifest["match_params"]
        matcher = cls.create(
            seed=backbone.seed, widths=backbone.widths, coarse_width=backbone.coarse_width,
            params=MatchParams(beta=mp["beta"], sigma=mp["sigma"], epsilon=mp["epsilon"]),
            multi_level=manifest["multi_level"],
            fine_kernel=manifest["fine_kernel_size"],
            coarse_kernel=manifest["coarse_kernel_size"] or 3,
        )
        tensors = load_named_tensors(directory, manifest["tensors"])
        matcher.set_param_arrays({k: v for k, v in tensors.items()
                                  if k in matcher.param_arrays()})
        for prefix, block in matcher.blocks().items():
            block.running_mean = tensors[f"{prefix}.running_mean"].copy()
            block.running_var = tensors[f"{prefix}.running_var"].copy()
        return matcher, manifest
