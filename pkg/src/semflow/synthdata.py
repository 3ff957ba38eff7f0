"""Self-supervised training pairs from random affine warps of single images.

A pair is built by warping one image (and its foreground mask) with a
random affine transform; the transform itself provides dense ground-truth
correspondence, so no manual annotation enters anywhere.

Coordinate conventions:

* The affine matrix maps normalized target coordinates to normalized
  source coordinates, with (x/(w-1), y/(h-1)) in [0, 1]^2; the target
  image is produced by inverse-warp sampling of the source.
* Ground-truth flow is stored at grid resolution in cell-size units: one
  unit equals image_width/grid_width pixels horizontally (resp. height
  vertically). Ratio-scaled bilinear upsampling to image size therefore
  reproduces pixel displacements exactly, which keeps keypoint transfer
  through the metric path exact for affine pairs.

Pairs persist one directory each: source/target PPM + PGM, the flow as an
SFG1 tensor, the affine as JSON, plus sampled keypoints and the source
foreground box for correspondence metrics. A dataset manifest lists the
pair directories and the generation seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import fileio, grid

__all__ = [
    "AffineParams", "AffineRanges", "TrainingPair",
    "sample_affine", "make_pair", "make_multimask", "make_toy_scene",
    "sample_keypoints", "write_pair", "load_pair", "generate_dataset",
    "load_manifest",
]

_DET_BOUNDS = (0.25, 4.0)


@dataclass(frozen=True)
class AffineParams:
    """2x3 matrix taking normalized target coordinates to source coordinates."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (2, 3):
            raise ValueError(f"affine matrix must be 2x3, got {m.shape}")
        det = abs(np.linalg.det(m[:, :2]))
        if not (_DET_BOUNDS[0] <= det <= _DET_BOUNDS[1]):
            raise ValueError(f"degenerate affine: |det|={det:.4f} outside {_DET_BOUNDS}")
        object.__setattr__(self, "matrix", m)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform (..., 2) normalized points."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.matrix[:, :2].T + self.matrix[:, 2]

    def inverted(self) -> "AffineParams":
        linear = np.linalg.inv(self.matrix[:, :2])
        return AffineParams(np.hstack([linear, -linear @ self.matrix[:, 2:3]]))

    @classmethod
    def identity(cls) -> "AffineParams":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]))


@dataclass(frozen=True)
class AffineRanges:
    """Sampling ranges; rotation/shear in degrees, translation as a size fraction."""

    rotation_deg: float = 15.0
    scale: tuple[float, float] = (0.8, 1.2)
    translation: float = 0.1
    shear_deg: float = 10.0

    @classmethod
    def identity(cls) -> "AffineRanges":
        return cls(rotation_deg=0.0, scale=(1.0, 1.0), translation=0.0, shear_deg=0.0)

    def to_json(self) -> dict:
        return {"rotation_deg": self.rotation_deg, "scale": list(self.scale),
                "translation": self.translation, "shear_deg": self.shear_deg}

    @classmethod
    def from_json(cls, data: dict) -> "AffineRanges":
        return cls(rotation_deg=data["rotation_deg"], scale=tuple(data["scale"]),
                   translation=data["translation"], shear_deg=data["shear_deg"])


def sample_affine(rng: np.random.Generator, ranges: AffineRanges = AffineRanges()) -> AffineParams:
    """Draw rotation, shear, isotropic scale, and translation independently.

    The linear part composes rotation(shear(scale(.))) about the image
    center (0.5, 0.5); the translation adds on top.
    """
    theta = np.deg2rad(rng.uniform(-ranges.rotation_deg, ranges.rotation_deg))
    phi = np.deg2rad(rng.uniform(-ranges.shear_deg, ranges.shear_deg))
    s = rng.uniform(ranges.scale[0], ranges.scale[1])
    t = rng.uniform(-ranges.translation, ranges.translation, size=2)

    rotation = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    shear = np.array([[1.0, np.tan(phi)], [0.0, 1.0]])
    linear = rotation @ shear @ (s * np.eye(2))
    center = np.array([0.5, 0.5])
    offset = center - linear @ center + t
    return AffineParams(np.hstack([linear, offset[:, None]]))


@dataclass
class TrainingPair:
    """One synthetic supervision sample with its dense ground truth."""

    source_image: np.ndarray
    source_mask: np.ndarray
    target_image: np.ndarray
    target_mask: np.ndarray
    grid_flow: np.ndarray        # (gh, gw, 2) source->target, cell-size units
    affine: AffineParams
    flipped: bool = False

    @property
    def image_shape(self) -> tuple[int, int]:
        return self.source_image.shape[:2]

    @property
    def grid_shape(self) -> tuple[int, int]:
        return self.grid_flow.shape[:2]


def _norm_coords(x_px, y_px, height, width):
    return np.stack([x_px / (width - 1), y_px / (height - 1)], axis=-1)


def _px_coords(norm, height, width):
    return norm * np.array([width - 1, height - 1])


def affine_grid_flow(affine: AffineParams, image_shape: tuple[int, int],
                     grid_shape: tuple[int, int]) -> np.ndarray:
    """Analytic source->target flow at grid cells, in cell-size units."""
    h, w = image_shape
    gh, gw = grid_shape
    ys, xs = np.mgrid[0:gh, 0:gw].astype(np.float64)
    px = xs * (w - 1) / (gw - 1)
    py = ys * (h - 1) / (gh - 1)
    inverse = affine.inverted()
    q_px = _px_coords(inverse.apply(_norm_coords(px, py, h, w)), h, w)
    flow_px = q_px - np.stack([px, py], axis=-1)
    return flow_px * np.array([gw / w, gh / h])


def _warp_by_affine(field: np.ndarray, affine: AffineParams) -> np.ndarray:
    """Inverse-warp sampling: output(q) = field(affine(q)), zero outside."""
    h, w = field.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    p_px = _px_coords(affine.apply(_norm_coords(xs, ys, h, w)), h, w)
    return grid.bilinear_sample(field.astype(np.float64), p_px[:, :, 0], p_px[:, :, 1])


def make_pair(image: np.ndarray, mask: np.ndarray, affine: AffineParams,
              grid_shape: tuple[int, int], flip: bool = False) -> TrainingPair:
    """Build a training pair by warping one image and its mask.

    The mask is transformed with the same parameters as the image and
    re-binarized at 0.5. `flip` mirrors the inputs horizontally before
    warping (the generator draws it with probability 0.5).
    """
    image = np.asarray(image)
    mask = np.asarray(mask, dtype=np.float64)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} sizes differ")
    if flip:
        image = image[:, ::-1].copy()
        mask = mask[:, ::-1].copy()
    target_image = _warp_by_affine(image.astype(np.float64), affine)
    target_mask = (_warp_by_affine(mask, affine) >= 0.5).astype(np.float64)
    flow = affine_grid_flow(affine, mask.shape, grid_shape)
    return TrainingPair(
        source_image=np.clip(np.round(image), 0, 255).astype(np.uint8),
        source_mask=(mask >= 0.5).astype(np.float64),
        target_image=np.clip(np.round(target_image), 0, 255).astype(np.uint8),
        target_mask=target_mask,
        grid_flow=flow,
        affine=affine,
        flipped=flip,
    )


def make_multimask(instance_masks: list[np.ndarray]) -> np.ndarray:
    """Pixelwise union of instance masks into one foreground map."""
    if not instance_masks:
        raise ValueError("need at least one instance mask")
    out = np.zeros_like(np.asarray(instance_masks[0], dtype=np.float64))
    for m in instance_masks:
        out = np.maximum(out, np.asarray(m, dtype=np.float64))
    return (out >= 0.5).astype(np.float64)


def sample_keypoints(pair: TrainingPair, rng: np.random.Generator,
                     count: int = 24) -> tuple[np.ndarray, np.ndarray]:
    """Draw foreground correspondences (source px, target px) from the pair.

    Points come from the source foreground; their true matches follow the
    inverse affine. Matches falling outside the target image are dropped.
    """
    h, w = pair.image_shape
    ys, xs = np.nonzero(pair.source_mask > 0.5)
    if xs.size == 0:
        raise ValueError("pair has no foreground to sample keypoints from")
    order = rng.permutation(xs.size)
    inverse = pair.affine.inverted()
    src, tgt = [], []
    for i in order:
        p = np.array([float(xs[i]), float(ys[i])])
        q = _px_coords(inverse.apply(_norm_coords(p[0], p[1], h, w)), h, w)
        if 0 <= q[0] <= w - 1 and 0 <= q[1] <= h - 1:
            src.append(p)
            tgt.append(q)
            if len(src) == count:
                break
    if not src:
        raise ValueError("no keypoint survived the in-bounds filter")
    return np.array(src), np.array(tgt)


# ---------------------------------------------------------------------------
# procedural toy scenes (textured objects on a textured background)


def _cosine_texture(rng, ys, xs, waves: int, wavelength_px: tuple[float, float],
                    amplitude: float) -> np.ndarray:
    out = np.zeros_like(xs)
    for _ in range(waves):
        lam = rng.uniform(*wavelength_px)
        angle = rng.uniform(0, np.pi)
        phase = rng.uniform(0, 2 * np.pi)
        out += amplitude * np.cos(2 * np.pi * (xs * np.cos(angle) + ys * np.sin(angle)) / lam + phase)
    return out


def make_toy_scene(rng: np.random.Generator, height: int, width: int,
                   object_count: int | None = None,
                   margin: float = 0.2) -> tuple[np.ndarray, np.ndarray]:
    """Procedural RGB scene and its foreground mask.

    One to three textured ellipses on a low-frequency textured background;
    object centers keep `margin` (fraction of size) away from the borders
    so moderate warps keep the foreground in frame.
    """
    if object_count is None:
        object_count = int(rng.integers(1, 4))
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    image = np.zeros((height, width, 3))
    base = rng.uniform(60, 140, size=3)
    for ch in range(3):
        image[:, :, ch] = base[ch] + _cosine_texture(rng, ys, xs, 3, (60, 180), 18)

    mask = np.zeros((height, width))
    masks = []
    for _ in range(object_count):
        cx = rng.uniform(margin * width, (1 - margin) * width)
        cy = rng.uniform(margin * height, (1 - margin) * height)
        a = rng.uniform(0.10, 0.18) * width
        b = rng.uniform(0.10, 0.18) * height
        rot = rng.uniform(0, np.pi)
        dx, dy = xs - cx, ys - cy
        u = (dx * np.cos(rot) + dy * np.sin(rot)) / a
        v = (-dx * np.sin(rot) + dy * np.cos(rot)) / b
        inside = (u * u + v * v) <= 1.0
        color = rng.uniform(70, 220, size=3)
        stripes = _cosine_texture(rng, ys, xs, 2, (18, 48), 26)
        for ch in range(3):
            image[:, :, ch][inside] = (color[ch] + stripes + 0.35 * stripes * (ch - 1))[inside]
        masks.append(inside.astype(np.float64))
    if masks:
        mask = make_multimask(masks)
    image += rng.normal(0, 4.0, size=image.shape)
    return np.clip(np.round(image), 0, 255).astype(np.uint8), mask


# ---------------------------------------------------------------------------
# dataset persistence


def write_pair(pair_dir, pair: TrainingPair, keypoints=None) -> None:
    pair_dir = Path(pair_dir)
    pair_dir.mkdir(parents=True, exist_ok=True)
    fileio.write_image(pair_dir / "source.ppm", pair.source_image)
    fileio.write_image(pair_dir / "target.ppm", pair.target_image)
    fileio.write_image(pair_dir / "source_mask.pgm", pair.source_mask * 255)
    fileio.write_image(pair_dir / "target_mask.pgm", pair.target_mask * 255)
    fileio.save_grid(pair_dir / "flow.sfg", pair.grid_flow)
    record = {
        "matrix": pair.affine.matrix.tolist(),
        "flipped": pair.flipped,
        "coords": "normalized target->source, x/(w-1), y/(h-1)",
        "flow_units": "grid cells of size image_size/grid_size",
    }
    (pair_dir / "affine.json").write_text(json.dumps(record, indent=1))
    if keypoints is not None:
        src, tgt = keypoints
        fileio.write_keypoints(pair_dir / "keypoints.csv", src, tgt)
        x, y, bw, bh = grid.mask_bbox(pair.source_mask)
        box = {"x": x, "y": y, "width": bw, "height": bh,
               "note": "source foreground box, used for keypoint-threshold normalization"}
        (pair_dir / "box.json").write_text(json.dumps(box, indent=1))


def load_pair(pair_dir) -> TrainingPair:
    pair_dir = Path(pair_dir)
    record = json.loads((pair_dir / "affine.json").read_text())
    source_mask = fileio.read_image(pair_dir / "source_mask.pgm").astype(np.float64) / 255.0
    target_mask = fileio.read_image(pair_dir / "target_mask.pgm").astype(np.float64) / 255.0
    return TrainingPair(
        source_image=fileio.read_image(pair_dir / "source.ppm"),
        source_mask=(source_mask >= 0.5).astype(np.float64),
        target_image=fileio.read_image(pair_dir / "target.ppm"),
        target_mask=(target_mask >= 0.5).astype(np.float64),
        grid_flow=fileio.load_flow(pair_dir / "flow.sfg"),
        affine=AffineParams(np.array(record["matrix"])),
        flipped=bool(record["flipped"]),
    )


def generate_dataset(scenes: list[tuple[np.ndarray, np.ndarray]], out_dir, count: int,
                     seed: int, grid_shape: tuple[int, int],
                     ranges: AffineRanges = AffineRanges(),
                     keypoint_count: int = 24) -> dict:
    """Write `count` pairs drawn from the given (image, mask) scenes.

    Per-pair generators come from spawned seed sequences, so output is
    byte-identical for a fixed seed regardless of generation order.
    """
    if not scenes:
        raise ValueError("no input scenes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    streams = np.random.SeedSequence(seed).spawn(count)
    names = []
    for i, stream in enumerate(streams):
        rng = np.random.default_rng(stream)
        image, mask = scenes[int(rng.integers(len(scenes)))]
        affine = sample_affine(rng, ranges)
        flip = bool(rng.random() < 0.5) and ranges != AffineRanges.identity()
        pair = make_pair(image, mask, affine, grid_shape, flip=flip)
        keypoints = sample_keypoints(pair, rng, keypoint_count)
        name = f"pair_{i:04d}"
        write_pair(out_dir / name, pair, keypoints)
        names.append(name)
    manifest = {
        "seed": seed, "count": count,
        "grid_height": grid_shape[0], "grid_width": grid_shape[1],
        "ranges": ranges.to_json(),
        "ranges_note": "substitute values; source protocol leaves them unspecified",
        "pairs": names,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return manifest


def load_manifest(dataset_dir) -> dict:
    path = Path(dataset_dir) / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    return json.loads(path.read_text())
