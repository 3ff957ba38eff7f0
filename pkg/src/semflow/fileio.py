"""File formats: SFG1 grid tensors, PPM/PGM rasters, keypoint CSVs.

SFG1 layout: magic bytes "SFG1", then three little-endian uint32 values
(height, width, depth), then height*width*depth IEEE-754 little-endian
float32 values in (y, x, channel) row-major order. Masks use depth=1,
flows depth=2 (channel 0 = dx, channel 1 = dy).
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

__all__ = [
    "GridFormatError", "save_grid", "load_grid", "load_mask", "load_flow",
    "read_image", "write_image", "read_keypoints", "write_keypoints",
]

_MAGIC = b"SFG1"
_HEADER = struct.Struct("<4sIII")


class GridFormatError(ValueError):
    """Raised on malformed SFG1 files; carries the offending byte offset."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def save_grid(path, array: np.ndarray) -> None:
    """Write an (h, w) or (h, w, d) array as an SFG1 file (float32)."""
    array = np.asarray(array)
    if array.ndim == 2:
        array = array[:, :, None]
    if array.ndim != 3:
        raise ValueError(f"expected (h, w) or (h, w, d) array, got shape {array.shape}")
    h, w, d = array.shape
    payload = np.ascontiguousarray(array, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, h, w, d))
        fh.write(payload.tobytes())


def load_grid(path) -> np.ndarray:
    """Read an SFG1 file into an (h, w, d) float64 array."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise GridFormatError(f"header truncated: file is {len(raw)} bytes, "
                              f"need {_HEADER.size}", len(raw))
    magic, h, w, d = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise GridFormatError(f"bad magic {magic!r}, expected {_MAGIC!r}", 0)
    expected = _HEADER.size + 4 * h * w * d
    if len(raw) != expected:
        raise GridFormatError(
            f"payload length mismatch: expected {expected} bytes total for "
            f"{h}x{w}x{d}, got {len(raw)}", min(len(raw), expected))
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(h, w, d).astype(np.float64)


def load_mask(path) -> np.ndarray:
    grid = load_grid(path)
    if grid.shape[2] != 1:
        raise GridFormatError(f"mask file has depth {grid.shape[2]}, expected 1", _HEADER.size - 4)
    return grid[:, :, 0]


def load_flow(path) -> np.ndarray:
    grid = load_grid(path)
    if grid.shape[2] != 2:
        raise GridFormatError(f"flow file has depth {grid.shape[2]}, expected 2", _HEADER.size - 4)
    return grid


# ---------------------------------------------------------------------------
# PPM/PGM rasters (8-bit binary P5/P6; ASCII P2/P3 accepted on read)


def _read_pnm_tokens(raw: bytes, count: int):
    """Yield header tokens, skipping whitespace and # comments."""
    tokens = []
    i = 0
    while len(tokens) < count:
        if i >= len(raw):
            raise ValueError("truncated PNM header")
        c = raw[i:i + 1]
        if c in b" \t\r\n":
            i += 1
        elif c == b"#":
            i = raw.index(b"\n", i) + 1
        else:
            j = i
            while j < len(raw) and raw[j:j + 1] not in b" \t\r\n":
                j += 1
            tokens.append(raw[i:j])
            i = j
    return tokens, i + 1  # one whitespace byte separates header from payload


def read_image(path) -> np.ndarray:
    """Read a PGM/PPM file into uint8 (h, w) grayscale or (h, w, 3) RGB."""
    raw = Path(path).read_bytes()
    if raw[:2] not in (b"P2", b"P3", b"P5", b"P6"):
        raise ValueError(f"unsupported raster format {raw[:2]!r} in {path}")
    kind = raw[:2].decode()
    tokens, payload_at = _read_pnm_tokens(raw, 4)
    width, height, maxval = (int(t) for t in tokens[1:4])
    if maxval != 255:
        raise ValueError(f"only 8-bit rasters supported, maxval={maxval}")
    planes = 3 if kind in ("P3", "P6") else 1
    n = width * height * planes
    if kind in ("P5", "P6"):
        data = np.frombuffer(raw, dtype=np.uint8, offset=payload_at, count=n)
    else:
        data = np.array(raw[payload_at - 1:].split()[:n], dtype=np.uint8)
    if data.size != n:
        raise ValueError(f"raster payload truncated: expected {n} samples, got {data.size}")
    img = data.reshape(height, width, planes)
    return img[:, :, 0] if planes == 1 else img


def write_image(path, image: np.ndarray) -> None:
    """Write uint8 grayscale as binary PGM (P5) or RGB as PPM (P6)."""
    image = np.asarray(image)
    if image.dtype != np.uint8:
        image = np.clip(np.round(image), 0, 255).astype(np.uint8)
    if image.ndim == 2:
        kind, planes = b"P5", 1
    elif image.ndim == 3 and image.shape[2] == 3:
        kind, planes = b"P6", 3
    else:
        raise ValueError(f"expected (h, w) or (h, w, 3) image, got shape {image.shape}")
    h, w = image.shape[:2]
    with open(path, "wb") as fh:
        fh.write(kind + b"\n%d %d\n255\n" % (w, h))
        fh.write(np.ascontiguousarray(image).tobytes())


# ---------------------------------------------------------------------------
# keypoint correspondence CSV: one "x_src,y_src,x_tgt,y_tgt" row per pair


def write_keypoints(path, source: np.ndarray, target: np.ndarray) -> None:
    source = np.asarray(source, dtype=np.float64).reshape(-1, 2)
    target = np.asarray(target, dtype=np.float64).reshape(-1, 2)
    if source.shape != target.shape:
        raise ValueError("source/target keypoint counts differ")
    with open(path, "w") as fh:
        fh.write("x_src,y_src,x_tgt,y_tgt\n")
        for (xs, ys), (xt, yt) in zip(source, target):
            fh.write(f"{float(xs)!r},{float(ys)!r},{float(xt)!r},{float(yt)!r}\n")


def read_keypoints(path) -> tuple[np.ndarray, np.ndarray]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("x_src"):
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"bad keypoint row {line!r} in {path}")
            rows.append([float(p) for p in parts])
    if not rows:
        raise ValueError(f"no keypoints in {path}")
    arr = np.array(rows)
    return arr[:, :2].copy(), arr[:, 2:].copy()
