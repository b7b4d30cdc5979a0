"""File formats: PNG images, binary float grids, tensor checkpoints."""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
from PIL import Image

GRID_MAGIC = b"DYNF"


class FormatError(ValueError):
    pass


def read_png(path):
    """Float image in [0,1] with shape (H, W, C)."""
    if not Path(path).exists():
        raise FileNotFoundError(path)
    arr = np.asarray(Image.open(path))
    if arr.dtype == bool:
        arr = arr.astype(np.float64)
        return arr[..., None] if arr.ndim == 2 else arr
    arr = arr.astype(np.float64) / 255.0
    return arr[..., None] if arr.ndim == 2 else arr


def to_uint8(img):
    return np.clip(np.round(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img):
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr).save(path)


def read_mask(path):
    """Binary mask from a 1-channel PNG or the alpha channel of an RGBA PNG."""
    img = read_png(path)
    chan = img[..., 3] if img.shape[2] == 4 else img[..., 0]
    return chan > 0.5


def write_grid(path, arr):
    """Little-endian float32 grid with header (magic, width, height, channels), row-major."""
    arr = np.asarray(arr, dtype="<f4")
    if arr.ndim == 2:
        arr = arr[..., None]
    h, w, c = arr.shape
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(GRID_MAGIC + struct.pack("<III", w, h, c))
        fh.write(np.ascontiguousarray(arr).tobytes())


def read_grid(path):
    with open(path, "rb") as fh:
        head = fh.read(16)
        if len(head) != 16 or head[:4] != GRID_MAGIC:
            raise FormatError(f"{path}: bad grid header")
        w, h, c = struct.unpack("<III", head[4:])
        data = np.frombuffer(fh.read(), dtype="<f4")
    if data.size != w * h * c:
        raise FormatError(f"{path}: expected {w * h * c} values, found {data.size}")
    return data.reshape(h, w, c).astype(np.float64)


def save_checkpoint(path, tensors, meta=None):
    """Write ``<path>.bin`` (raw float32 LE) and ``<path>.json`` (names, shapes, offsets)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    entries = []
    offset = 0
    with open(path.with_suffix(".bin"), "wb") as fh:
        for name, arr in tensors.items():
            buf = np.ascontiguousarray(np.asarray(arr, dtype="<f4")).tobytes()
            entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset,
                            "nbytes": len(buf)})
            fh.write(buf)
            offset += len(buf)
    manifest = {"format": "f32le", "tensors": entries, "meta": meta or {}}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1))


def load_checkpoint(path):
    path = Path(path)
    man_path = path.with_suffix(".json")
    if not man_path.exists():
        raise FileNotFoundError(man_path)
    manifest = json.loads(man_path.read_text())
    raw = path.with_suffix(".bin").read_bytes()
    out = {}
    for e in manifest["tensors"]:
        chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).astype(np.float64)
    return out, manifest.get("meta", {})
