"""PNG (8-bit, via Pillow) and PFM (float32) image files."""

from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import StmError


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_png(path, img: np.ndarray) -> None:
    """Float image in [0, 1] (H, W[, 3]) or bool mask -> 8-bit PNG."""
    img = np.asarray(img)
    data = img.astype(np.uint8) * 255 if img.dtype == bool else to_uint8(img)
    Image.fromarray(data).save(path, format="PNG")


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian PFM; rows are stored bottom-to-top per the format."""
    img = np.asarray(img, dtype="<f4")
    color = img.ndim == 3
    if color and img.shape[2] != 3:
        raise StmError("PFM color images need 3 channels")
    h, w = img.shape[:2]
    header = f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii")
    Path(path).write_bytes(header + np.flipud(img).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = re.match(rb"(PF|Pf)\s+(\d+)\s+(\d+)\s+(-?[\d.eE+-]+)\s", data)
    if not m:
        raise StmError(f"{path}: not a PFM file")
    color = m.group(1) == b"PF"
    w, h, scale = int(m.group(2)), int(m.group(3)), float(m.group(4))
    dtype = "<f4" if scale < 0 else ">f4"
    shape = (h, w, 3) if color else (h, w)
    arr = np.frombuffer(data[m.end():], dtype=dtype, count=int(np.prod(shape))).reshape(shape)
    return np.flipud(arr).astype(np.float64)
