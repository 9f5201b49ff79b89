"""Exact float image container and 8-bit PNG export.

Container layout: three text header lines (magic, `H W C`, per-channel
names) followed by C*H*W little-endian float32 values in (C,H,W) order.
"""

from __future__ import annotations

import numpy as np

MAGIC = "FLTIMG1"


def write_float_image(path: str, data: np.ndarray, names=None) -> None:
    data = np.ascontiguousarray(data, dtype=np.float32)
    if data.ndim == 2:
        data = data[None]
    c, h, w = data.shape
    names = names or [f"c{i}" for i in range(c)]
    if len(names) != c:
        raise ValueError(f"{len(names)} channel names for {c} channels")
    header = f"{MAGIC}\n{h} {w} {c}\n{' '.join(names)}\n"
    with open(path, "wb") as f:
        f.write(header.encode("ascii"))
        f.write(data.astype("<f4").tobytes())


def read_float_image(path: str):
    """Returns (data (C,H,W) float32, channel name list)."""
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii").strip()
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        h, w, c = (int(v) for v in f.readline().decode("ascii").split())
        names = f.readline().decode("ascii").split()
        payload = f.read(4 * c * h * w)
    data = np.frombuffer(payload, dtype="<f4").reshape(c, h, w).copy()
    if len(names) != c:
        raise ValueError(f"{path}: {len(names)} names for {c} channels")
    return data, names


def save_png(path: str, rgb: np.ndarray) -> None:
    """Write a (3,H,W) or (H,W) array with values in [0,1] as 8-bit PNG."""
    from PIL import Image

    arr = np.asarray(rgb, dtype=np.float32)
    if arr.ndim == 2:
        arr = np.repeat(arr[None], 3, axis=0)
    img8 = (np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(img8.transpose(1, 2, 0), mode="RGB").save(path)
