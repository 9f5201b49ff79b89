"""Volume grids: synthetic generators, interpolation, gradients, raw file I/O.

Grids store float32 densities in x-fastest order. Voxel (ix,iy,iz) sits at
world position (ix*sx, iy*sy, iz*sz); queries outside the grid read as 0
(the object is embedded in empty space).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np


class VolumeError(ValueError):
    """Raised for malformed volume files or unsupported parameters."""


@dataclass
class VolumeGrid:
    dims: tuple  # (nx, ny, nz)
    spacing: tuple  # world units per voxel, per axis
    data: np.ndarray  # shape (nz, ny, nx) float32, x fastest in memory
    value_range: tuple = field(default=None)

    def __post_init__(self):
        nx, ny, nz = self.dims
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.shape != (nz, ny, nx):
            raise VolumeError(
                f"data shape {self.data.shape} does not match dims {self.dims}"
            )
        if self.value_range is None:
            self.value_range = (float(self.data.min()), float(self.data.max()))

    @property
    def extent(self):
        """World-space size of the voxel-center bounding box per axis."""
        return tuple((n - 1) * s for n, s in zip(self.dims, self.spacing))

    def center(self):
        return np.array([e * 0.5 for e in self.extent], dtype=np.float64)


def _grid_coords(vol: VolumeGrid, pts: np.ndarray) -> np.ndarray:
    sp = np.asarray(vol.spacing, dtype=np.float64)
    return np.asarray(pts, dtype=np.float64) / sp


def sample(vol: VolumeGrid, pts, kind: str = "trilinear") -> np.ndarray:
    """Interpolated density at world point(s); out of bounds reads 0.

    pts: (..., 3) world coordinates. kind: 'trilinear' or 'tricubic'
    (Catmull-Rom).
    """
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    p = np.atleast_2d(pts)
    g = _grid_coords(vol, p)
    nx, ny, nz = vol.dims
    inside = (
        (g[:, 0] >= 0) & (g[:, 0] <= nx - 1)
        & (g[:, 1] >= 0) & (g[:, 1] <= ny - 1)
        & (g[:, 2] >= 0) & (g[:, 2] <= nz - 1)
    )
    out = np.zeros(len(p), dtype=np.float64)
    if np.any(inside):
        gi = g[inside]
        if kind == "trilinear":
            out[inside] = _trilinear(vol.data, gi, nx, ny, nz)
        elif kind == "tricubic":
            out[inside] = _tricubic(vol.data, gi, nx, ny, nz)
        else:
            raise VolumeError(f"unknown interpolation kind {kind!r}")
    return float(out[0]) if single else out


def _trilinear(data, g, nx, ny, nz):
    i0 = np.floor(g).astype(np.int64)
    i0[:, 0] = np.clip(i0[:, 0], 0, nx - 2) if nx > 1 else 0
    i0[:, 1] = np.clip(i0[:, 1], 0, ny - 2) if ny > 1 else 0
    i0[:, 2] = np.clip(i0[:, 2], 0, nz - 2) if nz > 1 else 0
    f = g - i0
    x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
    x1 = np.minimum(x0 + 1, nx - 1)
    y1 = np.minimum(y0 + 1, ny - 1)
    z1 = np.minimum(z0 + 1, nz - 1)
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    c00 = data[z0, y0, x0] * (1 - fx) + data[z0, y0, x1] * fx
    c10 = data[z0, y1, x0] * (1 - fx) + data[z0, y1, x1] * fx
    c01 = data[z1, y0, x0] * (1 - fx) + data[z1, y0, x1] * fx
    c11 = data[z1, y1, x0] * (1 - fx) + data[z1, y1, x1] * fx
    c0 = c00 * (1 - fy) + c10 * fy
    c1 = c01 * (1 - fy) + c11 * fy
    return c0 * (1 - fz) + c1 * fz


def _catmull_rom_weights(t):
    """Catmull-Rom basis weights for taps at offsets -1,0,1,2."""
    t2 = t * t
    t3 = t2 * t
    w0 = 0.5 * (-t3 + 2 * t2 - t)
    w1 = 0.5 * (3 * t3 - 5 * t2 + 2)
    w2 = 0.5 * (-3 * t3 + 4 * t2 + t)
    w3 = 0.5 * (t3 - t2)
    return np.stack([w0, w1, w2, w3], axis=-1)


def _tricubic(data, g, nx, ny, nz):
    base = np.floor(g).astype(np.int64)
    base[:, 0] = np.clip(base[:, 0], 0, max(nx - 2, 0))
    base[:, 1] = np.clip(base[:, 1], 0, max(ny - 2, 0))
    base[:, 2] = np.clip(base[:, 2], 0, max(nz - 2, 0))
    f = g - base
    wx = _catmull_rom_weights(f[:, 0])
    wy = _catmull_rom_weights(f[:, 1])
    wz = _catmull_rom_weights(f[:, 2])
    acc = np.zeros(len(g), dtype=np.float64)
    for kz in range(4):
        z = np.clip(base[:, 2] + kz - 1, 0, nz - 1)
        for ky in range(4):
            y = np.clip(base[:, 1] + ky - 1, 0, ny - 1)
            wzy = wz[:, kz] * wy[:, ky]
            for kx in range(4):
                x = np.clip(base[:, 0] + kx - 1, 0, nx - 1)
                acc += wzy * wx[:, kx] * data[z, y, x]
    return acc


def gradient(vol: VolumeGrid, pts, kind: str = "trilinear") -> np.ndarray:
    """Central-difference density gradient with half-voxel offsets."""
    pts = np.asarray(pts, dtype=np.float64)
    single = pts.ndim == 1
    p = np.atleast_2d(pts)
    out = np.empty((len(p), 3), dtype=np.float64)
    for ax in range(3):
        h = vol.spacing[ax] * 0.5
        d = np.zeros(3)
        d[ax] = h
        out[:, ax] = (sample(vol, p + d, kind) - sample(vol, p - d, kind)) / (2 * h)
    return out[0] if single else out


# ---------------------------------------------------------------------------
# synthetic fields

SYNTHETIC_KINDS = ("sphere", "torus", "metaballs", "value-noise")


def make_synthetic(kind: str, dims, seed: int = 0, spacing=(1.0, 1.0, 1.0)) -> VolumeGrid:
    """Deterministic synthetic density field in [0,1] for the given seed."""
    nx, ny, nz = dims
    if min(dims) < 8:
        raise VolumeError(f"dims {dims} too small, need >= 8 per axis")
    sp = np.asarray(spacing, dtype=np.float64)
    zz, yy, xx = np.meshgrid(
        np.arange(nz) * sp[2], np.arange(ny) * sp[1], np.arange(nx) * sp[0],
        indexing="ij",
    )
    ext = np.array([(n - 1) * s for n, s in zip(dims, sp)])
    c = ext * 0.5
    rng = np.random.default_rng(seed)

    if kind == "sphere":
        r = 0.30 * ext.min()
        sdf = np.sqrt((xx - c[0]) ** 2 + (yy - c[1]) ** 2 + (zz - c[2]) ** 2) - r
        falloff = 2.0 * sp.min()
        field = np.clip(0.5 - sdf / (2.0 * falloff), 0.0, 1.0)
    elif kind == "torus":
        rmaj = 0.28 * ext.min()
        rmin = 0.12 * ext.min()
        q = np.sqrt((xx - c[0]) ** 2 + (yy - c[1]) ** 2) - rmaj
        sdf = np.sqrt(q * q + (zz - c[2]) ** 2) - rmin
        falloff = 2.0 * sp.min()
        field = np.clip(0.5 - sdf / (2.0 * falloff), 0.0, 1.0)
    elif kind == "metaballs":
        k = int(rng.integers(3, 7))
        field = _metaballs(xx, yy, zz, c, ext, rng, k)
    elif kind == "value-noise":
        field = _value_noise(dims, rng)
    else:
        raise VolumeError(f"unsupported synthetic kind {kind!r}")

    return VolumeGrid(tuple(dims), tuple(spacing), field.astype(np.float32))


def make_metaballs(dims, seed: int = 0, k: int = 1, spacing=(1.0, 1.0, 1.0)) -> VolumeGrid:
    """Metaballs with an explicit blob count (k=1 gives a single radial blob)."""
    nx, ny, nz = dims
    sp = np.asarray(spacing, dtype=np.float64)
    zz, yy, xx = np.meshgrid(
        np.arange(nz) * sp[2], np.arange(ny) * sp[1], np.arange(nx) * sp[0],
        indexing="ij",
    )
    ext = np.array([(n - 1) * s for n, s in zip(dims, sp)])
    c = ext * 0.5
    rng = np.random.default_rng(seed)
    field = _metaballs(xx, yy, zz, c, ext, rng, k)
    return VolumeGrid(tuple(dims), tuple(spacing), field.astype(np.float32))


def _metaballs(xx, yy, zz, c, ext, rng, k):
    field = np.zeros_like(xx)
    for _ in range(k):
        pos = c + (rng.uniform(-0.18, 0.18, size=3) * ext if k > 1 else 0.0)
        sig = rng.uniform(0.10, 0.18) * ext.min()
        r2 = (xx - pos[0]) ** 2 + (yy - pos[1]) ** 2 + (zz - pos[2]) ** 2
        field += np.exp(-r2 / (2.0 * sig * sig))
    m = field.max()
    if m > 0:
        field /= m
    return field


def _value_noise(dims, rng, octaves: int = 4):
    nx, ny, nz = dims
    field = np.zeros((nz, ny, nx), dtype=np.float64)
    amp = 1.0
    total = 0.0
    for o in range(octaves):
        res = 3 * 2**o + 1
        lattice = rng.uniform(0.0, 1.0, size=(res, res, res))
        zi = np.linspace(0, res - 1, nz)
        yi = np.linspace(0, res - 1, ny)
        xi = np.linspace(0, res - 1, nx)
        field += amp * _interp_lattice(lattice, zi, yi, xi)
        total += amp
        amp *= 0.5
    field /= total
    lo, hi = field.min(), field.max()
    if hi > lo:
        field = (field - lo) / (hi - lo)
    return field


def _interp_lattice(lat, zi, yi, xi):
    """Separable linear interpolation of a 3D lattice onto a regular grid."""

    def lerp_axis(arr, coords, axis):
        i0 = np.floor(coords).astype(np.int64)
        i0 = np.clip(i0, 0, arr.shape[axis] - 2)
        f = coords - i0
        a = np.take(arr, i0, axis=axis)
        b = np.take(arr, i0 + 1, axis=axis)
        shape = [1, 1, 1]
        shape[axis] = len(coords)
        f = f.reshape(shape)
        return a * (1 - f) + b * f

    out = lerp_axis(lat, zi, 0)
    out = lerp_axis(out, yi, 1)
    out = lerp_axis(out, xi, 2)
    return out


# ---------------------------------------------------------------------------
# raw file I/O

_DTYPES = {"u8": np.uint8, "u16": np.uint16, "f32": np.float32}
_DTYPE_SCALE = {"u8": 255.0, "u16": 65535.0}


def save_raw(vol: VolumeGrid, path: str, dtype: str = "f32") -> None:
    """Write little-endian packed voxels plus a `<path>.meta` sidecar."""
    if dtype not in _DTYPES:
        raise VolumeError(f"unknown dtype {dtype!r}")
    arr = vol.data
    if dtype in _DTYPE_SCALE:
        arr = np.round(np.clip(arr, 0.0, 1.0) * _DTYPE_SCALE[dtype])
    arr = arr.astype(np.dtype(_DTYPES[dtype]).newbyteorder("<"))
    with open(path, "wb") as f:
        f.write(arr.tobytes())
    nx, ny, nz = vol.dims
    sx, sy, sz = vol.spacing
    with open(path + ".meta", "w") as f:
        f.write(f"dims: {nx} {ny} {nz}\n")
        f.write(f"dtype: {dtype}\n")
        f.write(f"spacing: {sx} {sy} {sz}\n")


def load_raw(path: str, meta_path: str | None = None) -> VolumeGrid:
    """Read a raw volume using its text sidecar; integer dtypes map to [0,1]."""
    meta_path = meta_path or path + ".meta"
    if not os.path.exists(meta_path):
        raise VolumeError(f"missing metadata sidecar {meta_path}")
    meta = {}
    with open(meta_path) as f:
        for line in f:
            line = line.strip()
            if not line or ":" not in line:
                continue
            key, val = line.split(":", 1)
            meta[key.strip()] = val.strip()
    try:
        dims = tuple(int(v) for v in meta["dims"].split())
        dtype = meta["dtype"]
        spacing = tuple(float(v) for v in meta["spacing"].split())
    except (KeyError, ValueError) as e:
        raise VolumeError(f"malformed metadata in {meta_path}: {e}") from e
    if dtype not in _DTYPES:
        raise VolumeError(f"unknown dtype {dtype!r} in {meta_path}")
    nx, ny, nz = dims
    raw = np.fromfile(path, dtype=np.dtype(_DTYPES[dtype]).newbyteorder("<"))
    if raw.size != nx * ny * nz:
        raise VolumeError(
            f"{path}: file holds {raw.size} voxels, metadata says {nx*ny*nz}"
        )
    data = raw.reshape(nz, ny, nx).astype(np.float32)
    if dtype in _DTYPE_SCALE:
        data /= np.float32(_DTYPE_SCALE[dtype])
    return VolumeGrid(dims, spacing, data)
