"""Pinhole camera, isosurface and emission-absorption ray casters, Phong.

Both renderers march per pixel, are pure functions of immutable inputs, and
accept an optional boolean mask restricting which pixels are cast; masked
sparse renders equal dense renders at the selected pixels, bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .volume import VolumeGrid, gradient, sample


class CameraError(ValueError):
    """Raised for degenerate view setups."""


@dataclass
class Camera:
    eye: tuple
    look_at: tuple
    up: tuple
    vfov: float  # vertical field of view, radians
    height: int
    width: int

    def basis(self):
        eye = np.asarray(self.eye, dtype=np.float64)
        tgt = np.asarray(self.look_at, dtype=np.float64)
        up = np.asarray(self.up, dtype=np.float64)
        fwd = tgt - eye
        norm = np.linalg.norm(fwd)
        if norm < 1e-12:
            raise CameraError("camera eye coincides with look-at point")
        fwd = fwd / norm
        right = np.cross(fwd, up)
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            raise CameraError("camera up vector is parallel to the view direction")
        right /= rn
        upv = np.cross(right, fwd)
        return eye, fwd, right, upv


# channel layouts: list of (name, component count)
LAYOUTS = {
    "iso": (("mask", 1), ("normal", 3), ("depth", 1)),
    "dvr": (("rgba", 4), ("depth", 1), ("normal", 3)),
    "dvr-gradient": (("rgba", 4), ("depth", 1), ("normal", 3), ("gradient", 3)),
}


def layout_channels(layout: str) -> int:
    return sum(n for _, n in LAYOUTS[layout])


def channel_names(layout: str) -> list:
    names = []
    for name, n in LAYOUTS[layout]:
        names.extend([name] * n)
    return names


@dataclass
class ChannelImage:
    """Dense H x W image with named float32 channel groups."""

    layout: str
    data: np.ndarray  # (C,H,W) float32

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        want = layout_channels(self.layout)
        if self.data.ndim != 3 or self.data.shape[0] != want:
            raise ValueError(
                f"layout {self.layout!r} expects {want} channels, got {self.data.shape}"
            )

    @classmethod
    def zeros(cls, layout: str, h: int, w: int) -> "ChannelImage":
        return cls(layout, np.zeros((layout_channels(layout), h, w), dtype=np.float32))

    def _slice(self, name: str):
        off = 0
        for n, k in LAYOUTS[self.layout]:
            if n == name:
                return slice(off, off + k)
            off += k
        raise KeyError(f"layout {self.layout!r} has no channel {name!r}")

    def channel(self, name: str) -> np.ndarray:
        return self.data[self._slice(name)]

    @property
    def height(self):
        return self.data.shape[1]

    @property
    def width(self):
        return self.data.shape[2]


@dataclass
class TransferFunction:
    """Piecewise-linear density -> (rgb, opacity) map."""

    points: np.ndarray  # (N,5): density, r, g, b, opacity
    peaks: list = field(default=None)  # optional provenance for generated TFs

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        d = self.points[:, 0]
        if np.any(np.diff(d) <= 0):
            raise ValueError("transfer function densities must be strictly increasing")
        if d[0] < 0 or d[-1] > 1:
            raise ValueError("transfer function densities must lie in [0,1]")
        a = self.points[:, 4]
        if a.min() < 0 or a.max() > 1:
            raise ValueError("transfer function opacity must lie in [0,1]")

    def evaluate(self, density: np.ndarray):
        """Return (rgb (...,3), opacity (...)) for densities (clamped ends)."""
        d = np.asarray(density, dtype=np.float64)
        xp = self.points[:, 0]
        rgb = np.stack(
            [np.interp(d, xp, self.points[:, 1 + i]) for i in range(3)], axis=-1
        )
        a = np.interp(d, xp, self.points[:, 4])
        return rgb, a

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            for row in self.points:
                f.write(" ".join(f"{v:.8g}" for v in row) + "\n")

    @classmethod
    def load(cls, path: str) -> "TransferFunction":
        rows = []
        with open(path) as f:
            for line in f:
                line = line.strip()
                if line:
                    rows.append([float(v) for v in line.split()])
        return cls(np.asarray(rows))


# ---------------------------------------------------------------------------
# ray setup


def _pixel_rays(cam: Camera, window=None, out_res=None):
    """Ray origins/directions for pixel centers of a (sub-)image.

    window=(y0,x0,h,w) selects a region of the camera's base image; out_res
    renders that region at a different resolution (pixel centers stay on the
    base image's continuous coordinates).
    """
    eye, fwd, right, upv = cam.basis()
    if window is None:
        window = (0.0, 0.0, cam.height, cam.width)
    y0, x0, wh, ww = window
    oh, ow = out_res if out_res is not None else (int(wh), int(ww))
    py = y0 + (np.arange(oh) + 0.5) * (wh / oh)
    px = x0 + (np.arange(ow) + 0.5) * (ww / ow)
    ndc_y = 1.0 - 2.0 * py / cam.height
    ndc_x = 2.0 * px / cam.width - 1.0
    tanf = np.tan(cam.vfov * 0.5)
    aspect = cam.width / cam.height
    dirs = (
        fwd[None, None, :]
        + ndc_x[None, :, None] * (tanf * aspect) * right[None, None, :]
        + ndc_y[:, None, None] * tanf * upv[None, None, :]
    )
    dirs /= np.linalg.norm(dirs, axis=2, keepdims=True)
    return eye, dirs, (oh, ow)


def _bbox_intersect(vol: VolumeGrid, eye, dirs):
    """Slab test against the voxel-center bounding box; returns (tn, tf)."""
    ext = np.asarray(vol.extent, dtype=np.float64)
    d = dirs.reshape(-1, 3)
    o = eye[None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (0.0 - o) * inv
        t1 = (ext[None, :] - o) * inv
    # parallel rays: replace NaN/inf products with +-inf slabs
    lo = np.where(np.isnan(t0), -np.inf, np.minimum(t0, t1))
    hi = np.where(np.isnan(t1), np.inf, np.maximum(t0, t1))
    par = np.abs(d) < 1e-15
    inside = (o >= 0) & (o <= ext[None, :])
    lo = np.where(par, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(par, np.where(inside, np.inf, -np.inf), hi)
    tn = np.maximum(lo.max(axis=1), 0.0)
    tf = hi.min(axis=1)
    return tn, tf


# ---------------------------------------------------------------------------
# isosurface ray casting


def raycast_iso(
    vol: VolumeGrid,
    cam: Camera,
    isovalue: float,
    step: float = 0.25,
    mask: np.ndarray | None = None,
    window=None,
    out_res=None,
    interp: str = "trilinear",
) -> ChannelImage:
    """First density-isovalue crossing per ray.

    Hit pixels store mask=1, the unit negative density gradient, and depth
    normalized to the ray's bbox span; misses store mask=0, normal=0,
    depth=1. Pixels excluded by ``mask`` are left at zero.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    eye, dirs, (oh, ow) = _pixel_rays(cam, window, out_res)
    img = ChannelImage.zeros("iso", oh, ow)
    if mask is None:
        sel = np.ones(oh * ow, dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool).reshape(-1)
        if sel.size != oh * ow:
            raise ValueError(f"mask size {sel.size} != image {oh}x{ow}")
    idx = np.nonzero(sel)[0]
    if idx.size == 0:
        return img
    d = dirs.reshape(-1, 3)[idx]
    tn, tf = _bbox_intersect(vol, eye, d)
    valid = tf > tn

    n = idx.size
    hit = np.zeros(n, dtype=bool)
    t_hit = np.zeros(n, dtype=np.float64)
    dt = step * float(min(vol.spacing))

    alive = valid.copy()
    t_cur = tn.copy()
    pos = eye[None, :] + t_cur[:, None] * d
    val = np.zeros(n, dtype=np.float64)
    val[alive] = sample(vol, pos[alive], interp) - isovalue
    # already inside the isosurface at entry: immediate hit
    inside0 = alive & (val > 0)
    hit[inside0] = True
    t_hit[inside0] = tn[inside0]
    alive &= ~inside0

    while np.any(alive):
        at_end = alive & (t_cur >= tf)
        alive &= ~at_end
        if not np.any(alive):
            break
        t_next = np.minimum(t_cur + dt, tf)
        ia = np.nonzero(alive)[0]
        pos = eye[None, :] + t_next[ia, None] * d[ia]
        v_next = sample(vol, pos, interp) - isovalue
        crossed = (val[ia] <= 0) & (v_next > 0)
        if np.any(crossed):
            ic = ia[crossed]
            lo = t_cur[ic].copy()
            hi = t_next[ic].copy()
            for _ in range(3):
                mid = 0.5 * (lo + hi)
                pm = eye[None, :] + mid[:, None] * d[ic]
                vm = sample(vol, pm, interp) - isovalue
                above = vm > 0
                hi = np.where(above, mid, hi)
                lo = np.where(above, lo, mid)
            hit[ic] = True
            t_hit[ic] = 0.5 * (lo + hi)
            alive[ic] = False
        val[ia] = v_next
        t_cur[ia] = t_next[ia]

    flat = img.data.reshape(5, oh * ow)
    m, nrm, dep = flat[0], flat[1:4], flat[4]
    dep[idx] = 1.0  # selected pixels default to far depth
    if np.any(hit):
        ih = np.nonzero(hit)[0]
        phit = eye[None, :] + t_hit[ih, None] * d[ih]
        g = gradient(vol, phit, interp)
        gn = np.linalg.norm(g, axis=1)
        nv = np.zeros_like(g)
        ok = gn > 1e-12
        nv[ok] = -g[ok] / gn[ok, None]
        span = np.maximum(tf[ih] - tn[ih], 1e-30)
        depth = np.clip((t_hit[ih] - tn[ih]) / span, 0.0, 1.0)
        m[idx[ih]] = 1.0
        nrm[:, idx[ih]] = nv.T
        dep[idx[ih]] = depth
    return img


# ---------------------------------------------------------------------------
# direct volume rendering


def composite_front_to_back(colors: np.ndarray, alphas: np.ndarray):
    """Reference alpha compositing of an ordered sample list.

    colors: (N,K) emissions, alphas: (N,). Returns (out (K,), out_alpha).
    """
    out = np.zeros(colors.shape[1], dtype=np.float64)
    acc_a = 0.0
    trans = 1.0
    for c, a in zip(colors, alphas):
        out += trans * a * c
        acc_a += trans * a
        trans *= 1.0 - a
    return out, acc_a


def raycast_dvr(
    vol: VolumeGrid,
    cam: Camera,
    tf: TransferFunction,
    step: float = 0.25,
    mask: np.ndarray | None = None,
    window=None,
    out_res=None,
    interp: str = "trilinear",
    with_gradient: bool = False,
    alpha_cutoff: float = 0.999,
) -> ChannelImage:
    """Front-to-back emission-absorption integration along each ray.

    Opacity is corrected for step size against a 1-voxel reference; depth,
    normal, and (optionally) the normalized density gradient are composited
    with the same weights as the colors.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    layout = "dvr-gradient" if with_gradient else "dvr"
    eye, dirs, (oh, ow) = _pixel_rays(cam, window, out_res)
    img = ChannelImage.zeros(layout, oh, ow)
    if mask is None:
        sel = np.ones(oh * ow, dtype=bool)
    else:
        sel = np.asarray(mask, dtype=bool).reshape(-1)
        if sel.size != oh * ow:
            raise ValueError(f"mask size {sel.size} != image {oh}x{ow}")
    idx = np.nonzero(sel)[0]
    if idx.size == 0:
        return img
    d = dirs.reshape(-1, 3)[idx]
    tn, tf_far = _bbox_intersect(vol, eye, d)
    span = np.maximum(tf_far - tn, 1e-30)
    n = idx.size
    dt = step * float(min(vol.spacing))

    n_em = 7 + (3 if with_gradient else 0)  # rgb, alpha-slot, depth, normal[, gradient]
    acc = np.zeros((n, n_em), dtype=np.float64)
    acc_a = np.zeros(n, dtype=np.float64)
    trans = np.ones(n, dtype=np.float64)
    alive = tf_far > tn
    k = 0
    while np.any(alive):
        t = tn + (k + 0.5) * dt
        alive &= t <= tf_far
        if not np.any(alive):
            break
        ia = np.nonzero(alive)[0]
        pos = eye[None, :] + t[ia, None] * d[ia]
        dens = sample(vol, pos, interp)
        rgb, a = tf.evaluate(dens)
        a_corr = 1.0 - np.power(1.0 - np.clip(a, 0.0, 1.0), step)
        need_grad = a_corr > 0
        nv = np.zeros((len(ia), 3))
        gvn = np.zeros((len(ia), 3))
        if np.any(need_grad):
            g = gradient(vol, pos[need_grad], interp)
            gn = np.linalg.norm(g, axis=1)
            ok = gn > 1e-12
            sub_n = np.zeros_like(g)
            sub_n[ok] = -g[ok] / gn[ok, None]
            nv[need_grad] = sub_n
            gvn[need_grad] = -sub_n  # normalized gradient in [-1,1]^3
        depth_em = (t[ia] - tn[ia]) / span[ia]
        w = trans[ia] * a_corr
        acc[ia, 0:3] += w[:, None] * rgb
        acc[ia, 3] += w * depth_em
        acc[ia, 4:7] += w[:, None] * nv
        if with_gradient:
            acc[ia, 7:10] += w[:, None] * gvn
        acc_a[ia] += w
        trans[ia] *= 1.0 - a_corr
        alive[ia] &= acc_a[ia] <= alpha_cutoff
        k += 1

    flat = img.data.reshape(img.data.shape[0], oh * ow)
    flat[0:3, idx] = acc[:, 0:3].T
    flat[3, idx] = acc_a
    flat[4, idx] = acc[:, 3]
    flat[5:8, idx] = acc[:, 4:7].T
    if with_gradient:
        flat[8:11, idx] = acc[:, 7:10].T
    return img


# ---------------------------------------------------------------------------
# shading and low-resolution pass


@dataclass
class PhongMaterial:
    color: tuple = (0.8, 0.45, 0.25)
    ambient: float = 0.15
    diffuse: float = 0.7
    specular: float = 0.25
    shininess: float = 32.0
    background: tuple = (1.0, 1.0, 1.0)


def shade_phong(
    img: ChannelImage,
    light_dir,
    material: PhongMaterial = None,
    view_dir=(0.0, 0.0, -1.0),
) -> np.ndarray:
    """Phong-shade an iso channel image; returns an rgb array (3,H,W)."""
    material = material or PhongMaterial()
    nrm = img.channel("normal")
    msk = img.channel("mask")[0]
    l = np.asarray(light_dir, dtype=np.float64)
    l = l / np.linalg.norm(l)
    v = np.asarray(view_dir, dtype=np.float64)
    v = v / np.linalg.norm(v)
    n = nrm.astype(np.float64)
    ndotl = np.clip((n * l[:, None, None]).sum(axis=0), 0.0, 1.0)
    refl = 2.0 * ndotl[None] * n - l[:, None, None]
    rdotv = np.clip((refl * v[:, None, None]).sum(axis=0), 0.0, 1.0)
    spec = material.specular * rdotv**material.shininess
    base = np.asarray(material.color, dtype=np.float64)[:, None, None]
    rgb = base * (material.ambient + material.diffuse * ndotl)[None] + spec[None]
    bg = np.asarray(material.background, dtype=np.float64)[:, None, None]
    out = np.where(msk[None] >= 0.5, rgb, bg)
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def render_lowres(
    vol: VolumeGrid,
    cam: Camera,
    mode: str,
    factor: float = 1.0 / 8.0,
    tf: TransferFunction | None = None,
    isovalue: float = 0.5,
    step: float = 0.25,
    window=None,
    with_gradient: bool = False,
) -> ChannelImage:
    """Full ray cast at reduced resolution (a separate render pass, not a
    downsample of the target image)."""
    if window is None:
        window = (0.0, 0.0, cam.height, cam.width)
    _, _, wh, ww = window
    oh = wh * factor
    ow = ww * factor
    if abs(oh - round(oh)) > 1e-9 or abs(ow - round(ow)) > 1e-9:
        raise ValueError(
            f"window {wh}x{ww} is not divisible by the low-res factor {factor}"
        )
    out_res = (int(round(oh)), int(round(ow)))
    if mode == "iso":
        return raycast_iso(vol, cam, isovalue, step, window=window, out_res=out_res)
    if mode == "dvr":
        if tf is None:
            raise ValueError("dvr mode requires a transfer function")
        return raycast_dvr(
            vol, cam, tf, step, window=window, out_res=out_res,
            with_gradient=with_gradient,
        )
    raise ValueError(f"unknown render mode {mode!r}")
