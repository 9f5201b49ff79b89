"""Differentiable pull-push inpainting on a mipmap hierarchy.

Pull: each coarse cell takes the max of its children's masks and the
mask-weighted mean of their data. Push: each fine pixel gathers from its
coarse neighbours with weights {9,3,3,1}/16 (clipped to bounds) and blends
the interpolation with its own value using the fine mask.

The recursion stops at 1x1 or once a level's mask is positive everywhere.
The top level always performs one pull/push cycle: on binary inputs this
reproduces the plain algorithm bit for bit (a dense mask makes the blend a
no-op), while fractional training masks still receive real inpainting and
meaningful mask gradients.

Forward math runs in float64; the hand-derived backward is the exact
adjoint of that forward, with max-pool gradients routed to the first
maximal child.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc

_PUSH_WEIGHTS = (9.0 / 16.0, 3.0 / 16.0, 3.0 / 16.0, 1.0 / 16.0)


@dataclass
class SparseImage:
    """Fractional (training) or binary (validation) mask plus channel data."""

    mask: np.ndarray  # (H,W) in [0,1]
    data: np.ndarray  # (C,H,W)

    def __post_init__(self):
        self.mask = np.ascontiguousarray(self.mask, dtype=np.float32)
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.mask.ndim != 2 or self.data.ndim != 3:
            raise ValueError("mask must be (H,W) and data (C,H,W)")
        if self.data.shape[1:] != self.mask.shape:
            raise ValueError(
                f"data spatial dims {self.data.shape[1:]} != mask {self.mask.shape}"
            )


# ---------------------------------------------------------------------------
# pull (weighted area downsampling)


def _pull(mask, data):
    c = data.shape[0]
    h, w = mask.shape
    ph, pw = h % 2, w % 2
    mp = np.pad(mask, ((0, ph), (0, pw))) if (ph or pw) else mask
    dp = np.pad(data, ((0, 0), (0, ph), (0, pw))) if (ph or pw) else data
    h2, w2 = mp.shape[0] // 2, mp.shape[1] // 2
    mb = mp.reshape(h2, 2, w2, 2).transpose(0, 2, 1, 3).reshape(h2, w2, 4)
    db = dp.reshape(c, h2, 2, w2, 2).transpose(0, 1, 3, 2, 4).reshape(c, h2, w2, 4)
    navg = mb.sum(axis=2)
    arg = mb.argmax(axis=2)  # ties -> lowest flat child index
    nmax = np.take_along_axis(mb, arg[..., None], axis=2)[..., 0]
    dsum = (db * mb[None]).sum(axis=3)
    filled = navg > 0
    denom = np.where(filled, navg, 1.0)
    mask_low = np.where(filled, nmax, 0.0)
    data_low = np.where(filled[None], dsum / denom[None], 0.0)
    saved = {
        "mb": mb, "db": db, "navg": navg, "arg": arg, "filled": filled,
        "data_low": data_low, "shape": (h, w, ph, pw),
    }
    return mask_low, data_low, saved


def _pull_backward(gml, gdl, saved):
    mb, db = saved["mb"], saved["db"]
    navg, arg, filled = saved["navg"], saved["arg"], saved["filled"]
    data_low = saved["data_low"]
    h, w, ph, pw = saved["shape"]
    c = db.shape[0]
    h2, w2 = mb.shape[:2]
    denom = np.where(filled, navg, 1.0)

    gmb = np.zeros_like(mb)
    # max routing for the mask
    routed = np.where(filled, gml, 0.0)
    np.put_along_axis(gmb, arg[..., None], routed[..., None], axis=2)
    # data-average terms d(dlow)/d(mask child) = (d_child - dlow)/navg
    diff = (db - data_low[..., None]) / denom[None, ..., None]
    gmb += np.where(filled[None, ..., None], gdl[..., None] * diff, 0.0).sum(axis=0)
    gdb = np.where(
        filled[None, ..., None],
        gdl[..., None] * (mb / denom[..., None])[None],
        0.0,
    )

    gm_pad = gmb.reshape(h2, w2, 2, 2).transpose(0, 2, 1, 3).reshape(2 * h2, 2 * w2)
    gd_pad = (
        gdb.reshape(c, h2, w2, 2, 2).transpose(0, 1, 3, 2, 4).reshape(c, 2 * h2, 2 * w2)
    )
    return gm_pad[:h, :w], gd_pad[:, :h, :w]


# ---------------------------------------------------------------------------
# push (weighted bilinear upsampling + blend)


def _push_indices(h, w, h2, w2):
    a = np.arange(h)
    b = np.arange(w)
    ihat = a // 2
    jhat = b // 2
    i2 = ihat + np.where(a % 2 == 0, -1, 1)
    j2 = jhat + np.where(b % 2 == 0, -1, 1)
    vi = (i2 >= 0) & (i2 < h2)
    vj = (j2 >= 0) & (j2 < w2)
    i2c = np.clip(i2, 0, h2 - 1)
    j2c = np.clip(j2, 0, w2 - 1)
    ones_i = np.ones(h, dtype=bool)
    ones_j = np.ones(w, dtype=bool)
    # (row index, col index, weight, row valid, col valid) per neighbour
    return (
        (ihat, jhat, _PUSH_WEIGHTS[0], ones_i, ones_j),
        (i2c, jhat, _PUSH_WEIGHTS[1], vi, ones_j),
        (ihat, j2c, _PUSH_WEIGHTS[2], ones_i, vj),
        (i2c, j2c, _PUSH_WEIGHTS[3], vi, vj),
    )


def _push(mask, data, mask_low, data_low):
    c = data.shape[0]
    h, w = mask.shape
    h2, w2 = mask_low.shape
    nbrs = _push_indices(h, w, h2, w2)
    nsum = np.zeros((h, w))
    wsum = np.zeros((h, w))
    dsum = np.zeros((c, h, w))
    for (ri, ci, wk, vi, vj) in nbrs:
        valid = (vi[:, None] & vj[None, :]).astype(np.float64)
        ml = mask_low[ri[:, None], ci[None, :]]
        nsum += wk * valid * ml
        wsum += wk * valid
        dsum += (wk * valid * ml)[None] * data_low[:, ri[:, None], ci[None, :]]
    pos = nsum > 0
    denom = np.where(pos, nsum, 1.0)
    interp = np.where(pos[None], dsum / denom[None], 0.0)
    mask_out = mask + np.where(pos, (1.0 - mask) * nsum / np.where(wsum > 0, wsum, 1.0), 0.0)
    data_out = mask[None] * data + (1.0 - mask)[None] * interp
    saved = {
        "mask": mask, "data": data, "mask_low": mask_low, "data_low": data_low,
        "nsum": nsum, "wsum": wsum, "interp": interp, "pos": pos,
    }
    return mask_out, data_out, saved


def _push_backward(gmo, gdo, saved):
    mask, data = saved["mask"], saved["data"]
    mask_low, data_low = saved["mask_low"], saved["data_low"]
    nsum, wsum, interp, pos = saved["nsum"], saved["wsum"], saved["interp"], saved["pos"]
    h, w = mask.shape
    h2, w2 = mask_low.shape
    denom_n = np.where(pos, nsum, 1.0)
    denom_w = np.where(wsum > 0, wsum, 1.0)

    gm = gmo * (1.0 - np.where(pos, nsum / denom_w, 0.0))
    gm += (gdo * (data - interp)).sum(axis=0)
    gd = gdo * mask[None]

    gml = np.zeros((h2, w2))
    gdl = np.zeros((data.shape[0], h2, w2))
    # shared fine-pixel factors for the coarse scatter
    f_mask = np.where(pos, gmo * (1.0 - mask) / denom_w, 0.0)
    f_data = np.where(pos[None], gdo * (1.0 - mask)[None] / denom_n[None], 0.0)
    for (ri, ci, wk, vi, vj) in _push_indices(h, w, h2, w2):
        valid = vi[:, None] & vj[None, :]
        ml = mask_low[ri[:, None], ci[None, :]]
        dl = data_low[:, ri[:, None], ci[None, :]]
        contrib_m = wk * np.where(valid, f_mask, 0.0)
        contrib_m += wk * np.where(valid[None], f_data * (dl - interp), 0.0).sum(axis=0)
        contrib_d = wk * np.where(valid[None], f_data * ml[None], 0.0)
        lin = (ri[:, None] * w2 + ci[None, :]).ravel()
        np.add.at(gml.ravel(), lin, contrib_m.ravel())
        flat_gdl = gdl.reshape(gdl.shape[0], -1)
        for ch in range(gdl.shape[0]):
            np.add.at(flat_gdl[ch], lin, contrib_d[ch].ravel())
    return gm, gd, gml, gdl


# ---------------------------------------------------------------------------
# recursion


def _inpaint(mask, data, top):
    h, w = mask.shape
    if h <= 1 or w <= 1:
        return mask, data, {"kind": "leaf"}
    if not top and np.all(mask > 0):
        return mask, data, {"kind": "leaf"}
    mask_low, data_low, pull_saved = _pull(mask, data)
    ml2, dl2, inner = _inpaint(mask_low, data_low, top=False)
    mask_out, data_out, push_saved = _push(mask, data, ml2, dl2)
    return mask_out, data_out, {
        "kind": "node", "pull": pull_saved, "push": push_saved, "inner": inner,
    }


def _inpaint_backward(gmo, gdo, rec):
    if rec["kind"] == "leaf":
        return gmo, gdo
    gm, gd, gml2, gdl2 = _push_backward(gmo, gdo, rec["push"])
    gml, gdl = _inpaint_backward(gml2, gdl2, rec["inner"])
    gm2, gd2 = _pull_backward(gml, gdl, rec["pull"])
    return gm + gm2, gd + gd2


def pullpush_with_saved(mask: np.ndarray, data: np.ndarray):
    """Forward pass keeping the per-level state the adjoint needs."""
    m64 = np.asarray(mask, dtype=np.float64)
    d64 = np.asarray(data, dtype=np.float64)
    mo, do, rec = _inpaint(m64, d64, top=True)
    return mo, do, rec


def pullpush_forward(sparse: SparseImage):
    """Inpaint a sparse image; returns (mask_out, data_out) float32."""
    mo, do, _ = pullpush_with_saved(sparse.mask, sparse.data)
    return mo.astype(np.float32), do.astype(np.float32)


def pullpush_backward(grad_mask_out, grad_data_out, rec):
    """Adjoint of the full recursion (push, inner levels, then pull)."""
    gm, gd = _inpaint_backward(
        np.asarray(grad_mask_out, dtype=np.float64),
        np.asarray(grad_data_out, dtype=np.float64),
        rec,
    )
    return gm, gd


def pullpush_op(mask_dv: tc.DiffValue, data_dv: tc.DiffValue):
    """Tape node wrapping the inpainting; returns (mask_out, data_out)."""
    mv, dv = mask_dv.value, data_dv.value
    if mv.ndim != 2 or dv.ndim != 3 or dv.shape[1:] != mv.shape:
        raise tc.ShapeError(
            f"pullpush: mask {mv.shape} incompatible with data {dv.shape}"
        )
    mo, do, rec = pullpush_with_saved(mv, dv)
    out = np.concatenate([mo[None], do], axis=0).astype(np.float32)

    def bwd(g):
        gm, gd = _inpaint_backward(
            np.asarray(g[0], dtype=np.float64),
            np.asarray(g[1:], dtype=np.float64),
            rec,
        )
        return [
            (mask_dv.node_id, gm.astype(np.float32)),
            (data_dv.node_id, gd.astype(np.float32)),
        ]

    node = mask_dv.tape._push(
        "pullpush", out, (mask_dv.node_id, data_dv.node_id), bwd
    )
    mask_out = tc.slice_channels(node, 0, 1)
    data_out = tc.slice_channels(node, 1, out.shape[0])
    return mask_out, data_out
