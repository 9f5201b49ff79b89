"""Training losses and the PSNR/SSIM quality metrics.

Loss functions take tape values and return float64 scalars on the tape;
metrics are plain-array functions. SSIM uses an 11x11 Gaussian window
(sigma 1.5) over the valid region with the standard constants on a [0,1]
data range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc


@dataclass
class LossWeights:
    lambda_m: float = 5.0
    lambda_bce: float = 5.0
    lambda_bounds: float = 0.01
    lambda_n: float = 50.0
    lambda_d: float = 5.0
    rho: float = 0.1

    def __post_init__(self):
        for name, v in self.__dict__.items():
            if v < 0:
                raise ValueError(f"loss weight {name} must be >= 0, got {v}")


BCE_CLAMP = 1e-6


def l1_channel(out: tc.DiffValue, target: np.ndarray, channels=None) -> tc.DiffValue:
    """Mean absolute difference over the selected channel range."""
    if channels is not None:
        c0, c1 = channels
        out = tc.slice_channels(out, c0, c1)
        target = target[c0:c1]
    if out.shape != target.shape:
        raise tc.ShapeError(f"l1: output {out.shape} vs target {target.shape}")
    return tc.mean_all(tc.absolute(tc.add_const(out, -target.astype(np.float32))))


def bce_mask(out_mask: tc.DiffValue, target_mask: np.ndarray) -> tc.DiffValue:
    """Binary cross entropy; predictions clamped to [delta, 1-delta] first."""
    t = np.asarray(target_mask, dtype=np.float32)
    o = tc.clamp(out_mask, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pos = tc.mul_const(tc.log(o), -t)
    one_minus = tc.add_scalar(tc.mul_scalar(o, -1.0), 1.0)
    neg = tc.mul_const(tc.log(one_minus), -(1.0 - t))
    return tc.mean_all(tc.add(pos, neg))


def bounds_loss(out_mask: tc.DiffValue) -> tc.DiffValue:
    """mean(max(0, (2x-1)^2 - 1)); zero inside [0,1], pushes strays back."""
    y = tc.add_scalar(tc.mul_scalar(out_mask, 2.0), -1.0)
    y2 = tc.mul(y, y)
    return tc.mean_all(tc.relu(tc.add_scalar(y2, -1.0)))


def importance_prior(imp: tc.DiffValue) -> tc.DiffValue:
    """(1 - mean(I))^2, keeping the pre-normalization map near unit mean."""
    m = tc.add_scalar(tc.mul_scalar(tc.mean_all(imp), -1.0), 1.0)
    return tc.mul(m, m)


# iso channel ranges: mask, normal, depth
ISO_MASK = (0, 1)
ISO_NORMAL = (1, 4)
ISO_DEPTH = (4, 5)


def total_loss_iso(
    out: tc.DiffValue,
    target: np.ndarray,
    imp: tc.DiffValue,
    weights: LossWeights = None,
) -> tc.DiffValue:
    """Weighted sum of the iso-mode terms on the raw network output."""
    w = weights or LossWeights()
    mask_dv = tc.slice_channels(out, *ISO_MASK)
    t32 = np.asarray(target, dtype=np.float32)
    total = tc.mul_scalar(l1_channel(out, t32, ISO_MASK), w.lambda_m)
    total = tc.add(total, tc.mul_scalar(l1_channel(out, t32, ISO_NORMAL), w.lambda_n))
    total = tc.add(total, tc.mul_scalar(l1_channel(out, t32, ISO_DEPTH), w.lambda_d))
    total = tc.add(total, tc.mul_scalar(bce_mask(mask_dv, t32[0:1]), w.lambda_bce))
    total = tc.add(total, tc.mul_scalar(bounds_loss(mask_dv), w.lambda_bounds))
    total = tc.add(total, tc.mul_scalar(importance_prior(imp), w.rho))
    return total


def total_loss_dvr(out: tc.DiffValue, target: np.ndarray) -> tc.DiffValue:
    """L1 on rgba plus (1 - SSIM) on rgb as the structural term."""
    t32 = np.asarray(target, dtype=np.float32)
    l1 = l1_channel(out, t32, (0, 4))
    rgb = tc.slice_channels(out, 0, 3)
    sim = ssim_op(rgb, t32[0:3])
    return tc.add(l1, tc.add_scalar(tc.mul_scalar(sim, -1.0), 1.0))


# ---------------------------------------------------------------------------
# metrics


def psnr_from_mse(mse: float) -> float:
    if mse <= 0:
        return float("inf")
    return float(-10.0 * np.log10(mse))


def psnr(out: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB from the mean squared error."""
    o = np.asarray(out, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if o.shape != t.shape:
        raise ValueError(f"psnr: shapes {o.shape} vs {t.shape} differ")
    return psnr_from_mse(float(np.mean((o - t) ** 2)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    win = np.outer(g, g)
    return win / win.sum()


def _corr_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    kh, kw = win.shape
    view = np.lib.stride_tricks.sliding_window_view(img, (kh, kw), axis=(-2, -1))
    return np.einsum("...ij,ij->...", view, win)


def ssim(
    out: np.ndarray,
    target: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    c1: float = 0.01**2,
    c2: float = 0.03**2,
) -> float:
    """Mean local SSIM over the valid region, averaged over channels."""
    o = np.asarray(out, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if o.shape != t.shape:
        raise ValueError(f"ssim: shapes {o.shape} vs {t.shape} differ")
    if o.ndim == 2:
        o, t = o[None], t[None]
    h, w = o.shape[-2:]
    size = min(window, h, w)
    if size % 2 == 0:
        size -= 1
    win = gaussian_window(size, sigma)
    mu1 = _corr_valid(o, win)
    mu2 = _corr_valid(t, win)
    s11 = _corr_valid(o * o, win) - mu1 * mu1
    s22 = _corr_valid(t * t, win) - mu2 * mu2
    s12 = _corr_valid(o * t, win) - mu1 * mu2
    num = (2 * mu1 * mu2 + c1) * (2 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return float(np.mean(num / den))


def ssim_op(
    out: tc.DiffValue,
    target: np.ndarray,
    window: int = 11,
    sigma: float = 1.5,
    c1: float = 0.01**2,
    c2: float = 0.03**2,
) -> tc.DiffValue:
    """Differentiable SSIM built from tape ops; same convention as ssim()."""
    t = np.asarray(target, dtype=np.float32)
    h, w = t.shape[-2:]
    size = min(window, h, w)
    if size % 2 == 0:
        size -= 1
    win = gaussian_window(size, sigma).astype(np.float32)
    mu2 = _corr_valid(t.astype(np.float64), win).astype(np.float32)
    s22 = (_corr_valid((t * t).astype(np.float64), win) - mu2.astype(np.float64) ** 2).astype(np.float32)

    mu1 = tc.correlate_fixed(out, win)
    e_oo = tc.correlate_fixed(tc.mul(out, out), win)
    e_ot = tc.correlate_fixed(tc.mul_const(out, t), win)
    mu1sq = tc.mul(mu1, mu1)
    s11 = tc.add(e_oo, tc.mul_scalar(mu1sq, -1.0))
    s12 = tc.add(e_ot, tc.mul_scalar(tc.mul_const(mu1, mu2), -1.0))
    num = tc.mul(
        tc.add_scalar(tc.mul_scalar(tc.mul_const(mu1, mu2), 2.0), c1),
        tc.add_scalar(tc.mul_scalar(s12, 2.0), c2),
    )
    den = tc.mul(
        tc.add_scalar(tc.add_const(mu1sq, mu2 * mu2), c1),
        tc.add_scalar(tc.add_const(s11, s22), c2),
    )
    return tc.mean_all(tc.div(num, den))


# ---------------------------------------------------------------------------
# reporting


@dataclass
class MetricReport:
    """Per-image PSNR/SSIM records plus quartile aggregation."""

    entries: list = field(default_factory=list)  # (id, psnr, ssim)

    def add(self, image_id, psnr_db, ssim_val):
        self.entries.append((str(image_id), float(psnr_db), float(ssim_val)))

    def summary(self):
        if not self.entries:
            return {}
        ps = np.array([e[1] for e in self.entries])
        ss = np.array([e[2] for e in self.entries])
        q = lambda a, p: float(np.percentile(a, p))
        return {
            "psnr": (q(ps, 25), q(ps, 50), q(ps, 75)),
            "ssim": (q(ss, 25), q(ss, 50), q(ss, 75)),
        }

    def to_text(self) -> str:
        lines = [f"{i} {p!r} {s!r}" for i, p, s in self.entries]
        summ = self.summary()
        if summ:
            for key in ("psnr", "ssim"):
                q25, med, q75 = summ[key]
                lines.append(f"# {key} q25 {q25:.6f} median {med:.6f} q75 {q75:.6f}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        rep = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            image_id, p, s = line.split()
            rep.entries.append((image_id, float(p), float(s)))
        return rep
