"""Random transfer functions for DVR training.

Density structure is found by fitting 1D Gaussian mixtures with EM and
picking the component count by BIC; opacity peaks are then drawn from the
mixture and turned into tent-shaped piecewise-linear control points with
colors from a built-in colormap.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .render import TransferFunction
from .volume import VolumeGrid

STDDEV_FLOOR = 1e-4


@dataclass
class Gmm1D:
    weights: np.ndarray
    means: np.ndarray
    stddevs: np.ndarray
    loglik: float

    @property
    def k(self) -> int:
        return len(self.weights)

    def sample(self, rng: np.random.Generator, n: int = 1) -> np.ndarray:
        comp = rng.choice(self.k, size=n, p=self.weights)
        return rng.normal(self.means[comp], self.stddevs[comp])


def histogram(vol: VolumeGrid, bins: int) -> np.ndarray:
    """Density counts over [0,1]; right-open bins, last bin closed."""
    if bins < 2:
        raise ValueError("need at least 2 bins")
    counts, _ = np.histogram(vol.data, bins=bins, range=(0.0, 1.0))
    return counts


def _log_gauss(x, mean, std):
    return -0.5 * np.log(2.0 * np.pi) - np.log(std) - 0.5 * ((x - mean) / std) ** 2


def _kmeanspp_centers(x, k, rng):
    centers = [x[rng.integers(len(x))]]
    for _ in range(k - 1):
        d2 = np.min([(x - c) ** 2 for c in centers], axis=0)
        total = d2.sum()
        if total <= 0:
            centers.append(x[rng.integers(len(x))])
            continue
        centers.append(x[rng.choice(len(x), p=d2 / total)])
    return np.array(centers)


def fit_gmm(x: np.ndarray, k: int, rng, max_iter: int = 100, tol: float = 1e-6) -> Gmm1D:
    """EM for a 1D mixture; asserts the log-likelihood never decreases."""
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    means = _kmeanspp_centers(x, k, rng)
    stds = np.full(k, max(x.std() / k, STDDEV_FLOOR))
    weights = np.full(k, 1.0 / k)
    prev_ll = -np.inf
    ll = prev_ll
    for _ in range(max_iter):
        logp = np.log(weights)[None, :] + _log_gauss(x[:, None], means[None, :], stds[None, :])
        lmax = logp.max(axis=1, keepdims=True)
        lse = lmax[:, 0] + np.log(np.exp(logp - lmax).sum(axis=1))
        ll = lse.sum()
        assert ll >= prev_ll - 1e-8 * max(1.0, abs(prev_ll)), (
            f"EM log-likelihood decreased: {prev_ll} -> {ll}"
        )
        resp = np.exp(logp - lse[:, None])
        nk = resp.sum(axis=0)
        nk = np.maximum(nk, 1e-12)
        weights = nk / n
        means = (resp * x[:, None]).sum(axis=0) / nk
        var = (resp * (x[:, None] - means[None, :]) ** 2).sum(axis=0) / nk
        stds = np.maximum(np.sqrt(var), STDDEV_FLOOR)
        if prev_ll > -np.inf and abs(ll - prev_ll) < tol * max(1.0, abs(prev_ll)):
            prev_ll = ll
            break
        prev_ll = ll
    weights = weights / weights.sum()
    return Gmm1D(weights, means, stds, float(prev_ll))


def bic(gmm: Gmm1D, n: int) -> float:
    """-2 logL + p ln n with p = 3k - 1 free parameters."""
    p = 3 * gmm.k - 1
    return -2.0 * gmm.loglik + p * np.log(n)


def fit_gmm_bic(samples, k_max: int = 4, seed: int = 0) -> Gmm1D:
    """Fit mixtures for k = 1..k_max and keep the lowest BIC."""
    x = np.asarray(samples, dtype=np.float64).ravel()
    if len(x) == 0:
        raise ValueError("cannot fit a mixture to an empty sample list")
    if len(x) < 10 * k_max:
        raise ValueError(
            f"need at least {10 * k_max} samples for k_max={k_max}, got {len(x)}"
        )
    rng = np.random.default_rng(seed)
    best = None
    best_bic = np.inf
    for k in range(1, k_max + 1):
        gmm = fit_gmm(x, k, rng)
        score = bic(gmm, len(x))
        if score < best_bic:
            best, best_bic = gmm, score
    return best


def volume_densities(vol: VolumeGrid, max_samples: int = 100_000, seed: int = 0):
    """Subsampled voxel densities for mixture fitting."""
    flat = vol.data.ravel()
    if len(flat) <= max_samples:
        return flat.astype(np.float64)
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(flat), size=max_samples, replace=False)
    return flat[idx].astype(np.float64)


# ---------------------------------------------------------------------------
# colormaps (anchor tables: density, r, g, b)

COLORMAPS = {
    "viridis": [
        (0.00, 0.267, 0.005, 0.329),
        (0.25, 0.229, 0.322, 0.546),
        (0.50, 0.128, 0.567, 0.551),
        (0.75, 0.369, 0.789, 0.383),
        (1.00, 0.993, 0.906, 0.144),
    ],
    "plasma": [
        (0.00, 0.050, 0.030, 0.528),
        (0.25, 0.494, 0.012, 0.658),
        (0.50, 0.798, 0.280, 0.470),
        (0.75, 0.973, 0.585, 0.252),
        (1.00, 0.940, 0.975, 0.131),
    ],
    "coolwarm": [
        (0.00, 0.230, 0.299, 0.754),
        (0.50, 0.865, 0.865, 0.865),
        (1.00, 0.706, 0.016, 0.150),
    ],
    "gray": [
        (0.00, 0.0, 0.0, 0.0),
        (1.00, 1.0, 1.0, 1.0),
    ],
    "rainbow": [
        (0.00, 0.0, 0.0, 1.0),
        (0.25, 0.0, 1.0, 1.0),
        (0.50, 0.0, 1.0, 0.0),
        (0.75, 1.0, 1.0, 0.0),
        (1.00, 1.0, 0.0, 0.0),
    ],
}


def colormap_lookup(name: str, density) -> np.ndarray:
    """rgb (...,3) for densities in [0,1] from a built-in map."""
    if name not in COLORMAPS:
        raise ValueError(f"unknown colormap {name!r}; have {sorted(COLORMAPS)}")
    table = np.asarray(COLORMAPS[name], dtype=np.float64)
    d = np.asarray(density, dtype=np.float64)
    return np.stack(
        [np.interp(d, table[:, 0], table[:, 1 + i]) for i in range(3)], axis=-1
    )


def sample_random_tf(gmm: Gmm1D, colormap: str = "viridis", seed: int = 0) -> TransferFunction:
    """Random tent-peak transfer function: 3-5 peaks at mixture-drawn
    densities, widths U[0.005,0.03], opacities U[0.1,1.0]."""
    rng = np.random.default_rng(seed)
    n_peaks = int(rng.integers(3, 6))
    peaks = []
    for _ in range(n_peaks):
        density = float(np.clip(gmm.sample(rng, 1)[0], 0.0, 1.0))
        width = float(rng.uniform(0.005, 0.03))
        opacity = float(rng.uniform(0.1, 1.0))
        peaks.append({"density": density, "width": width, "opacity": opacity})

    def tent(d):
        a = 0.0
        for p in peaks:
            t = 1.0 - abs(d - p["density"]) / p["width"]
            if t > 0:
                a = max(a, t * p["opacity"])
        return a

    knots = {0.0, 1.0}
    for p in peaks:
        for d in (p["density"] - p["width"], p["density"], p["density"] + p["width"]):
            knots.add(float(np.clip(d, 0.0, 1.0)))
    ds = sorted(knots)
    merged = [ds[0]]
    for d in ds[1:]:
        if d - merged[-1] > 1e-6:
            merged.append(d)
    ds = np.asarray(merged)
    rgb = colormap_lookup(colormap, ds)
    opac = np.array([tent(d) for d in ds])
    points = np.column_stack([ds, rgb, opac])
    return TransferFunction(points, peaks=peaks)
