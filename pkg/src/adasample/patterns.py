"""Threshold fields for pixel rejection sampling.

A pattern assigns each pixel a unique threshold k/(H*W); thresholding at a
level mu selects the pixels whose rank falls below mu*H*W. Four strategies:
seeded random permutation, breadth-first quad-tree enumeration, and
low-discrepancy Halton / plastic-recurrence orderings.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np


@dataclass
class SamplePattern:
    h: int
    w: int
    thresholds: np.ndarray  # (H,W) float32, a permutation of {k/(HW)}
    strategy: str
    seed: int | None = None


def _ranks_to_pattern(ranks: np.ndarray, strategy: str, seed=None) -> SamplePattern:
    h, w = ranks.shape
    thr = (ranks.astype(np.float64) / (h * w)).astype(np.float32)
    return SamplePattern(h, w, thr, strategy, seed)


def pattern_random(h: int, w: int, seed: int = 0) -> SamplePattern:
    """Seeded Fisher-Yates permutation of the rank values."""
    rng = np.random.default_rng(seed)
    ranks = rng.permutation(h * w).reshape(h, w)
    return _ranks_to_pattern(ranks, "random", seed)


def pattern_regular(h: int, w: int) -> SamplePattern:
    """Breadth-first quad-tree enumeration; ranks follow first-visit order.

    Each cell's representative is its top-left pixel; children are visited
    in (TL, TR, BL, BR) order. Non-power-of-two sizes are generated at the
    next power of two, cropped, and re-ranked.
    """
    side = 1
    while side < max(h, w):
        side *= 2
    ranks_full = np.full((side, side), -1, dtype=np.int64)
    rank = 0
    cells = [(0, 0, side)]
    while cells:
        nxt = []
        for (r, c, s) in cells:
            if ranks_full[r, c] < 0:
                ranks_full[r, c] = rank
                rank += 1
            if s > 1:
                half = s // 2
                nxt.extend(
                    [(r, c, half), (r, c + half, half),
                     (r + half, c, half), (r + half, c + half, half)]
                )
        cells = nxt
    cropped = ranks_full[:h, :w]
    # re-rank after cropping so thresholds remain a permutation of {k/(HW)}
    order = np.argsort(cropped.ravel(), kind="stable")
    ranks = np.empty(h * w, dtype=np.int64)
    ranks[order] = np.arange(h * w)
    return _ranks_to_pattern(ranks.reshape(h, w), "regular")


def radical_inverse(n: int, base: int) -> float:
    """Digit-reversal of n in the given base, mapped into [0,1)."""
    inv = 0.0
    f = 1.0 / base
    while n > 0:
        inv += (n % base) * f
        n //= base
        f /= base
    return inv


def plastic_number(tol: float = 1e-14) -> float:
    """Real root of x^3 = x + 1 by Newton iteration."""
    x = 1.3
    for _ in range(64):
        fx = x**3 - x - 1.0
        if abs(fx) < tol:
            break
        x -= fx / (3.0 * x**2 - 1.0)
    return x


@lru_cache(maxsize=None)
def _ring_offsets(radius: int):
    """Chebyshev ring at the given radius, in scanline order."""
    offs = []
    for dr in range(-radius, radius + 1):
        for dc in range(-radius, radius + 1):
            if max(abs(dr), abs(dc)) == radius:
                offs.append((dr, dc))
    return tuple(offs)


def _claim_ranks(points_rc, h: int, w: int) -> np.ndarray:
    """Assign ranks by first claim; collisions spiral out to the nearest
    unclaimed pixel (scanline order within each Chebyshev ring)."""
    claimed = np.zeros((h, w), dtype=bool)
    ranks = np.empty((h, w), dtype=np.int64)
    rank = 0
    maxrad = max(h, w)
    for (r, c) in points_rc:
        if not claimed[r, c]:
            claimed[r, c] = True
            ranks[r, c] = rank
            rank += 1
            continue
        placed = False
        for rad in range(1, maxrad + 1):
            for dr, dc in _ring_offsets(rad):
                rr, cc = r + dr, c + dc
                if 0 <= rr < h and 0 <= cc < w and not claimed[rr, cc]:
                    claimed[rr, cc] = True
                    ranks[rr, cc] = rank
                    rank += 1
                    placed = True
                    break
            if placed:
                break
        if rank == h * w:
            break
    if rank != h * w:
        raise RuntimeError("pattern ranking did not cover the image")
    return ranks


def pattern_halton(h: int, w: int) -> SamplePattern:
    """2D Halton points (bases 2 and 3) ranked by first pixel claim."""
    pts = []
    for n in range(h * w):
        x = radical_inverse(n, 2)
        y = radical_inverse(n, 3)
        pts.append((min(int(y * h), h - 1), min(int(x * w), w - 1)))
    ranks = _claim_ranks(pts, h, w)
    return _ranks_to_pattern(ranks, "halton")


def pattern_plastic(h: int, w: int) -> SamplePattern:
    """Additive recurrence x_n = frac(n*(1/rho, 1/rho^2)), rho the plastic
    number, ranked by first pixel claim."""
    rho = plastic_number()
    a1, a2 = 1.0 / rho, 1.0 / rho**2
    pts = []
    for n in range(1, h * w + 1):
        x = (n * a1) % 1.0
        y = (n * a2) % 1.0
        pts.append((min(int(y * h), h - 1), min(int(x * w), w - 1)))
    ranks = _claim_ranks(pts, h, w)
    return _ranks_to_pattern(ranks, "plastic")


PATTERN_STRATEGIES = ("random", "regular", "halton", "plastic")


def make_pattern(strategy: str, h: int, w: int, seed: int = 0) -> SamplePattern:
    if strategy == "random":
        return pattern_random(h, w, seed)
    if strategy == "regular":
        return pattern_regular(h, w)
    if strategy == "halton":
        return pattern_halton(h, w)
    if strategy == "plastic":
        return pattern_plastic(h, w)
    raise ValueError(f"unknown pattern strategy {strategy!r}")
