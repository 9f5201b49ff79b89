"""Differentiable pixel selection: importance normalization, hard rejection
sampling for validation, and the smooth sigmoid relaxation for training.

The backward pass treats the map mean as a function of the input, so every
pixel receives both its direct term (gated where the normalization clamped
at 1) and a shared mean-coupling term.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensorcore as tc
from .patterns import SamplePattern


@dataclass
class NormalizationParams:
    mu: float = 0.05  # target mean sample fraction
    l: float = 0.002  # lower bound kept in empty regions
    eps: float = 1e-7

    def __post_init__(self):
        if not 0 < self.mu <= 1:
            raise ValueError(f"mu must be in (0,1], got {self.mu}")
        if not 0 < self.l <= self.mu:
            raise ValueError(f"need 0 < l <= mu, got l={self.l}, mu={self.mu}")


@dataclass
class SamplerConfig:
    alpha: float = 50.0  # sigmoid steepness
    pattern: SamplePattern = field(default=None)

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")


# ---------------------------------------------------------------------------
# plain-array forward/backward


def normalize_importance(imp: np.ndarray, params: NormalizationParams):
    """min(1, l + I*(mu-l)/(mean(I)+eps)); returns (I', saved state)."""
    i64 = np.asarray(imp, dtype=np.float64)
    if np.any(i64 < 0):
        raise ValueError("importance map must be nonnegative")
    mu_i = i64.mean()
    scale = (params.mu - params.l) / (mu_i + params.eps)
    pre = params.l + i64 * scale
    out = np.minimum(1.0, pre)
    saved = {
        "imp": i64,
        "mu_i": mu_i,
        "gate": pre < 1.0,  # clamped pixels pass no direct gradient
        "params": params,
        "norm": out,
    }
    return out.astype(np.float32), saved


def normalize_backward(grad_norm: np.ndarray, saved) -> np.ndarray:
    """Adjoint of normalize_importance, including the mean-coupling term."""
    params = saved["params"]
    gate = saved["gate"]
    g = np.asarray(grad_norm, dtype=np.float64)
    scale = (params.mu - params.l) / (saved["mu_i"] + params.eps)
    direct = np.where(gate, g * scale, 0.0)
    mean_adj = np.sum(
        np.where(
            gate,
            saved["imp"] * (params.l - params.mu) / (saved["mu_i"] + params.eps) ** 2 * g,
            0.0,
        )
    )
    return direct + mean_adj / g.size


def sample_hard(norm: np.ndarray, pattern: SamplePattern, target: np.ndarray):
    """Strict-threshold selection: pixel taken iff I' - P > 0.

    Returns (S, taken). In the real-render path ``taken`` drives masked ray
    casting instead of multiplying a precomputed target.
    """
    taken = np.asarray(norm, dtype=np.float64) - pattern.thresholds > 0
    s = (target * taken.astype(np.float32)).astype(np.float32)
    return s, taken


def smooth_weights(norm, pattern: SamplePattern, alpha: float) -> np.ndarray:
    w = tc.stable_sigmoid(alpha * (np.asarray(norm, np.float64) - pattern.thresholds))
    return w.astype(np.float32)


def sampler_forward(
    imp: np.ndarray,
    pattern: SamplePattern,
    target: np.ndarray,
    params: NormalizationParams,
    alpha: float = 50.0,
):
    """Full smooth-sampling forward pass: S = sigmoid(alpha*(I'-P)) * T.

    Returns (S, weights, saved) with the state the adjoint needs.
    """
    norm, saved_n = normalize_importance(imp, params)
    x = alpha * (norm.astype(np.float64) - pattern.thresholds)
    sig = tc.stable_sigmoid(x)
    s = (sig[None] * target if target.ndim == 3 else sig * target).astype(np.float32)
    saved = {
        "norm_saved": saved_n,
        "sig": sig,
        "alpha": alpha,
        "target": np.asarray(target, dtype=np.float64),
    }
    return s, sig.astype(np.float32), saved


def sampler_backward(grad_s: np.ndarray, saved) -> np.ndarray:
    """Three-stage adjoint of sampler_forward w.r.t. the raw importance map."""
    sig = saved["sig"]
    alpha = saved["alpha"]
    tgt = saved["target"]
    g = np.asarray(grad_s, dtype=np.float64)
    if tgt.ndim == 3:
        grad_w = (g * tgt).sum(axis=0)
    else:
        grad_w = g * tgt
    grad_norm = grad_w * alpha * sig * (1.0 - sig)
    return normalize_backward(grad_norm, saved["norm_saved"])


# ---------------------------------------------------------------------------
# tape ops for the training path


def normalize_op(imp: tc.DiffValue, params: NormalizationParams) -> tc.DiffValue:
    """Importance normalization as a tape node with the custom adjoint."""
    out, saved = normalize_importance(imp.value, params)

    def bwd(g):
        return [(imp.node_id, normalize_backward(g, saved).astype(np.float32))]

    return imp.tape._push("normalize_importance", out, (imp.node_id,), bwd)


def smooth_select_op(
    norm: tc.DiffValue, pattern: SamplePattern, alpha: float
) -> tc.DiffValue:
    """Fractional mask sigmoid(alpha*(I'-P)); gradients into P are dropped
    (the pattern is a fixed input)."""
    shifted = tc.add_const(norm, -pattern.thresholds.reshape(norm.shape))
    return tc.sigmoid(tc.mul_scalar(shifted, alpha))


def sample_smooth(
    norm: tc.DiffValue,
    pattern: SamplePattern,
    target: np.ndarray,
    alpha: float = 50.0,
):
    """Smooth selection of target pixels; returns (S, fractional mask)."""
    w = smooth_select_op(norm, pattern, alpha)
    s = tc.mul_const(w, np.asarray(target, dtype=np.float32))
    return s, w
