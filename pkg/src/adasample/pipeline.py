"""End-to-end harness: dataset rendering, joint training of the importance
and reconstruction networks, hard-sampling evaluation, and gradient checks.

Training runs the smooth sampling path (fractional masks); evaluation uses
hard rejection sampling and re-renders only the selected pixels.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import losses, nets, pullpush, sampler, tensorcore as tc
from .patterns import SamplePattern, make_pattern
from .render import (
    Camera, ChannelImage, TransferFunction, layout_channels, raycast_dvr,
    raycast_iso, render_lowres,
)
from .volume import VolumeGrid


@dataclass
class TrainSample:
    low: ChannelImage  # rendered at 1/8 of the crop, never downsampled
    target: ChannelImage  # full-resolution crop channels
    volume: VolumeGrid
    camera: Camera
    window: tuple  # (y0, x0, h, w) in the camera's base image
    mode: str
    tf: TransferFunction | None = None

    def __post_init__(self):
        th, tw = self.target.height, self.target.width
        if (self.low.height * 8, self.low.width * 8) != (th, tw):
            raise ValueError(
                f"low-res {self.low.height}x{self.low.width} does not match "
                f"target {th}x{tw} at factor 8"
            )


@dataclass
class TrainConfig:
    mode: str = "iso"
    mu_train: float = 0.1
    mu_eval: float = 0.05
    lower: float = 0.002
    alpha: float = 50.0
    lr: float = 1e-4
    steps: int = 500
    batch: int = 1  # gradient-accumulation count
    seed: int = 0
    pattern: str = "plastic"
    channels: int = 16
    importance_blocks: int = 3
    reconstruction_blocks: int = 4
    use_baseline: bool = True
    global_residual: bool = True
    freeze_importance: bool = False
    checkpoint_every: int = 0
    loss_weights: losses.LossWeights = field(default_factory=losses.LossWeights)

    def __post_init__(self):
        if not 0 < self.alpha <= 100.0:
            raise ValueError("alpha must be in (0, 100] for training configs")
        if self.mode not in ("iso", "dvr"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be positive")

    def net_config(self) -> nets.NetConfig:
        return nets.NetConfig(
            channels=self.channels,
            importance_blocks=self.importance_blocks,
            reconstruction_blocks=self.reconstruction_blocks,
            use_baseline=self.use_baseline,
            global_residual=self.global_residual,
        )


# ---------------------------------------------------------------------------
# dataset generation


def random_orbit_camera(
    vol: VolumeGrid, rng: np.random.Generator, h: int, w: int,
    radius_range=(0.55, 1.0), vfov=np.deg2rad(45.0),
) -> Camera:
    """Camera on a random orbit, always facing the volume center."""
    center = vol.center()
    diag = float(np.linalg.norm(vol.extent))
    radius = diag * rng.uniform(*radius_range)
    az = rng.uniform(0.0, 2.0 * np.pi)
    el = rng.uniform(-np.pi / 3.0, np.pi / 3.0)
    eye = center + radius * np.array(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)]
    )
    up = (0.0, 0.0, 1.0) if abs(np.sin(el)) < 0.95 else (0.0, 1.0, 0.0)
    return Camera(tuple(eye), tuple(center), up, vfov, h, w)


def _render_window(vol, cam, window, out_res, mode, isovalue, step, tf, mask=None):
    if mode == "iso":
        return raycast_iso(
            vol, cam, isovalue, step, mask=mask, window=window, out_res=out_res
        )
    return raycast_dvr(vol, cam, tf, step, mask=mask, window=window, out_res=out_res)


def build_dataset(
    volumes: list,
    n_views: int,
    crop: int = 64,
    seed: int = 0,
    mode: str = "iso",
    tfs: list | None = None,
    full_factor: int = 2,
    isovalue: float = 0.5,
    step: float = 0.25,
    coverage: float = 0.5,
    max_attempts_per_view: int = 30,
) -> list:
    """Render training samples from random orbit cameras and random crops.

    Iso crops must show the surface in at least ``coverage`` of the pixels;
    candidate crops are retried until that holds.
    """
    if crop % 8 != 0:
        raise ValueError(f"crop size {crop} must be divisible by 8")
    if mode == "dvr" and (tfs is None or len(tfs) != len(volumes)):
        raise ValueError("dvr mode needs one transfer function per volume")
    rng = np.random.default_rng(seed)
    full = crop * full_factor
    samples = []
    for view in range(n_views):
        vol = volumes[view % len(volumes)]
        tf = tfs[view % len(volumes)] if tfs else None
        placed = False
        for _ in range(max_attempts_per_view):
            cam = random_orbit_camera(vol, rng, full, full, radius_range=(0.4, 0.75))
            # probe at 1/8 to aim the crop at the object before paying for
            # the full-resolution render
            probe = render_lowres(
                vol, cam, mode, factor=1.0 / 8.0, tf=tf, isovalue=isovalue, step=step
            )
            if mode == "iso":
                pm = probe.channel("mask")[0]
            else:
                pm = (probe.channel("rgba")[3] > 0.01).astype(np.float64)
            if pm.sum() <= 0:
                continue
            ys, xs = np.nonzero(pm > 0)
            wsum = pm[ys, xs]
            cy = float((ys * wsum).sum() / wsum.sum()) * 8 + 4
            cx = float((xs * wsum).sum() / wsum.sum()) * 8 + 4
            jit = crop // 4
            y0 = int(np.clip(round(cy - crop / 2 + rng.integers(-jit, jit + 1)),
                             0, full - crop))
            x0 = int(np.clip(round(cx - crop / 2 + rng.integers(-jit, jit + 1)),
                             0, full - crop))
            window = (y0, x0, crop, crop)
            target = _render_window(
                vol, cam, window, (crop, crop), mode, isovalue, step, tf
            )
            if mode == "iso":
                cov = float(target.channel("mask").mean())
            else:
                cov = float((target.channel("rgba")[3] > 0.01).mean())
            if cov < coverage:
                continue
            low = render_lowres(
                vol, cam, mode, factor=1.0 / 8.0, tf=tf, isovalue=isovalue,
                step=step, window=window,
            )
            samples.append(TrainSample(low, target, vol, cam, window, mode, tf))
            placed = True
            break
        if not placed:
            raise RuntimeError(
                f"no crop with coverage >= {coverage} found for view {view} "
                f"after {max_attempts_per_view} attempts"
            )
    return samples


# ---------------------------------------------------------------------------
# forward pass shared by training and gradient checks


def _forward_loss(
    tape: tc.Tape,
    sample_: TrainSample,
    imp_net: nets.ImportanceNet,
    rec_net: nets.ReconstructionNet,
    pattern: SamplePattern,
    config: TrainConfig,
):
    """Smooth-sampling training forward; returns (loss, aux dict)."""
    target = sample_.target.data
    imp_map = imp_net.forward(tape, sample_.low.data)  # (1,H,W)
    imp2d = tc.reshape(imp_map, imp_map.value.shape[1:])
    params = sampler.NormalizationParams(mu=config.mu_train, l=config.lower)
    norm = sampler.normalize_op(imp2d, params)
    s_dv, w_dv = sampler.sample_smooth(norm, pattern, target, config.alpha)
    pp_mask, pp_data = pullpush.pullpush_op(w_dv, s_dv)
    raw = rec_net.forward(tape, pp_data, w_dv)
    if config.mode == "iso":
        loss = losses.total_loss_iso(raw, target, imp_map, config.loss_weights)
    else:
        # DVR channel losses plus the importance prior that keeps the
        # pre-normalization map bounded
        loss = tc.add(
            losses.total_loss_dvr(raw, target),
            tc.mul_scalar(losses.importance_prior(imp_map), config.loss_weights.rho),
        )
    aux = {"imp": imp_map, "weights": w_dv, "raw": raw, "pp_data": pp_data}
    return loss, aux


@dataclass
class TrainResult:
    loss_curve: list  # (step, loss)
    imp: nets.ImportanceNet
    rec: nets.ReconstructionNet
    checkpoints: list
    config: TrainConfig


def train(config: TrainConfig, dataset: list, out_dir: str | None = None) -> TrainResult:
    """Joint Adam training of both networks over the smooth pipeline."""
    if not dataset:
        raise ValueError("empty dataset")
    h, w = dataset[0].target.height, dataset[0].target.width
    in_ch = layout_channels(dataset[0].target.layout)
    net_cfg = config.net_config()
    imp_net = nets.ImportanceNet(in_ch, net_cfg, seed=config.seed)
    rec_net = nets.ReconstructionNet(in_ch, net_cfg, seed=config.seed + 1)
    pattern = make_pattern(config.pattern, h, w, config.seed)

    all_params = imp_net.parameters() + rec_net.parameters()
    state = tc.adam_init(all_params)
    order_rng = np.random.default_rng(config.seed + 7)
    order = order_rng.permutation(len(dataset))
    pos = 0

    loss_curve = []
    checkpoints = []
    accum = None
    n_imp = len(imp_net.parameters())

    for step_i in range(1, config.steps + 1):
        if pos >= len(order):
            order = order_rng.permutation(len(dataset))
            pos = 0
        sample_ = dataset[order[pos]]
        pos += 1

        tape = tc.Tape()
        loss, _ = _forward_loss(tape, sample_, imp_net, rec_net, pattern, config)
        loss_val = float(loss.value)
        if not np.isfinite(loss_val):
            raise tc.NumericError(f"non-finite loss at step {step_i}")
        tape.backward(loss)
        grads = imp_net.bound_grads(tape) + rec_net.bound_grads(tape)
        if config.freeze_importance:
            grads = [None] * n_imp + grads[n_imp:]
        if config.batch > 1:
            if accum is None:
                accum = [None if g is None else g.copy() for g in grads]
            else:
                for i, g in enumerate(grads):
                    if g is not None:
                        accum[i] = g if accum[i] is None else accum[i] + g
            if step_i % config.batch == 0:
                scaled = [
                    None if g is None else g / config.batch for g in accum
                ]
                tc.adam_step(all_params, scaled, state, config.lr)
                accum = None
        else:
            tc.adam_step(all_params, grads, state, config.lr)
        loss_curve.append((step_i, loss_val))

        if out_dir and config.checkpoint_every and step_i % config.checkpoint_every == 0:
            path = f"{out_dir}/ckpt_step{step_i}.ckpt"
            nets.save_checkpoint(path, config.mode, imp_net, rec_net, config.seed, step_i)
            checkpoints.append(path)

    if out_dir:
        path = f"{out_dir}/ckpt_final.ckpt"
        nets.save_checkpoint(path, config.mode, imp_net, rec_net, config.seed, config.steps)
        checkpoints.append(path)
    return TrainResult(loss_curve, imp_net, rec_net, checkpoints, config)


def save_loss_curve(path: str, curve: list) -> None:
    with open(path, "w") as f:
        for step_i, val in curve:
            f.write(f"{step_i} {val!r}\n")


IMPORTANCE_MODES = ("constant", "gradient", "net-noresidual", "net-residual")


def _importance_for_mode(mode, low_img, h, w, imp_net):
    if mode == "constant":
        return nets.importance_constant(h, w)
    if mode == "gradient":
        return nets.importance_gradient(low_img, upscale=8)
    if mode in ("net-noresidual", "net-residual"):
        if imp_net is None:
            raise ValueError(f"importance mode {mode!r} needs a trained network")
        tape = tc.Tape()
        return imp_net.forward(tape, low_img).value[0]
    raise ValueError(f"unknown importance mode {mode!r}")


def eval_view(
    sample_: TrainSample,
    mu_eval: float,
    importance_mode: str,
    imp_net,
    rec_net,
    pattern: SamplePattern,
    lower: float = 0.002,
    isovalue: float = 0.5,
    step: float = 0.25,
) -> dict:
    """Hard-sampling evaluation of one view; re-renders only taken pixels."""
    target = sample_.target.data
    h, w = sample_.target.height, sample_.target.width
    imp_map = _importance_for_mode(
        importance_mode, sample_.low.data, h, w, imp_net
    )
    params = sampler.NormalizationParams(mu=mu_eval, l=min(lower, mu_eval))
    norm, _ = sampler.normalize_importance(imp_map, params)
    taken = norm - pattern.thresholds > 0

    sparse_img = _render_window(
        sample_.volume, sample_.camera, sample_.window, (h, w), sample_.mode,
        isovalue, step, sample_.tf, mask=taken,
    )
    mask_f = taken.astype(np.float32)
    pp_mask, pp_data = pullpush.pullpush_forward(
        pullpush.SparseImage(mask_f, sparse_img.data)
    )
    if rec_net is not None:
        tape = tc.Tape()
        raw = rec_net.forward(
            tape, tape.const(pp_data), tape.const(mask_f)
        ).value
    else:
        raw = pp_data
    post = nets.postprocess_iso(raw) if sample_.mode == "iso" else nets.postprocess_dvr(raw)
    return {
        "importance": imp_map,
        "normalized": norm,
        "taken": taken,
        "sparse": sparse_img,
        "inpainted": pp_data,
        "output": post,
        "fraction": float(taken.mean()),
        "psnr": losses.psnr(post, target),
        "ssim": losses.ssim(post, target),
    }


def evaluate(
    samples: list,
    mu_eval: float,
    importance_mode: str = "net-residual",
    imp_net=None,
    rec_net=None,
    pattern_strategy: str = "plastic",
    lower: float = 0.002,
    isovalue: float = 0.5,
    step: float = 0.25,
    seed: int = 0,
    threads: int = 1,
):
    """Score PSNR/SSIM of reconstructions against full renders.

    Returns (MetricReport, stats dict with per-view sample fractions).
    """
    if not samples:
        raise ValueError("no evaluation samples")
    h, w = samples[0].target.height, samples[0].target.width
    pattern = make_pattern(pattern_strategy, h, w, seed)

    def run(i_sample):
        i, sample_ = i_sample
        r = eval_view(
            sample_, mu_eval, importance_mode, imp_net, rec_net, pattern,
            lower, isovalue, step,
        )
        return i, r

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            results = list(ex.map(run, enumerate(samples)))
    else:
        results = [run(x) for x in enumerate(samples)]
    results.sort(key=lambda t: t[0])

    report = losses.MetricReport()
    fractions = []
    for i, r in results:
        report.add(i, r["psnr"], r["ssim"])
        fractions.append(r["fraction"])
    return report, {"fractions": fractions}


# ---------------------------------------------------------------------------
# gradient checking


def fd_gradient(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Elementwise central finite differences of a scalar function."""
    g = np.zeros(x.shape, dtype=np.float64)
    for i in range(x.size):
        xp = x.astype(np.float64).copy()
        xp.flat[i] += h
        fp = f(xp.astype(x.dtype))
        xm = x.astype(np.float64).copy()
        xm.flat[i] -= h
        fm = f(xm.astype(x.dtype))
        g.flat[i] = (fp - fm) / (2.0 * h)
    return g


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max |a-n| relative to the larger gradient magnitude scale."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-12)
    return float(np.abs(a - n).max(initial=0.0) / scale)


GRADCHECK_THRESHOLDS = {
    "sampler": {"importance": 1e-3},
    "pullpush": {"data": 1e-3, "mask": 1e-2},
    "conv": {"input": 1e-3, "weights": 1e-3, "bias": 1e-3},
    "end2end": {"importance-net": 1e-2, "reconstruction-net": 1e-2},
}


def gradcheck(stage: str, size: int = 8, seed: int = 0) -> dict:
    """Compare analytic adjoints against central finite differences.

    Returns {input name: max relative error}; thresholds are in
    GRADCHECK_THRESHOLDS.
    """
    rng = np.random.default_rng(seed)
    if stage == "sampler":
        return _gradcheck_sampler(rng, size)
    if stage == "pullpush":
        return _gradcheck_pullpush(rng, size)
    if stage == "conv":
        return _gradcheck_conv(rng, size)
    if stage == "end2end":
        return _gradcheck_end2end(rng, size)
    raise ValueError(f"unknown gradcheck stage {stage!r}")


def _gradcheck_sampler(rng, size):
    imp = rng.uniform(0.0, 1.0, size=(size, size)).astype(np.float32)
    target = rng.normal(size=(2, size, size)).astype(np.float32)
    pattern = make_pattern("plastic", size, size)
    params = sampler.NormalizationParams(mu=0.3, l=0.01)

    def f(x):
        s, _, _ = sampler.sampler_forward(x, pattern, target, params, alpha=20.0)
        return float(s.sum(dtype=np.float64))

    _, _, saved = sampler.sampler_forward(imp, pattern, target, params, alpha=20.0)
    analytic = sampler.sampler_backward(np.ones_like(target), saved)
    numeric = fd_gradient(f, imp)
    return {"importance": max_rel_error(analytic, numeric)}


def _gradcheck_pullpush(rng, size):
    mask = rng.uniform(0.2, 0.8, size=(size, size)).astype(np.float32)
    data = rng.normal(size=(2, size, size)).astype(np.float32)
    u = rng.normal(size=(size, size))
    v = rng.normal(size=(2, size, size))

    def f_data(d):
        mo, do, _ = pullpush.pullpush_with_saved(mask, d)
        return float((u * mo).sum() + (v * do).sum())

    def f_mask(m):
        mo, do, _ = pullpush.pullpush_with_saved(m, data)
        return float((u * mo).sum() + (v * do).sum())

    _, _, rec = pullpush.pullpush_with_saved(mask, data)
    gm, gd = pullpush.pullpush_backward(u, v, rec)
    err_d = max_rel_error(gd, fd_gradient(f_data, data))
    err_m = max_rel_error(gm, fd_gradient(f_mask, mask))
    return {"data": err_d, "mask": err_m}


def _gradcheck_conv(rng, size):
    x0 = rng.normal(size=(2, size, size)).astype(np.float32)
    w0 = rng.normal(size=(3, 2, 3, 3)).astype(np.float32) * 0.5
    b0 = rng.normal(size=(3,)).astype(np.float32) * 0.1

    def run(x, w, b):
        tape = tc.Tape()
        xv, wv, bv = tape.param(x), tape.param(w), tape.param(b)
        out = tc.sum_all(tc.conv3x3(xv, wv, bv))
        return tape, xv, wv, bv, out

    tape, xv, wv, bv, out = run(x0, w0, b0)
    tape.backward(out)
    ax, aw, ab = tape.grads[xv.node_id], tape.grads[wv.node_id], tape.grads[bv.node_id]

    def f_of(name):
        def f(arr):
            args = {"input": x0, "weights": w0, "bias": b0}
            args[name] = arr
            _, _, _, _, o = run(args["input"], args["weights"], args["bias"])
            return float(o.value)
        return f

    return {
        "input": max_rel_error(ax, fd_gradient(f_of("input"), x0)),
        "weights": max_rel_error(aw, fd_gradient(f_of("weights"), w0)),
        "bias": max_rel_error(ab, fd_gradient(f_of("bias"), b0)),
    }


def _subset_fd(f, arr, coords, h=1e-3):
    out = {}
    for c in coords:
        xp = arr.copy()
        xp.flat[c] += h
        fp = f(xp)
        xm = arr.copy()
        xm.flat[c] -= h
        fm = f(xm)
        out[c] = (fp - fm) / (2.0 * h)
    return out


def _gradcheck_end2end(rng, size):
    """Loss gradients w.r.t. both networks' head/out weights on a tiny crop."""
    from .volume import make_synthetic

    if size > 32:
        raise ValueError("end2end gradcheck supports sizes up to 32")
    vol = make_synthetic("sphere", (24, 24, 24), seed=int(rng.integers(1 << 30)))
    cam = random_orbit_camera(vol, rng, size * 2, size * 2, radius_range=(0.6, 0.8))
    window = (size // 2, size // 2, size, size)
    target = raycast_iso(vol, cam, 0.5, 0.5, window=window, out_res=(size, size))
    low = render_lowres(vol, cam, "iso", 1 / 8, isovalue=0.5, step=0.5, window=window)
    sample_ = TrainSample(low, target, vol, cam, window, "iso")

    config = TrainConfig(
        steps=1, channels=8, importance_blocks=2, reconstruction_blocks=2,
        seed=int(rng.integers(1 << 30)), mu_train=0.2,
    )
    net_cfg = config.net_config()
    imp_net = nets.ImportanceNet(5, net_cfg, seed=config.seed)
    rec_net = nets.ReconstructionNet(5, net_cfg, seed=config.seed + 1)
    pattern = make_pattern("plastic", size, size)

    def loss_value():
        tape = tc.Tape()
        loss, _ = _forward_loss(tape, sample_, imp_net, rec_net, pattern, config)
        return tape, loss

    tape, loss = loss_value()
    tape.backward(loss)
    imp_grads = imp_net.bound_grads(tape)
    rec_grads = rec_net.bound_grads(tape)

    def check(net, grads, tensor_idx, n_coords):
        arr = net.parameters()[tensor_idx]
        coords = rng.choice(arr.size, size=min(n_coords, arr.size), replace=False)
        an = grads[tensor_idx]

        def f(new):
            old = arr.copy()
            arr[...] = new
            _, l = loss_value()
            arr[...] = old
            return float(l.value)

        fd = _subset_fd(f, arr, coords)
        an_sub = np.array([an.flat[c] for c in coords])
        fd_sub = np.array([fd[c] for c in coords])
        return max_rel_error(an_sub, fd_sub)

    err_imp = max(
        check(imp_net, imp_grads, imp_net.i_head, 6),
        check(imp_net, imp_grads, imp_net.i_out, 6),
    )
    err_rec = max(
        check(rec_net, rec_grads, rec_net.r_head, 6),
        check(rec_net, rec_grads, rec_net.r_out, 6),
    )
    return {"importance-net": err_imp, "reconstruction-net": err_rec}
