"""Importance and reconstruction networks built from tape ops.

Both are small fully-convolutional residual stacks (3x3, zero padding,
stride 1). The importance net upsamples an eighth-resolution input to the
target resolution with a screen-space-gradient baseline added residually
before the final upsampling and a softplus output head. The reconstruction
net refines inpainted sparse samples with a global residual connection.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np

from . import tensorcore as tc


@dataclass
class NetConfig:
    """Desk-scale defaults; the reference design uses 64 channels with
    5 importance / 10 reconstruction blocks."""

    channels: int = 16
    importance_blocks: int = 3
    reconstruction_blocks: int = 4
    use_baseline: bool = True
    global_residual: bool = True

    def __post_init__(self):
        if self.channels < 4:
            raise ValueError("channels must be >= 4")
        if self.importance_blocks < 1 or self.reconstruction_blocks < 1:
            raise ValueError("need at least one residual block")


# ---------------------------------------------------------------------------
# non-learned importance baselines


def importance_constant(h: int, w: int) -> np.ndarray:
    """Every pixel equally important."""
    return np.ones((h, w), dtype=np.float32)


def _channel_gradients(img: np.ndarray):
    """Screen-space gradients per channel; central differences inside,
    one-sided at the borders."""
    gx = np.empty_like(img)
    gy = np.empty_like(img)
    gx[:, :, 1:-1] = 0.5 * (img[:, :, 2:] - img[:, :, :-2])
    gx[:, :, 0] = img[:, :, 1] - img[:, :, 0]
    gx[:, :, -1] = img[:, :, -1] - img[:, :, -2]
    gy[:, 1:-1, :] = 0.5 * (img[:, 2:, :] - img[:, :-2, :])
    gy[:, 0, :] = img[:, 1, :] - img[:, 0, :]
    gy[:, -1, :] = img[:, -1, :] - img[:, -2, :]
    return gx, gy


def upscale2x(arr: np.ndarray) -> np.ndarray:
    """Bilinear 2x upsampling (quarter-point convention) of (C,H,W)."""
    from .tensorcore import _up_axis_indices

    c, h, w = arr.shape
    y0, y1, ty = _up_axis_indices(h)
    x0, x1, tx = _up_axis_indices(w)
    rows = arr[:, y0, :] * (1 - ty)[None, :, None] + arr[:, y1, :] * ty[None, :, None]
    return (
        rows[:, :, x0] * (1 - tx)[None, None, :] + rows[:, :, x1] * tx[None, None, :]
    ).astype(np.float32)


def upscale_pow2(arr: np.ndarray, factor: int) -> np.ndarray:
    while factor > 1:
        arr = upscale2x(arr)
        factor //= 2
    return arr


def importance_gradient(
    img: np.ndarray, weights: np.ndarray | None = None, upscale: int = 8
) -> np.ndarray:
    """Weighted sum of squared screen-space gradient magnitudes, bilinearly
    upscaled to the target resolution. Returns (upscale*h, upscale*w)."""
    img = np.asarray(img, dtype=np.float32)
    c = img.shape[0]
    w = np.ones(c, dtype=np.float32) if weights is None else np.asarray(weights, np.float32)
    if w.shape != (c,):
        raise tc.ShapeError(f"baseline weights shape {w.shape} != ({c},)")
    if np.any(w < 0):
        raise ValueError("baseline weights must be nonnegative")
    gx, gy = _channel_gradients(img)
    m = (w[:, None, None] * (gx * gx + gy * gy)).sum(axis=0, keepdims=True)
    if upscale > 1:
        m = upscale_pow2(m, upscale)
    return m[0]


# ---------------------------------------------------------------------------
# parameterized networks


class _ConvStore:
    """Ordered parameter container shared by both networks."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.names: list[str] = []
        self.arrays: list[np.ndarray] = []

    def conv(self, name: str, cin: int, cout: int):
        fan_in = cin * 9
        w = tc.uniform_init(self.rng, (cout, cin, 3, 3), fan_in)
        b = tc.uniform_init(self.rng, (cout,), fan_in)
        self.names.extend([name + ".w", name + ".b"])
        self.arrays.extend([w, b])
        return len(self.arrays) - 2

    def zero_(self):
        for a in self.arrays:
            a[...] = 0.0


class _NetBase:
    def parameters(self) -> list[np.ndarray]:
        return self.store.arrays

    def parameter_names(self) -> list[str]:
        return self.store.names

    def zero_parameters(self):
        self.store.zero_()

    def _apply_conv(self, tape, idx, x):
        w = tape.param(self.store.arrays[idx])
        b = tape.param(self.store.arrays[idx + 1])
        self._bound.extend([(idx, w), (idx + 1, b)])
        return tc.conv3x3(x, w, b)

    def bound_grads(self, tape) -> list[np.ndarray | None]:
        """Gradients for parameters() in order, from the last forward's tape."""
        grads = [None] * len(self.store.arrays)
        for idx, dv in self._bound:
            g = tape.grads.get(dv.node_id)
            if g is not None:
                grads[idx] = g if grads[idx] is None else grads[idx] + g
        return grads


class ImportanceNet(_NetBase):
    """Predicts a nonnegative importance map at 8x the input resolution."""

    def __init__(self, in_channels: int, config: NetConfig = None, seed: int = 0):
        self.config = config or NetConfig()
        self.in_channels = in_channels
        self.baseline_weights = np.ones(in_channels, dtype=np.float32)
        ch = self.config.channels
        st = _ConvStore(seed)
        self.i_head = st.conv("imp.head", in_channels, ch)
        self.i_blocks = [
            (st.conv(f"imp.block{i}.a", ch, ch), st.conv(f"imp.block{i}.b", ch, ch))
            for i in range(self.config.importance_blocks)
        ]
        self.i_up1 = st.conv("imp.up1", ch, ch)
        self.i_up2 = st.conv("imp.up2", ch, ch)
        self.i_post = st.conv("imp.post", ch, ch)
        self.i_out = st.conv("imp.out", ch, 1)
        self.store = st
        self._bound = []

    def forward(self, tape: tc.Tape, low_img: np.ndarray) -> tc.DiffValue:
        """low_img: (C,h,w) eighth-resolution channels -> (1,8h,8w) map."""
        if low_img.shape[0] != self.in_channels:
            raise tc.ShapeError(
                f"importance net expects {self.in_channels} channels, got {low_img.shape[0]}"
            )
        self._bound = []
        x = tape.const(low_img)
        h = tc.relu(self._apply_conv(tape, self.i_head, x))
        for (a, b) in self.i_blocks:
            y = tc.relu(self._apply_conv(tape, a, h))
            y = self._apply_conv(tape, b, y)
            h = tc.add(h, y)
        h = tc.resample2x(h, "bilinear-up")
        h = tc.relu(self._apply_conv(tape, self.i_up1, h))
        h = tc.resample2x(h, "bilinear-up")
        h = tc.relu(self._apply_conv(tape, self.i_up2, h))
        h = tc.relu(self._apply_conv(tape, self.i_post, h))
        h = self._apply_conv(tape, self.i_out, h)
        if self.config.use_baseline:
            base = importance_gradient(low_img, self.baseline_weights, upscale=4)
            h = tc.add_const(h, base[None])
        h = tc.resample2x(h, "bilinear-up")
        return tc.softplus(h)


class ReconstructionNet(_NetBase):
    """Refines inpainted samples; input is the data channels plus the mask."""

    def __init__(self, data_channels: int, config: NetConfig = None, seed: int = 1):
        self.config = config or NetConfig()
        self.data_channels = data_channels
        ch = self.config.channels
        st = _ConvStore(seed)
        self.r_head = st.conv("rec.head", data_channels + 1, ch)
        self.r_blocks = [
            (st.conv(f"rec.block{i}.a", ch, ch), st.conv(f"rec.block{i}.b", ch, ch))
            for i in range(self.config.reconstruction_blocks)
        ]
        self.r_post = st.conv("rec.post", ch, ch)
        self.r_out = st.conv("rec.out", ch, data_channels)
        self.store = st
        self._bound = []

    def forward(
        self,
        tape: tc.Tape,
        inpainted: tc.DiffValue,
        mask: tc.DiffValue,
        residual: tc.DiffValue | None = None,
    ) -> tc.DiffValue:
        """inpainted: (C,H,W), mask: (H,W) or (1,H,W) certainty channel.

        Returns the raw (C,H,W) output; the global residual adds
        ``residual`` (defaults to the inpainted input) when enabled.
        """
        self._bound = []
        if mask.value.ndim == 2:
            mask = tc.reshape(mask, (1,) + mask.value.shape)
        x = tc.concat_channels([inpainted, mask])
        if x.value.shape[0] != self.data_channels + 1:
            raise tc.ShapeError(
                f"reconstruction net expects {self.data_channels + 1} input "
                f"channels, got {x.value.shape[0]}"
            )
        h = tc.relu(self._apply_conv(tape, self.r_head, x))
        for (a, b) in self.r_blocks:
            y = tc.relu(self._apply_conv(tape, a, h))
            y = self._apply_conv(tape, b, y)
            h = tc.add(h, y)
        h = tc.relu(self._apply_conv(tape, self.r_post, h))
        o = self._apply_conv(tape, self.r_out, h)
        if self.config.global_residual:
            o = tc.add(o, residual if residual is not None else inpainted)
        return o


# ---------------------------------------------------------------------------
# output post-processing (display / evaluation path)


def postprocess_iso(raw: np.ndarray) -> np.ndarray:
    """Clamp mask and depth to [0,1]; scale normals to unit length."""
    out = np.asarray(raw, dtype=np.float32).copy()
    out[0] = np.clip(out[0], 0.0, 1.0)
    out[4] = np.clip(out[4], 0.0, 1.0)
    n = out[1:4]
    norm = np.linalg.norm(n, axis=0)
    scale = np.where(norm > 1e-6, 1.0 / np.maximum(norm, 1e-6), 0.0)
    out[1:4] = n * scale[None]
    return out


def postprocess_dvr(raw: np.ndarray) -> np.ndarray:
    out = np.asarray(raw, dtype=np.float32).copy()
    out[0:4] = np.clip(out[0:4], 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = "ADASAMPLE-CKPT1"


def save_checkpoint(
    path: str,
    mode: str,
    imp: ImportanceNet,
    rec: ReconstructionNet,
    seed: int,
    step: int,
) -> None:
    """Text header (architecture, seed, step) + float32 payload in
    parameter declaration order."""
    cfg = imp.config
    header = io.StringIO()
    header.write(f"{CKPT_MAGIC}\n")
    header.write(f"mode {mode}\n")
    header.write(f"in_channels {imp.in_channels}\n")
    header.write(f"data_channels {rec.data_channels}\n")
    header.write(f"channels {cfg.channels}\n")
    header.write(f"importance_blocks {cfg.importance_blocks}\n")
    header.write(f"reconstruction_blocks {cfg.reconstruction_blocks}\n")
    header.write(f"use_baseline {int(cfg.use_baseline)}\n")
    header.write(f"global_residual {int(rec.config.global_residual)}\n")
    header.write(f"seed {seed}\n")
    header.write(f"step {step}\n")
    tensors = list(zip(imp.parameter_names(), imp.parameters())) + list(
        zip(rec.parameter_names(), rec.parameters())
    )
    header.write(f"tensors {len(tensors)}\n")
    for name, arr in tensors:
        dims = " ".join(str(d) for d in arr.shape)
        header.write(f"{name} {dims}\n")
    with open(path, "wb") as f:
        f.write(header.getvalue().encode("ascii"))
        for _, arr in tensors:
            f.write(arr.astype("<f4").tobytes())


class CheckpointError(ValueError):
    pass


def load_checkpoint(path: str):
    """Returns (meta dict, ImportanceNet, ReconstructionNet)."""
    with open(path, "rb") as f:
        magic = f.readline().decode("ascii").strip()
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"{path}: bad checkpoint magic {magic!r}")
        meta = {}
        for key in (
            "mode", "in_channels", "data_channels", "channels",
            "importance_blocks", "reconstruction_blocks", "use_baseline",
            "global_residual", "seed", "step", "tensors",
        ):
            k, v = f.readline().decode("ascii").split()
            if k != key:
                raise CheckpointError(f"{path}: expected header key {key}, got {k}")
            meta[k] = v if key == "mode" else int(v)
        shapes = []
        for _ in range(meta["tensors"]):
            parts = f.readline().decode("ascii").split()
            shapes.append((parts[0], tuple(int(d) for d in parts[1:])))
        payload = f.read()

    cfg = NetConfig(
        channels=meta["channels"],
        importance_blocks=meta["importance_blocks"],
        reconstruction_blocks=meta["reconstruction_blocks"],
        use_baseline=bool(meta["use_baseline"]),
        global_residual=bool(meta["global_residual"]),
    )
    imp = ImportanceNet(meta["in_channels"], cfg, seed=meta["seed"])
    rec = ReconstructionNet(meta["data_channels"], cfg, seed=meta["seed"] + 1)
    tensors = list(zip(imp.parameter_names(), imp.parameters())) + list(
        zip(rec.parameter_names(), rec.parameters())
    )
    if len(tensors) != meta["tensors"]:
        raise CheckpointError(
            f"{path}: architecture mismatch, {len(tensors)} tensors vs "
            f"{meta['tensors']} in file"
        )
    off = 0
    for (name, shape), (want_name, arr) in zip(shapes, tensors):
        if name != want_name or shape != arr.shape:
            raise CheckpointError(
                f"{path}: tensor {name} {shape} does not match architecture "
                f"{want_name} {arr.shape}"
            )
        n = int(np.prod(shape)) * 4
        arr[...] = np.frombuffer(payload[off : off + n], dtype="<f4").reshape(shape)
        off += n
    if off != len(payload):
        raise CheckpointError(f"{path}: payload size mismatch")
    return meta, imp, rec
