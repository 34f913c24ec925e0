"""Small 2-D U-Net assembled from the numerics primitives.

Topology per resolution level: two (conv 3x3 -> instance norm -> leaky ReLU)
blocks. Levels are connected downward by 2x2 stride-2 convolutions (also
normalized and activated) and upward by nearest-neighbor upsampling followed
by a 1x1 channel-mixing conv block, with encoder skips concatenated before
the decoder blocks. A final 1x1 convolution produces 2 logit channels
(background, effusion). Channel width doubles per level, capped at 256.

Optional coordinate channels appended to the input:
  cartesian: raw column index (x) and row index (y), origin top-left;
  radial:    Euclidean pixel distance from the probe apex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    ShapeError,
    Tensor,
    conv2d,
    conv2d_backward,
    instance_norm,
    instance_norm_backward,
    leaky_relu,
    leaky_relu_backward,
    upsample2x,
    upsample2x_backward,
)

CHANNEL_CAP = 256
NORM_EPS = 1e-5
RELU_SLOPE = 0.01

_COORD_CHANNELS = {"none": 1, "cartesian": 3, "radial": 2}


@dataclass
class UNetConfig:
    """Architecture knobs. in_channels is derived from coord_mode when omitted."""

    depth: int = 3
    base_channels: int = 8
    coord_mode: str = "none"
    coord_normalize: bool = False
    in_channels: int | None = None
    num_classes: int = 2

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.base_channels < 1:
            raise ValueError(f"base_channels must be >= 1, got {self.base_channels}")
        if self.coord_mode not in _COORD_CHANNELS:
            raise ValueError(
                f"coord_mode must be one of {sorted(_COORD_CHANNELS)}, got {self.coord_mode!r}"
            )
        expected = _COORD_CHANNELS[self.coord_mode]
        if self.in_channels is None:
            self.in_channels = expected
        elif self.in_channels != expected:
            raise ValueError(
                f"in_channels={self.in_channels} inconsistent with coord_mode="
                f"{self.coord_mode!r} (needs {expected})"
            )
        if self.num_classes != 2:
            raise ValueError("binary segmentation only: num_classes must be 2")


@dataclass
class Model:
    """A network: its config plus named parameter tensors."""

    config: UNetConfig
    params: dict[str, Tensor] = field(default_factory=dict)

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())


def channel_plan(config: UNetConfig) -> list[int]:
    """Feature widths per level, level 0 (full res) .. level depth (bottom)."""
    return [min(config.base_channels << i, CHANNEL_CAP) for i in range(config.depth + 1)]


def _conv_names(config: UNetConfig):
    """(name, out_ch, in_ch, k) for every conv, in forward order."""
    ch = channel_plan(config)
    out = [("enc0.conv0", ch[0], config.in_channels, 3), ("enc0.conv1", ch[0], ch[0], 3)]
    for i in range(1, config.depth + 1):
        level = "bott" if i == config.depth else f"enc{i}"
        out.append((f"down{i}", ch[i], ch[i - 1], 2))
        out.append((f"{level}.conv0", ch[i], ch[i], 3))
        out.append((f"{level}.conv1", ch[i], ch[i], 3))
    for i in reversed(range(config.depth)):
        out.append((f"dec{i}.up", ch[i], ch[i + 1], 1))
        out.append((f"dec{i}.conv0", ch[i], 2 * ch[i], 3))
        out.append((f"dec{i}.conv1", ch[i], ch[i], 3))
    out.append(("head", config.num_classes, ch[0], 1))
    return out


def build_model(config: UNetConfig, seed: int, dtype=np.float32) -> Model:
    """He fan-in normal init for kernels, zero biases, from one seeded stream."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, k, c, ksize in _conv_names(config):
        fan_in = c * ksize * ksize
        std = math.sqrt(2.0 / fan_in)
        w = rng.normal(0.0, std, size=(k, c, ksize, ksize))
        params[name + ".w"] = Tensor(w, dtype=dtype)
        params[name + ".b"] = Tensor(np.zeros((1, k, 1, 1)), dtype=dtype)
    return Model(config=config, params=params)


def add_coord_channels(batch, mode: str, apex=None, normalize: bool = False) -> np.ndarray:
    """Append coordinate planes to a single-channel batch.

    cartesian adds x (column index) then y (row index); radial adds the
    distance to `apex` given as (row, col), which may be fractional or lie
    outside the image. With normalize, cartesian planes are divided by the
    largest index and the radial plane by its own maximum.
    """
    b = np.asarray(batch)
    if b.ndim != 4 or b.shape[1] != 1:
        raise ShapeError(f"batch must be (N, 1, H, W), got {b.shape}")
    if mode == "none":
        return b
    n, _, h, w = b.shape
    dt = b.dtype
    if mode == "cartesian":
        xs = np.broadcast_to(np.arange(w, dtype=dt)[None, :], (h, w))
        ys = np.broadcast_to(np.arange(h, dtype=dt)[:, None], (h, w))
        if normalize:
            xs = xs / max(w - 1, 1)
            ys = ys / max(h - 1, 1)
        planes = np.broadcast_to(np.stack([xs, ys]), (n, 2, h, w))
    elif mode == "radial":
        if apex is None:
            raise ValueError("radial coord mode requires the probe apex (row, col)")
        ar, ac = float(apex[0]), float(apex[1])
        dist = np.hypot(
            np.arange(h, dtype=np.float64)[:, None] - ar,
            np.arange(w, dtype=np.float64)[None, :] - ac,
        )
        if normalize:
            dist = dist / dist.max()
        planes = np.broadcast_to(dist.astype(dt)[None, None], (n, 1, h, w))
    else:
        raise ValueError(f"unknown coord mode {mode!r}")
    return np.ascontiguousarray(np.concatenate([b, planes], axis=1))


def _run(model: Model, x, keep_caches: bool):
    cfg = model.config
    P = model.params
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"batch must be rank 4, got shape {x.shape}")
    n, c, h, w = x.shape
    if c != cfg.in_channels:
        raise ShapeError(f"batch has {c} channels, model expects {cfg.in_channels}")
    div = 1 << cfg.depth
    if h % div or w % div:
        raise ShapeError(f"spatial dims {h}x{w} must be divisible by {div} (depth {cfg.depth})")

    caches: dict | None = {} if keep_caches else None

    def block(hin, name, stride):
        wk = P[name + ".w"].data
        bk = P[name + ".b"].data
        y0 = conv2d(hin, wk, bk.ravel(), stride=stride, pad=(wk.shape[2] - 1) // 2)
        y1 = instance_norm(y0, NORM_EPS)
        y2 = leaky_relu(y1, RELU_SLOPE)
        if caches is not None:
            caches[name] = (hin, y0, y1, stride)
        return y2

    skips = []
    hcur = x
    for i in range(cfg.depth + 1):
        if i > 0:
            hcur = block(hcur, f"down{i}", 2)
        level = "bott" if i == cfg.depth else f"enc{i}"
        hcur = block(hcur, f"{level}.conv0", 1)
        hcur = block(hcur, f"{level}.conv1", 1)
        if i < cfg.depth:
            skips.append(hcur)
    for i in reversed(range(cfg.depth)):
        hcur = block(upsample2x(hcur), f"dec{i}.up", 1)
        hcur = np.concatenate([hcur, skips[i]], axis=1)
        hcur = block(hcur, f"dec{i}.conv0", 1)
        hcur = block(hcur, f"dec{i}.conv1", 1)
    logits = conv2d(hcur, P["head.w"].data, P["head.b"].data.ravel(), stride=1, pad=0)
    if caches is not None:
        caches["head"] = hcur
    return logits, caches


def forward(model: Model, batch) -> np.ndarray:
    """Logits (N, 2, H, W) for a batch (N, in_channels, H, W)."""
    logits, _ = _run(model, batch, keep_caches=False)
    return logits


def forward_with_caches(model: Model, batch):
    """Like forward but also returns the activation caches backward() needs."""
    return _run(model, batch, keep_caches=True)


def backward(model: Model, caches: dict, dlogits):
    """Backprop dlogits through the cached forward pass.

    Returns (grads, dinput); grads maps every parameter name to its gradient
    and is also written onto the parameter tensors' .grad.
    """
    cfg = model.config
    P = model.params
    grads: dict[str, np.ndarray] = {}

    def block_back(dy, name):
        hin, y0, y1, stride = caches[name]
        wk = P[name + ".w"].data
        dy1 = leaky_relu_backward(dy, y1, RELU_SLOPE)
        dy0 = instance_norm_backward(dy1, y0, NORM_EPS)
        dh, dw, db = conv2d_backward(dy0, hin, wk, stride=stride, pad=(wk.shape[2] - 1) // 2)
        grads[name + ".w"] = dw
        grads[name + ".b"] = db.reshape(1, -1, 1, 1)
        return dh

    ch = channel_plan(cfg)
    hhead = caches["head"]
    dh, dwh, dbh = conv2d_backward(np.asarray(dlogits), hhead, P["head.w"].data, stride=1, pad=0)
    grads["head.w"] = dwh
    grads["head.b"] = dbh.reshape(1, -1, 1, 1)

    dskips: list[np.ndarray | None] = [None] * cfg.depth
    for i in range(cfg.depth):  # decoder levels in reverse forward order
        dh = block_back(dh, f"dec{i}.conv1")
        dh = block_back(dh, f"dec{i}.conv0")
        du, dskips[i] = dh[:, : ch[i]], dh[:, ch[i] :]
        dh = upsample2x_backward(block_back(du, f"dec{i}.up"))
    for i in range(cfg.depth, 0, -1):
        level = "bott" if i == cfg.depth else f"enc{i}"
        if i < cfg.depth:
            dh = dh + dskips[i]
        dh = block_back(dh, f"{level}.conv1")
        dh = block_back(dh, f"{level}.conv0")
        dh = block_back(dh, f"down{i}")
    dh = dh + dskips[0]
    dh = block_back(dh, "enc0.conv1")
    dh = block_back(dh, "enc0.conv0")

    for name, g in grads.items():
        P[name].set_grad(g)
    return grads, dh


def predict_mask(logits) -> np.ndarray:
    """Argmax decode: foreground iff the effusion logit strictly wins."""
    z = np.asarray(logits)
    if z.ndim != 4 or z.shape[1] != 2:
        raise ShapeError(f"logits must be (N, 2, H, W), got {z.shape}")
    return (z[:, 1] > z[:, 0]).astype(np.uint8)
