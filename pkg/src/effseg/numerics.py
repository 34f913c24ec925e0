"""Dense NCHW tensor primitives with exact analytic backward passes.

Everything here is plain numpy. Layer functions are pure: they take arrays,
return arrays, and keep no hidden state, so each forward/backward pair can be
checked against central finite differences in double precision. Arrays are
laid out (N, C, H, W) throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Array rank or dimensions incompatible with the requested operation."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where the computation requires finite ones."""


class Tensor:
    """Rank-4 parameter buffer with an optional gradient of the same shape.

    Parameters are stored float32 by default; float64 is accepted so the
    whole network can be run in double precision for gradient verification.
    """

    __slots__ = ("data", "grad")

    def __init__(self, data, dtype=np.float32):
        arr = np.ascontiguousarray(data, dtype=dtype)
        if arr.ndim != 4:
            raise ShapeError(f"tensor must be rank 4, got shape {arr.shape}")
        self.data = arr
        self.grad = None

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def set_grad(self, g: np.ndarray) -> None:
        g = np.asarray(g)
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match parameter shape {self.data.shape}"
            )
        self.grad = g

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(dims={self.dims}, dtype={self.data.dtype})"


def _require_rank4(name: str, a: np.ndarray) -> None:
    if a.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (N, C, H, W), got shape {a.shape}")


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    """2-D cross-correlation of a batch with a kernel stack.

    x: (N, C, H, W); w: (K, C, kh, kw); b: (K,) or None.
    Output spatial dims follow floor((H + 2*pad - kh) / stride) + 1.
    """
    x = np.asarray(x)
    w = np.asarray(w)
    _require_rank4("input", x)
    _require_rank4("kernel", w)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if pad < 0:
        raise ValueError(f"pad must be >= 0, got {pad}")
    n, c, h, wd = x.shape
    k, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"kernel expects {cin} input channels, input has {c}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    if kh > hp or kw > wp:
        raise ShapeError(
            f"kernel ({kh}x{kw}) larger than padded input ({hp}x{wp})"
        )
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if b is not None:
        b = np.asarray(b)
        if b.shape != (k,):
            raise ShapeError(f"bias must have shape ({k},), got {b.shape}")
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    dt = np.result_type(x, w)
    wmat = w.reshape(k, c * kh * kw)
    y = np.empty((n, k, oh, ow), dtype=dt)
    pointwise = kh == 1 and kw == 1 and stride == 1
    cols = None if pointwise else np.empty((c, kh, kw, oh, ow), dtype=x.dtype)
    for ni in range(n):
        # one GEMM per sample: identical samples give bit-identical outputs
        # regardless of their position in the batch
        if pointwise:
            flat = x[ni].reshape(c, oh * ow)
        else:
            _fill_cols(cols, x[ni], kh, kw, oh, ow, stride)
            flat = cols.reshape(c * kh * kw, oh * ow)
        y[ni] = (wmat @ flat).reshape(k, oh, ow)
    if b is not None:
        y += b[None, :, None, None]
    return y


def _fill_cols(cols, xs, kh, kw, oh, ow, stride):
    """Gather conv windows of one padded sample into (C, kh, kw, oh, ow)."""
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xs[:, i : i + stride * oh : stride, j : j + stride * ow : stride]


def conv2d_backward(dy, x, w, stride: int = 1, pad: int = 0):
    """Gradients of conv2d w.r.t. input, kernel and bias.

    dy: (N, K, oh, ow) upstream gradient; x and w as passed to the forward.
    Returns (dx, dw, db) with db of shape (K,).
    """
    dy = np.asarray(dy)
    x = np.asarray(x)
    w = np.asarray(w)
    _require_rank4("upstream gradient", dy)
    _require_rank4("input", x)
    _require_rank4("kernel", w)
    n, c, h, wd = x.shape
    k, cin, kh, kw = w.shape
    if cin != c:
        raise ShapeError(f"kernel expects {cin} input channels, input has {c}")
    hp, wp = h + 2 * pad, wd + 2 * pad
    oh = (hp - kh) // stride + 1
    ow = (wp - kw) // stride + 1
    if dy.shape != (n, k, oh, ow):
        raise ShapeError(
            f"upstream gradient shape {dy.shape} does not match forward output "
            f"({n}, {k}, {oh}, {ow})"
        )
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    dt = np.result_type(dy, x, w)
    ckk = c * kh * kw
    wmat = w.reshape(k, ckk)
    dwt = np.zeros((ckk, k), dtype=dt)  # transposed: the (cols @ dy.T) GEMM is faster
    db = dy.sum(axis=(0, 2, 3))
    pointwise = kh == 1 and kw == 1 and stride == 1
    if pointwise:
        dx = np.empty((n, c, h, wd), dtype=dt)
        for ni in range(n):
            dyf = dy[ni].reshape(k, oh * ow)
            dwt += x[ni].reshape(c, oh * ow) @ dyf.T
            dx[ni] = (wmat.T @ dyf).reshape(c, h, wd)
        return dx, np.ascontiguousarray(dwt.T).reshape(w.shape), db.astype(dt, copy=False)
    dxp = np.zeros(xp.shape, dtype=dt)
    cols = np.empty((c, kh, kw, oh, ow), dtype=x.dtype)
    for ni in range(n):
        _fill_cols(cols, xp[ni], kh, kw, oh, ow, stride)
        dyf = dy[ni].reshape(k, oh * ow)
        dwt += cols.reshape(ckk, oh * ow) @ dyf.T
        dcols = (wmat.T @ dyf).reshape(c, kh, kw, oh, ow)
        for i in range(kh):
            for j in range(kw):
                dxp[ni, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += dcols[:, i, j]
    dx = dxp[:, :, pad : pad + h, pad : pad + wd] if pad else dxp
    return dx, np.ascontiguousarray(dwt.T).reshape(w.shape), db.astype(dt, copy=False)


def leaky_relu(x, slope: float = 0.01) -> np.ndarray:
    """Elementwise max(x, slope*x) with 0 <= slope < 1."""
    if not 0.0 <= slope < 1.0:
        raise ValueError(f"slope must be in [0, 1), got {slope}")
    x = np.asarray(x)
    scaled = x * slope
    return np.maximum(x, scaled, out=scaled)


def leaky_relu_backward(dy, x, slope: float = 0.01) -> np.ndarray:
    """Upstream gradient scaled by 1 where x >= 0, slope elsewhere."""
    x = np.asarray(x)
    dy = np.asarray(dy)
    if dy.shape != x.shape:
        raise ShapeError(f"gradient shape {dy.shape} != input shape {x.shape}")
    one = np.array(1.0, dtype=dy.dtype)
    sl = np.array(slope, dtype=dy.dtype)
    return dy * np.where(x >= 0, one, sl)


def instance_norm(x, eps: float = 1e-5) -> np.ndarray:
    """Normalize each (sample, channel) plane to zero mean, unit variance.

    Variance is the biased (divide by H*W) estimate. A constant plane maps
    to zeros: the centered numerator vanishes while eps keeps the
    denominator finite.
    """
    x = np.asarray(x)
    _require_rank4("input", x)
    m = x.mean(axis=(2, 3), keepdims=True)
    v = x.var(axis=(2, 3), keepdims=True)
    return (x - m) / np.sqrt(v + eps)


def instance_norm_backward(dy, x, eps: float = 1e-5) -> np.ndarray:
    """Gradient of instance_norm w.r.t. x, with stats recomputed from x."""
    x = np.asarray(x)
    dy = np.asarray(dy)
    if dy.shape != x.shape:
        raise ShapeError(f"gradient shape {dy.shape} != input shape {x.shape}")
    m = x.mean(axis=(2, 3), keepdims=True)
    v = x.var(axis=(2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xh = x - m
    xh *= inv
    proj = (dy * xh).mean(axis=(2, 3), keepdims=True)
    out = dy - dy.mean(axis=(2, 3), keepdims=True)
    xh *= proj
    out -= xh
    out *= inv
    return out


def upsample2x(x) -> np.ndarray:
    """Nearest-neighbor upsampling: each pixel becomes a 2x2 block."""
    x = np.asarray(x)
    _require_rank4("input", x)
    n, c, h, w = x.shape
    out = np.empty((n, c, 2 * h, 2 * w), dtype=x.dtype)
    out[:, :, ::2, ::2] = x
    out[:, :, ::2, 1::2] = x
    out[:, :, 1::2, ::2] = x
    out[:, :, 1::2, 1::2] = x
    return out


def upsample2x_backward(dy) -> np.ndarray:
    """Adjoint of upsample2x: sum each 2x2 block."""
    dy = np.asarray(dy)
    _require_rank4("upstream gradient", dy)
    n, c, h, w = dy.shape
    if h % 2 or w % 2:
        raise ShapeError(f"upstream gradient dims must be even, got {dy.shape}")
    return (dy[:, :, ::2, ::2] + dy[:, :, ::2, 1::2]) + (
        dy[:, :, 1::2, ::2] + dy[:, :, 1::2, 1::2]
    )


def softmax_channel(logits) -> np.ndarray:
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    z = np.asarray(logits)
    _require_rank4("logits", z)
    if z.shape[1] < 2:
        raise ShapeError(f"softmax needs >= 2 channels, got {z.shape[1]}")
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


@dataclass
class OptimizerState:
    """SGD state: one velocity buffer per parameter plus the shared lr and momentum."""

    lr: float
    momentum: float
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict[str, Tensor], lr: float, momentum: float) -> "OptimizerState":
        if lr < 0:
            raise ValueError(f"lr must be >= 0, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        vel = {name: np.zeros_like(p.data) for name, p in params.items()}
        return cls(lr=lr, momentum=momentum, velocity=vel)


def sgd_nesterov_step(
    params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimizerState
) -> None:
    """One Nesterov momentum update, in place.

    v <- momentum * v + g; theta <- theta - lr * (g + momentum * v),
    i.e. the lookahead uses the updated velocity. With lr == 0 parameters
    are untouched but velocities still integrate the gradient.
    """
    if params.keys() != grads.keys():
        missing = params.keys() ^ grads.keys()
        raise KeyError(f"parameter/gradient name mismatch: {sorted(missing)}")
    mu = state.momentum
    for name, p in params.items():
        g = np.asarray(grads[name])
        if g.shape != p.data.shape:
            raise ShapeError(
                f"gradient for {name!r} has shape {g.shape}, parameter is {p.data.shape}"
            )
        v = state.velocity[name]
        if v.shape != p.data.shape:
            raise ShapeError(
                f"velocity for {name!r} has shape {v.shape}, parameter is {p.data.shape}"
            )
        np.multiply(v, mu, out=v)
        np.add(v, g, out=v)
        p.data -= state.lr * (g + mu * v)
