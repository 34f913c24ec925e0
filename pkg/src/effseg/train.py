"""Training: CE+Dice loss with its analytic gradient, polynomial lr decay,
the augmentation menu, and the minibatch SGD loop.

The loop samples minibatches with replacement from a seeded stream, applies
per-sample augmentation with per-(epoch, step, slot) derived RNGs, and always
returns the final-epoch model. Everything is bit-reproducible for a fixed
(data, config, seed) triple.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .net import UNetConfig, add_coord_channels, backward, build_model, forward_with_caches
from .numerics import NumericError, OptimizerState, ShapeError, sgd_nesterov_step, softmax_channel

_SAMPLER_STREAM = 929  # keeps index draws separate from the augmentation streams


@dataclass
class TrainConfig:
    """Optimization recipe plus the augmentation menu (probability, magnitude)."""

    epochs: int = 100
    steps_per_epoch: int = 50
    batch_size: int = 4
    lr0: float = 0.01
    momentum: float = 0.99
    poly_exponent: float = 0.9
    seed: int = 0
    # spatial
    p_rotation: float = 0.2
    rotation_deg: float = 25.0
    p_scale: float = 0.2
    scale_range: tuple[float, float] = (0.7, 1.4)
    p_mirror: float = 0.5
    # intensity
    p_noise: float = 0.15
    noise_sigma: tuple[float, float] = (0.0, 0.1)
    p_blur: float = 0.2
    blur_sigma: tuple[float, float] = (0.5, 1.5)
    p_brightness: float = 0.15
    brightness_range: tuple[float, float] = (0.7, 1.3)
    p_contrast: float = 0.15
    contrast_range: tuple[float, float] = (0.65, 1.5)
    p_lowres: float = 0.25
    lowres_factor: tuple[float, float] = (1.0, 2.0)
    p_gamma: float = 0.3
    gamma_range: tuple[float, float] = (0.7, 1.5)

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.steps_per_epoch < 1:
            raise ValueError(f"steps_per_epoch must be >= 1, got {self.steps_per_epoch}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr0 < 0:
            raise ValueError(f"lr0 must be >= 0, got {self.lr0}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.poly_exponent < 0:
            raise ValueError(f"poly_exponent must be >= 0, got {self.poly_exponent}")
        for name in ("p_rotation", "p_scale", "p_mirror", "p_noise", "p_blur",
                     "p_brightness", "p_contrast", "p_lowres", "p_gamma"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        for name in ("scale_range", "noise_sigma", "blur_sigma", "brightness_range",
                     "contrast_range", "lowres_factor", "gamma_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} must be (lo, hi) with lo <= hi, got ({lo}, {hi})")
        if self.lowres_factor[0] < 1.0:
            raise ValueError("lowres_factor entries must be >= 1")


@dataclass
class TrainLogEntry:
    epoch: int
    mean_loss: float
    lr: float


@dataclass
class TrainLog:
    entries: list[TrainLogEntry] = field(default_factory=list)


def lr_poly(epoch: int, config: TrainConfig) -> float:
    """lr0 * (1 - epoch/epochs) ** poly_exponent."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    return config.lr0 * (1.0 - epoch / config.epochs) ** config.poly_exponent


def dice_ce_loss(logits, targets, eps: float = 1e-5):
    """Sum of mean cross entropy and batch-level soft Dice on the foreground.

    logits: (N, 2, H, W); targets: (N, H, W) with values in {0, 1}.
    Returns (loss, dlogits) where dlogits is the exact analytic gradient.
    """
    z = np.asarray(logits)
    if z.ndim != 4 or z.shape[1] != 2:
        raise ShapeError(f"logits must be (N, 2, H, W), got {z.shape}")
    t = np.asarray(targets)
    if t.shape != (z.shape[0], z.shape[2], z.shape[3]):
        raise ShapeError(f"targets shape {t.shape} does not match logits {z.shape}")
    if not np.isin(t, (0, 1)).all():
        raise ValueError("targets must be binary {0, 1}")
    tf = t.astype(z.dtype)
    p = softmax_channel(z)
    npix = tf.size

    tiny = np.finfo(z.dtype).tiny
    p_true = np.where(tf == 1, p[:, 1], p[:, 0])
    ce = -np.log(np.maximum(p_true, tiny)).mean()

    p_fg = p[:, 1]
    num = 2.0 * (p_fg * tf).sum() + eps
    den = p_fg.sum() + tf.sum() + eps
    dice = 1.0 - num / den
    loss = float(ce + dice)

    onehot = np.stack([1.0 - tf, tf], axis=1)
    dz = (p - onehot) / npix
    # d(1 - num/den)/dp_fg, then through the 2-class softmax
    ddice = -(2.0 * tf * den - num) / den**2
    g = ddice * p_fg * (1.0 - p_fg)
    dz[:, 1] += g
    dz[:, 0] -= g
    return loss, dz


def _bilinear(im: np.ndarray, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
    """Sample im at fractional (rr, cc); outside the grid contributes 0."""
    h, w = im.shape
    r0 = np.floor(rr).astype(np.int64)
    c0 = np.floor(cc).astype(np.int64)
    fr = (rr - r0).astype(im.dtype)
    fc = (cc - c0).astype(im.dtype)
    out = np.zeros(rr.shape, dtype=im.dtype)
    for dr, dc, wgt in (
        (0, 0, (1 - fr) * (1 - fc)),
        (0, 1, (1 - fr) * fc),
        (1, 0, fr * (1 - fc)),
        (1, 1, fr * fc),
    ):
        ri, ci = r0 + dr, c0 + dc
        ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
        vals = im[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
        out += np.where(ok, wgt * vals, 0).astype(im.dtype)
    return out


def _nearest(im: np.ndarray, rr: np.ndarray, cc: np.ndarray) -> np.ndarray:
    h, w = im.shape
    ri = np.rint(rr).astype(np.int64)
    ci = np.rint(cc).astype(np.int64)
    ok = (ri >= 0) & (ri < h) & (ci >= 0) & (ci < w)
    vals = im[np.clip(ri, 0, h - 1), np.clip(ci, 0, w - 1)]
    return np.where(ok, vals, 0)


def rotate_scale(image: np.ndarray, mask: np.ndarray, angle_deg: float, scale: float):
    """Rotate about the image center and scale, in one resampling pass.

    The image is sampled bilinearly, the mask with nearest neighbor, so the
    mask stays binary. Positions that map outside the source grid become 0.
    """
    if scale <= 0:
        raise ValueError(f"scale must be positive, got {scale}")
    h, w = image.shape
    mr, mc = (h - 1) / 2.0, (w - 1) / 2.0
    th = np.deg2rad(angle_deg)
    co, si = np.cos(th), np.sin(th)
    ro = np.arange(h, dtype=np.float64)[:, None] - mr
    cod = np.arange(w, dtype=np.float64)[None, :] - mc
    src_r = mr + (-si * cod + co * ro) / scale
    src_c = mc + (co * cod + si * ro) / scale
    return _bilinear(image, src_r, src_c), _nearest(mask, src_r, src_c)


def _lowres(image: np.ndarray, factor: float) -> np.ndarray:
    """Nearest downsample by `factor`, then nearest upsample back."""
    h, w = image.shape
    nh = max(1, int(round(h / factor)))
    nw = max(1, int(round(w / factor)))
    ri = np.minimum((np.arange(nh) * h) // nh, h - 1)
    ci = np.minimum((np.arange(nw) * w) // nw, w - 1)
    small = image[np.ix_(ri, ci)]
    ru = np.minimum((np.arange(h) * nh) // h, nh - 1)
    cu = np.minimum((np.arange(w) * nw) // w, nw - 1)
    return small[np.ix_(ru, cu)]


def augment_sample(image: np.ndarray, mask: np.ndarray, config: TrainConfig, rng):
    """Apply the configured transforms, each with its own probability.

    Spatial transforms hit image and mask identically (mask via nearest
    neighbor); intensity transforms touch only the image and are clamped
    back to [0, 1].
    """
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape != mask.shape:
        raise ShapeError(f"image {image.shape} and mask {mask.shape} differ")
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask must be binary {0, 1}")
    img = image.copy()
    msk = mask.copy()

    angle = 0.0
    scale = 1.0
    if rng.random() < config.p_rotation:
        angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
    if rng.random() < config.p_scale:
        scale = rng.uniform(*config.scale_range)
    if angle != 0.0 or scale != 1.0:
        img, msk = rotate_scale(img, msk, angle, scale)
        np.clip(img, 0.0, 1.0, out=img)

    if rng.random() < config.p_noise:
        sigma = rng.uniform(*config.noise_sigma)
        img = np.clip(img + rng.normal(0.0, sigma, img.shape).astype(img.dtype), 0.0, 1.0)
    if rng.random() < config.p_blur:
        img = np.clip(gaussian_filter(img, rng.uniform(*config.blur_sigma)), 0.0, 1.0)
    if rng.random() < config.p_brightness:
        img = np.clip(img * rng.uniform(*config.brightness_range), 0.0, 1.0)
    if rng.random() < config.p_contrast:
        f = rng.uniform(*config.contrast_range)
        m = img.mean()
        img = np.clip((img - m) * f + m, 0.0, 1.0)
    if rng.random() < config.p_lowres:
        img = _lowres(img, rng.uniform(*config.lowres_factor))
    if rng.random() < config.p_gamma:
        img = np.clip(img, 0.0, 1.0) ** rng.uniform(*config.gamma_range)
    if rng.random() < config.p_mirror:
        img = img[:, ::-1].copy()
        msk = msk[:, ::-1].copy()
    return img, msk


def _coord_batch(images: list[np.ndarray], unet_config: UNetConfig, apexes) -> np.ndarray:
    """Stack (1, H, W) images and append coordinate channels per sample."""
    chunks = []
    for img, apex in zip(images, apexes):
        one = img[None, None].astype(np.float32, copy=False)
        chunks.append(
            add_coord_channels(
                one, unet_config.coord_mode, apex=apex, normalize=unet_config.coord_normalize
            )
        )
    return np.concatenate(chunks, axis=0)


def train_fold(samples, config: TrainConfig, unet_config: UNetConfig):
    """Train on `samples` (objects with .image, .mask and optionally .apex).

    Returns (model, log); the model is whatever the final epoch left behind,
    never an earlier snapshot.
    """
    n = len(samples)
    if n < config.batch_size:
        raise ValueError(f"need at least batch_size={config.batch_size} samples, got {n}")
    model = build_model(unet_config, seed=config.seed)
    state = OptimizerState.for_params(model.params, lr=config.lr0, momentum=config.momentum)
    sampler = np.random.default_rng([config.seed, _SAMPLER_STREAM])
    log = TrainLog()
    for epoch in range(config.epochs):
        lr = lr_poly(epoch, config)
        state.lr = lr
        total = 0.0
        for step in range(config.steps_per_epoch):
            idx = sampler.integers(0, n, size=config.batch_size)
            imgs, masks, apexes = [], [], []
            for slot, k in enumerate(idx):
                arng = np.random.default_rng([config.seed, epoch, step, slot])
                img, msk = augment_sample(samples[k].image, samples[k].mask, config, arng)
                imgs.append(img)
                masks.append(msk)
                apexes.append(getattr(samples[k], "apex", None))
            x = _coord_batch(imgs, unet_config, apexes)
            t = np.stack(masks).astype(np.uint8)
            logits, caches = forward_with_caches(model, x)
            loss, dz = dice_ce_loss(logits, t)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}")
            grads, _ = backward(model, caches, dz)
            sgd_nesterov_step(model.params, grads, state)
            total += loss
        log.entries.append(TrainLogEntry(epoch=epoch, mean_loss=total / config.steps_per_epoch, lr=lr))
    return model, log
