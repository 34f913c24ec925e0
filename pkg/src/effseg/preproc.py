"""Field-of-view masking, annotation-cross removal, and crop/pad plumbing.

Burned-in measurement crosses are located by normalized cross-correlation
against a known template, greedily non-maximum-suppressed, and screened by
an edge-density test so smooth look-alike patches are rejected. Their
footprints are then filled by iterative harmonic (4-neighbor Laplace)
inpainting. The pipeline zeroes everything outside the probe field of view,
crops to its bounding box, and pads to dims a segmentation model can take.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

INPAINT_TOL = 1e-4
INPAINT_MAX_ITERS = 10_000
DETECT_THRESHOLD = 0.8
EDGE_GRAD_MIN = 0.15   # gradient magnitude that counts as an edge pixel
EDGE_DENSITY_MIN = 0.10  # fraction of edge pixels a real cross patch must have


@dataclass(frozen=True)
class FovGeometry:
    """Scan region: an axis-aligned rectangle or a downward-opening cone."""

    kind: str
    top: int = 0
    bottom: int = 0
    left: int = 0
    right: int = 0
    apex: tuple[float, float] | None = None
    half_angle_deg: float = 0.0
    rmin: float = 0.0
    rmax: float = 0.0

    @classmethod
    def rectangle(cls, top: int, bottom: int, left: int, right: int) -> "FovGeometry":
        """Half-open row range [top, bottom) and col range [left, right)."""
        if not (0 <= top < bottom and 0 <= left < right):
            raise ValueError(f"degenerate rectangle ({top}, {bottom}, {left}, {right})")
        return cls(kind="rectangle", top=top, bottom=bottom, left=left, right=right)

    @classmethod
    def cone(cls, apex: tuple[float, float], half_angle_deg: float,
             rmin: float, rmax: float) -> "FovGeometry":
        if not 0.0 < half_angle_deg < 90.0:
            raise ValueError(f"half-angle must be in (0, 90) degrees, got {half_angle_deg}")
        if not 0.0 <= rmin < rmax:
            raise ValueError(f"need 0 <= rmin < rmax, got ({rmin}, {rmax})")
        return cls(kind="cone", apex=(float(apex[0]), float(apex[1])),
                   half_angle_deg=half_angle_deg, rmin=rmin, rmax=rmax)


def fov_mask(dims: tuple[int, int], geom: FovGeometry) -> np.ndarray:
    """Boolean mask of the imaged region.

    Cone membership: the vector from the apex must have length in
    [rmin, rmax] and lie within half_angle of straight down (+row).
    """
    h, w = dims
    if geom.kind == "rectangle":
        if geom.bottom > h or geom.right > w:
            raise ValueError(f"rectangle bounds exceed image dims {dims}")
        m = np.zeros((h, w), dtype=bool)
        m[geom.top : geom.bottom, geom.left : geom.right] = True
        return m
    if geom.kind != "cone":
        raise ValueError(f"unknown geometry kind {geom.kind!r}")
    ar, ac = geom.apex
    dr = np.arange(h, dtype=np.float64)[:, None] - ar
    dc = np.arange(w, dtype=np.float64)[None, :] - ac
    dist = np.hypot(dr, dc)
    cos_half = math.cos(math.radians(geom.half_angle_deg))
    with np.errstate(invalid="ignore", divide="ignore"):
        cos_ang = np.where(dist > 0, dr / np.where(dist > 0, dist, 1.0), 1.0)
    return (dist >= geom.rmin) & (dist <= geom.rmax) & (cos_ang >= cos_half)


def _ncc_map(image: np.ndarray, template: np.ndarray) -> np.ndarray:
    """Normalized cross-correlation at every valid window position."""
    t = template.astype(np.float64)
    tz = (t - t.mean()).ravel()
    tnorm = np.linalg.norm(tz)
    win = sliding_window_view(image.astype(np.float64), t.shape)
    oh, ow = win.shape[:2]
    flat = win.reshape(oh, ow, -1)
    n = flat.shape[-1]
    # sum((p - pbar) * tz) == sum(p * tz) because tz sums to zero
    num = flat @ tz
    s1 = flat.sum(axis=-1)
    s2 = np.einsum("ijk,ijk->ij", flat, flat)
    var_n = np.maximum(s2 - s1 * s1 / n, 0.0)
    den = np.sqrt(var_n) * tnorm
    out = np.zeros((oh, ow))
    good = den > 1e-10  # zero-variance patches are skipped outright
    out[good] = num[good] / den[good]
    return out


def _edge_density(patch: np.ndarray) -> float:
    gr, gc = np.gradient(patch.astype(np.float64))
    mag = np.hypot(gr, gc)
    return float(np.mean(mag >= EDGE_GRAD_MIN))


def detect_crosses(image: np.ndarray, template: np.ndarray,
                   threshold: float = DETECT_THRESHOLD) -> list[tuple[int, int]]:
    """Centers of template matches, NMS-pruned and edge-density screened."""
    image = np.asarray(image)
    template = np.asarray(template)
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    if template.shape[0] >= image.shape[0] or template.shape[1] >= image.shape[1]:
        raise ValueError(f"template {template.shape} not smaller than image {image.shape}")
    ncc = _ncc_map(image, template)
    half_r, half_c = template.shape[0] // 2, template.shape[1] // 2
    radius = max(half_r, half_c)
    cand = np.argwhere(ncc >= threshold)
    if cand.size == 0:
        return []
    order = np.argsort(ncc[cand[:, 0], cand[:, 1]])[::-1]
    kept: list[tuple[int, int]] = []
    for idx in order:
        r, c = int(cand[idx, 0]), int(cand[idx, 1])
        if any((r - kr) ** 2 + (c - kc) ** 2 <= radius * radius for kr, kc in kept):
            continue
        patch = image[r : r + template.shape[0], c : c + template.shape[1]]
        if _edge_density(patch) < EDGE_DENSITY_MIN:
            continue
        kept.append((r, c))
    return sorted((r + half_r, c + half_c) for r, c in kept)


def inpaint(image: np.ndarray, hole: np.ndarray) -> np.ndarray:
    """Harmonic fill of the hole; every non-hole pixel is bit-unchanged.

    Jacobi iteration of 4-neighbor averaging over hole pixels (replicate
    borders), stopping when the largest per-iteration change drops below
    INPAINT_TOL or after INPAINT_MAX_ITERS sweeps.
    """
    image = np.asarray(image)
    hole = np.asarray(hole).astype(bool)
    if hole.shape != image.shape:
        raise ValueError(f"hole shape {hole.shape} != image shape {image.shape}")
    if not hole.any():
        raise ValueError("hole mask is empty")
    if hole.all():
        raise ValueError("hole covers the entire image")
    rows = np.nonzero(hole.any(axis=1))[0]
    cols = np.nonzero(hole.any(axis=0))[0]
    r0, r1 = max(rows[0] - 1, 0), min(rows[-1] + 2, image.shape[0])
    c0, c1 = max(cols[0] - 1, 0), min(cols[-1] + 2, image.shape[1])
    sub = image[r0:r1, c0:c1].astype(np.float64)
    sh = hole[r0:r1, c0:c1]
    # median start speeds convergence and is exact for constant surroundings
    sub[sh] = np.median(sub[~sh])
    for _ in range(INPAINT_MAX_ITERS):
        p = np.pad(sub, 1, mode="edge")
        avg = 0.25 * (p[:-2, 1:-1] + p[2:, 1:-1] + p[1:-1, :-2] + p[1:-1, 2:])
        delta = np.abs(avg[sh] - sub[sh]).max()
        sub[sh] = avg[sh]
        if delta < INPAINT_TOL:
            break
    out = image.copy()
    region = out[r0:r1, c0:c1]
    region[sh] = sub[sh].astype(out.dtype, copy=False)
    return out


@dataclass
class PreprocResult:
    image: np.ndarray                      # cleaned, cropped, padded
    mask: np.ndarray | None                # ground truth put through the same crop/pad
    crop: tuple[int, int, int, int]        # (r0, r1, c0, c1) half-open FOV bbox
    pad: tuple[tuple[int, int], tuple[int, int]]
    detections: list[tuple[int, int]] = field(default_factory=list)


def _crop_pad(arr: np.ndarray, crop: tuple[int, int, int, int],
              pad: tuple[tuple[int, int], tuple[int, int]]) -> np.ndarray:
    r0, r1, c0, c1 = crop
    return np.pad(arr[r0:r1, c0:c1], pad, mode="constant")


def preprocess_pipeline(sample, geom: FovGeometry | None, template: np.ndarray,
                        threshold: float = DETECT_THRESHOLD,
                        divisor: int = 8) -> PreprocResult:
    """Mask FOV, remove crosses, crop to the FOV box, pad to divisible dims.

    `sample` needs an `image` attribute (and optionally `mask`); geom None
    means the full frame. Pixels outside detected cross footprints keep
    their masked values exactly.
    """
    image = np.asarray(sample.image)
    h, w = image.shape
    if geom is None:
        geom = FovGeometry.rectangle(0, h, 0, w)
    fov = fov_mask((h, w), geom)
    if not fov.any():
        raise ValueError("field of view is empty for these dims")
    img = image.copy()
    img[~fov] = 0
    detections = detect_crosses(img, template, threshold)
    if detections:
        hole = np.zeros((h, w), dtype=bool)
        tr, tc = template.shape[0] // 2, template.shape[1] // 2
        for r, c in detections:
            hole[max(0, r - tr) : r + tr + 1, max(0, c - tc) : c + tc + 1] = True
        img = inpaint(img, hole)
    rows = np.nonzero(fov.any(axis=1))[0]
    cols = np.nonzero(fov.any(axis=0))[0]
    crop = (int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1)
    ch, cw = crop[1] - crop[0], crop[3] - crop[2]
    pr, pc = (-ch) % divisor, (-cw) % divisor
    pad = ((pr // 2, pr - pr // 2), (pc // 2, pc - pc // 2))
    mask = getattr(sample, "mask", None)
    return PreprocResult(
        image=_crop_pad(img, crop, pad),
        mask=None if mask is None else _crop_pad(np.asarray(mask), crop, pad),
        crop=crop,
        pad=pad,
        detections=detections,
    )
