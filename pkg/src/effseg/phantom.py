"""Synthetic ultrasound-like phantoms with ground-truth effusion masks.

A phantom is built from geometric region maps (tissue, bright pleural band,
dark effusion pocket, deeper reverberation zone), optional rib shadows,
multiplicative speckle followed by Gaussian blur, probe field-of-view
masking, and finally burned-in white measurement crosses at the top and
bottom of the deepest effusion column. Everything is a pure function of
(spec, seed): the cross burn happens after every RNG draw, so regenerating
with burn_crosses off yields the identical image minus the crosses.

The depth-gated variant draws two identically shaped, identically textured
fluid pockets, one above and one below a depth threshold, and labels only
the deeper one; it exists to probe whether coordinate channels help when
the label is decidable only from position.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import distance_transform_edt, gaussian_filter, label

from .preproc import FovGeometry, fov_mask

OBSERVER_FIELD_SIGMA = 8.0  # correlation length of the boundary perturbation
OBSERVER_STRENGTH = 5.5     # default magnitude (px); calibrated in tests


@dataclass
class PhantomSpec:
    """Geometry ranges and texture parameters; ranges are inclusive."""

    probe: str = "linear"
    height: int = 128
    width: int = 128
    dim_divisor: int = 8
    pleura_depth: tuple[int, int] = (22, 38)
    pleura_thickness: int = 3
    gap: int = 7
    thickness: tuple[int, int] = (14, 34)
    extent: tuple[int, int] = (48, 88)
    waviness: tuple[float, float] = (1.0, 4.0)
    rib_count: tuple[int, int] = (0, 2)
    intensity_tissue: float = 0.35
    intensity_pleura: float = 0.85
    intensity_effusion: float = 0.08
    intensity_deep: float = 0.18
    speckle: float = 0.22
    blur_sigma: float = 1.0
    cross_size: int = 9
    cross_arm: int = 2
    burn_crosses: bool = True
    # curved probe cone (apex defaults to 20 px above the top-center)
    apex: tuple[float, float] | None = None
    half_angle_deg: float = 32.0
    rmin: float = 26.0
    rmax: float = 160.0
    # depth-gated task
    depth_gated: bool = False
    gate_row: int | None = None
    gated_semi_rows: tuple[int, int] = (6, 9)
    gated_semi_cols: tuple[int, int] = (9, 14)
    # keep ellipse edges this far from every border so local context windows
    # never include a canvas edge (which would leak absolute position)
    gated_margin: int = 16

    def __post_init__(self):
        if self.probe not in ("linear", "curved"):
            raise ValueError(f"probe must be linear or curved, got {self.probe!r}")
        if self.height % self.dim_divisor or self.width % self.dim_divisor:
            raise ValueError(
                f"dims {self.height}x{self.width} must be divisible by {self.dim_divisor}"
            )
        for name in ("pleura_depth", "thickness", "extent", "waviness", "rib_count",
                     "gated_semi_rows", "gated_semi_cols"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} range ({lo}, {hi}) is empty")
        if not 0.0 <= self.speckle < 1.0:
            raise ValueError(f"speckle strength must be in [0, 1), got {self.speckle}")
        if self.cross_size % 2 == 0 or self.cross_size < 3:
            raise ValueError(f"cross_size must be odd and >= 3, got {self.cross_size}")
        if not 1 <= self.cross_arm <= self.cross_size:
            raise ValueError(f"cross_arm must be in [1, cross_size], got {self.cross_arm}")
        if self.probe == "curved" and self.apex is None:
            self.apex = (-20.0, (self.width - 1) / 2.0)
        if self.depth_gated:
            self._check_gated_fit()
        else:
            self._check_fit()

    def _check_fit(self):
        margin = self.cross_size // 2 + 1
        bottom = (self.pleura_depth[1] + self.pleura_thickness + self.gap
                  + int(round(self.waviness[1])) + self.thickness[1])
        if bottom + margin > self.height:
            raise ValueError(
                f"effusion geometry can reach row {bottom} + cross margin {margin}, "
                f"image height is {self.height}"
            )
        if self.extent[1] + 2 * margin > self.width:
            raise ValueError(
                f"lateral extent up to {self.extent[1]} + margins does not fit width {self.width}"
            )
        if self.thickness[0] < 2:
            raise ValueError("thickness must be >= 2 so the two crosses are distinct")

    def _check_gated_fit(self):
        gate = self.gate_row if self.gate_row is not None else self.height // 2
        m = self.gated_margin
        if m < 0:
            raise ValueError(f"gated_margin must be >= 0, got {m}")
        ar, ac = self.gated_semi_rows[1], self.gated_semi_cols[1]
        if m + ar >= gate - ar - 1:
            raise ValueError(f"decoy band above gate row {gate} too small for semi-axis {ar}")
        if gate + ar + 2 >= self.height - m - ar:
            raise ValueError(f"target band below gate row {gate} too small for semi-axis {ar}")
        if m + ac >= self.width - m - ac:
            raise ValueError(f"width {self.width} too small for semi-axis {ac}")


@dataclass
class Sample:
    image: np.ndarray                      # (H, W) float32 in [0, 1]
    mask: np.ndarray                       # (H, W) uint8 in {0, 1}
    probe: str
    apex: tuple[float, float] | None
    cross_positions: list[tuple[int, int]] = field(default_factory=list)
    id: str = ""
    decoy_mask: np.ndarray | None = None   # depth-gated only: the unlabeled twin region


def cross_template(size: int = 9, arm: int = 2, fg: float = 1.0, bg: float = 0.0) -> np.ndarray:
    """Plus-shaped template: full-span horizontal and vertical arms."""
    if size % 2 == 0 or size < 3:
        raise ValueError(f"size must be odd and >= 3, got {size}")
    t = np.full((size, size), bg, dtype=np.float32)
    a0 = size // 2 - arm // 2
    t[a0 : a0 + arm, :] = fg
    t[:, a0 : a0 + arm] = fg
    return t


def _burn_cross(img: np.ndarray, r: int, c: int, size: int, arm: int) -> None:
    h, w = img.shape
    half = size // 2
    a0 = arm // 2
    r0, r1 = max(0, r - half), min(h, r + half + 1)
    c0, c1 = max(0, c - half), min(w, c + half + 1)
    img[max(0, r - a0) : min(h, r - a0 + arm), c0:c1] = 1.0
    img[r0:r1, max(0, c - a0) : min(w, c - a0 + arm)] = 1.0


def _cone_geometry(spec: PhantomSpec) -> FovGeometry:
    return FovGeometry.cone(
        apex=spec.apex, half_angle_deg=spec.half_angle_deg, rmin=spec.rmin, rmax=spec.rmax
    )


def sample_fov(spec: PhantomSpec) -> np.ndarray:
    """Boolean field-of-view region for a phantom's probe geometry."""
    if spec.probe == "curved":
        return fov_mask((spec.height, spec.width), _cone_geometry(spec))
    return np.ones((spec.height, spec.width), dtype=bool)


def generate_sample(spec: PhantomSpec, seed: int) -> Sample:
    """One phantom; deterministic in (spec, seed)."""
    rng = np.random.default_rng(seed)
    if spec.depth_gated:
        return _generate_gated(spec, rng, seed)
    h, w = spec.height, spec.width
    margin = spec.cross_size // 2 + 1

    pleura_row = int(rng.integers(spec.pleura_depth[0], spec.pleura_depth[1] + 1))
    thick = int(rng.integers(spec.thickness[0], spec.thickness[1] + 1))
    ext = int(rng.integers(spec.extent[0], spec.extent[1] + 1))
    if ext % 2 == 0:
        ext -= 1  # odd width puts the thickness peak exactly on one column
    if spec.probe == "curved":
        # keep the pocket centered under the cone so the crosses stay inside
        jitter = int(rng.integers(-6, 7))
        c0 = int(round(spec.apex[1])) - ext // 2 + jitter
    else:
        c0 = int(rng.integers(margin, w - margin - ext + 1))
    c0 = min(max(c0, margin), w - margin - ext)
    amp = float(rng.uniform(*spec.waviness))
    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    wavelength = float(rng.uniform(0.6, 1.4)) * ext
    pl_amp = float(rng.uniform(0.5, 1.5))
    pl_phase = float(rng.uniform(0.0, 2.0 * np.pi))
    n_ribs = int(rng.integers(spec.rib_count[0], spec.rib_count[1] + 1))
    ribs = [
        (int(rng.integers(0, w)), int(rng.integers(6, 13)), float(rng.uniform(0.35, 0.6)))
        for _ in range(n_ribs)
    ]
    speckle_u = rng.random((h, w))

    cols = np.arange(w)
    rows = np.arange(h)[:, None]
    pl_row = pleura_row + np.rint(pl_amp * np.sin(2.0 * np.pi * cols / w + pl_phase)).astype(int)

    # effusion top boundary and per-column thickness (peak exactly `thick`)
    ecols = np.arange(ext)
    wave = np.rint(amp * 0.5 * (1.0 + np.sin(2.0 * np.pi * ecols / wavelength + phase))).astype(int)
    top = np.full(w, h, dtype=int)
    th = np.zeros(w, dtype=int)
    top[c0 : c0 + ext] = pleura_row + spec.pleura_thickness + spec.gap + wave
    shape_ = np.sin(np.pi * (ecols + 0.5) / ext)
    th[c0 : c0 + ext] = np.rint(thick * shape_).astype(int)

    img = np.full((h, w), spec.intensity_tissue, dtype=np.float64)
    below = rows >= pl_row[None, :]
    img[below] = spec.intensity_deep
    band = below & (rows < (pl_row + spec.pleura_thickness)[None, :])
    img[band] = spec.intensity_pleura
    effusion = (rows >= top[None, :]) & (rows < (top + th)[None, :])
    img[effusion] = spec.intensity_effusion
    mask = effusion.astype(np.uint8)

    shadow_rows = rows >= (pl_row + spec.pleura_thickness)[None, :]
    for center, width_, strength in ribs:
        d = np.abs(cols - center)
        profile = np.where(
            d <= width_, 1.0 - strength * 0.5 * (1.0 + np.cos(np.pi * d / width_)), 1.0
        )
        img *= np.where(shadow_rows, profile[None, :], 1.0)

    img *= 1.0 + spec.speckle * (2.0 * speckle_u - 1.0)
    img = gaussian_filter(img, spec.blur_sigma)
    np.clip(img, 0.0, 1.0, out=img)

    fov = sample_fov(spec)
    img[~fov] = 0.0
    mask[~fov] = 0

    counts = mask.sum(axis=0)
    positions: list[tuple[int, int]] = []
    if counts.max() > 0:
        cstar = int(np.argmax(counts))
        fg_rows = np.nonzero(mask[:, cstar])[0]
        positions = [(int(fg_rows[0]), cstar), (int(fg_rows[-1]), cstar)]

    img32 = img.astype(np.float32)
    if spec.burn_crosses:
        for r, c in positions:
            _burn_cross(img32, r, c, spec.cross_size, spec.cross_arm)
    return Sample(
        image=img32,
        mask=mask,
        probe=spec.probe,
        apex=spec.apex,
        cross_positions=positions if spec.burn_crosses else [],
        id=str(seed),
    )


def _generate_gated(spec: PhantomSpec, rng, seed: int) -> Sample:
    h, w = spec.height, spec.width
    gate = spec.gate_row if spec.gate_row is not None else h // 2
    m = spec.gated_margin
    ar = int(rng.integers(spec.gated_semi_rows[0], spec.gated_semi_rows[1] + 1))
    ac = int(rng.integers(spec.gated_semi_cols[0], spec.gated_semi_cols[1] + 1))
    cr_d = int(rng.integers(m + ar, gate - ar - 1))
    cc_d = int(rng.integers(m + ac, w - m - ac))
    cr_t = int(rng.integers(gate + ar + 2, h - m - ar))
    cc_t = int(rng.integers(m + ac, w - m - ac))
    speckle_u = rng.random((h, w))

    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]

    def ellipse(cr, cc):
        return ((rows - cr) / ar) ** 2 + ((cols - cc) / ac) ** 2 <= 1.0

    decoy = ellipse(cr_d, cc_d)
    target = ellipse(cr_t, cc_t)
    img = np.full((h, w), spec.intensity_tissue, dtype=np.float64)
    img[decoy] = spec.intensity_effusion
    img[target] = spec.intensity_effusion
    img *= 1.0 + spec.speckle * (2.0 * speckle_u - 1.0)
    img = gaussian_filter(img, spec.blur_sigma)
    np.clip(img, 0.0, 1.0, out=img)
    return Sample(
        image=img.astype(np.float32),
        mask=target.astype(np.uint8),
        probe=spec.probe,
        apex=spec.apex,
        cross_positions=[],
        id=str(seed),
        decoy_mask=decoy.astype(np.uint8),
    )


def generate_dataset(n: int, spec: PhantomSpec, seed: int) -> list[Sample]:
    """n samples with per-sample seeds seed+i and zero-padded ids."""
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    out = []
    for i in range(n):
        s = generate_sample(spec, seed + i)
        s.id = f"{i:04d}"
        out.append(s)
    return out


def generate_depth_gated_dataset(n: int, spec: PhantomSpec, seed: int) -> list[Sample]:
    """Like generate_dataset but insists on a depth-gated spec."""
    if not spec.depth_gated:
        raise ValueError("spec.depth_gated must be set for the depth-gated dataset")
    return generate_dataset(n, spec, seed)


def simulate_observer(mask: np.ndarray, strength: float, seed: int) -> np.ndarray:
    """Second-observer surrogate: displace the boundary by a smooth field.

    The signed distance to the boundary (negative inside) is compared against
    a Gaussian-filtered noise field scaled to std `strength` pixels; the
    largest connected component of the result is kept, so a connected input
    stays connected. strength 0 returns the mask unchanged.
    """
    if strength < 0:
        raise ValueError(f"strength must be >= 0, got {strength}")
    m = np.asarray(mask).astype(bool)
    out = m.astype(np.uint8)
    if strength == 0 or not m.any():
        return out
    rng = np.random.default_rng(seed)
    eta = gaussian_filter(rng.standard_normal(m.shape), OBSERVER_FIELD_SIGMA)
    eta = eta / eta.std() * strength
    signed = np.where(m, -distance_transform_edt(m), distance_transform_edt(~m))
    new = signed <= eta
    if not new.any():
        return np.zeros_like(out)
    labels, count = label(new)
    if count > 1:
        sizes = np.bincount(labels.ravel())[1:]
        new = labels == (int(np.argmax(sizes)) + 1)
    return new.astype(np.uint8)


def preset_a() -> PhantomSpec:
    """Linear-probe dataset preset (pairs with n=51)."""
    return PhantomSpec(probe="linear")


def preset_b() -> PhantomSpec:
    """Curved-probe dataset preset (pairs with n=92)."""
    return PhantomSpec(probe="curved")


def preset_gated(size: int = 96) -> PhantomSpec:
    """Depth-gated task preset: no ribs, no crosses, small canvas."""
    return PhantomSpec(
        height=size,
        width=size,
        depth_gated=True,
        rib_count=(0, 0),
        burn_crosses=False,
    )


PRESET_SIZES = {"a": 51, "b": 92}
