"""Synthetic short-axis cine studies with exact ground truth.

Each study is one slice: a bright elliptical myocardial annulus around a
darker blood pool, contracting over the cardiac cycle, with three phase
(velocity) channels.  The through-plane channel carries the global
longitudinal velocity curve, a sum of three Gaussian lobes (systolic,
early-diastolic, atrial-systolic); the in-plane channels carry a radial
plus rotational wall motion that is nonzero at every frame.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np
from scipy import ndimage

from .postproc import Ellipse
from .velocity import DEFAULT_WINDOWS


@dataclass(frozen=True)
class Lobe:
    amplitude: float  # cm/s
    peak: float  # fraction of the cycle
    width: float  # Gaussian sigma, fraction of the cycle


@dataclass(frozen=True)
class PhantomConfig:
    size: int = 64
    frames: int = 50
    subjects: int = 10
    slices_per_subject: int = 4
    epi_major_range: tuple[float, float] = (15.0, 19.0)  # px, end-diastole
    aspect_range: tuple[float, float] = (0.85, 1.0)  # minor/major
    wall_range: tuple[float, float] = (4.0, 5.0)  # px, end-diastole
    center_jitter: float = 3.0
    contraction: float = 0.12  # fractional shrink of the epicardium at peak contraction
    thickening: float = 0.3  # fractional wall thickening at peak contraction
    systolic: Lobe = field(default_factory=lambda: Lobe(6.0, 0.15, 0.06))
    diastolic: Lobe = field(default_factory=lambda: Lobe(-9.0, 0.55, 0.05))
    atrial: Lobe = field(default_factory=lambda: Lobe(-4.0, 0.88, 0.04))
    inplane_amplitude: float = 4.0  # cm/s, radial and rotational in-plane wall motion
    radial_modulation: float = 0.1  # relative transmural variation of through-plane velocity
    venc: float = 30.0
    annulus_value: float = 1.0
    pool_value: float = 0.2
    background_value: float = 0.0
    noise_magnitude: float = 0.08
    noise_phase: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        validate(self)

    @property
    def lobes(self) -> tuple[Lobe, Lobe, Lobe]:
        return (self.systolic, self.diastolic, self.atrial)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PhantomConfig":
        kw = dict(d)
        for name in ("systolic", "diastolic", "atrial"):
            if name in kw and not isinstance(kw[name], Lobe):
                kw[name] = Lobe(**kw[name])
        for name in ("epi_major_range", "aspect_range", "wall_range"):
            if name in kw:
                kw[name] = tuple(kw[name])
        known = {f.name for f in fields(cls)}
        unknown = set(kw) - known
        if unknown:
            raise ValueError(f"unknown phantom config keys: {sorted(unknown)}")
        return cls(**kw)

    def replace(self, **changes) -> "PhantomConfig":
        return replace(self, **changes)


def validate(cfg: PhantomConfig) -> None:
    if cfg.size < 16 or cfg.frames < 4 or cfg.subjects < 1:
        raise ValueError("size >= 16, frames >= 4 and subjects >= 1 required")
    if not 3 <= cfg.slices_per_subject <= 5:
        raise ValueError(f"slices_per_subject must be in [3, 5], got {cfg.slices_per_subject}")
    if cfg.wall_range[0] < 3:
        raise ValueError(f"wall thickness must be >= 3 px, got {cfg.wall_range[0]}")
    lo, hi = cfg.epi_major_range
    if not 0 < lo <= hi:
        raise ValueError("epi_major_range must be increasing and positive")
    if not 0 < cfg.aspect_range[0] <= cfg.aspect_range[1] <= 1:
        raise ValueError("aspect_range must lie in (0, 1]")
    # smallest cavity: smallest apical slice at peak contraction with the thickest wall
    minor = lo * _slice_scale(cfg.slices_per_subject - 1) * cfg.aspect_range[0] * (1 - cfg.contraction)
    wall = cfg.wall_range[1] * (1 + cfg.thickening)
    if minor - wall < 2.0:
        raise ValueError(f"endocardium collapses: minor semi-axis {minor:.2f} px vs wall {wall:.2f} px")
    if hi + cfg.center_jitter + 3 >= cfg.size / 2:
        raise ValueError("annulus may leave the image; reduce epi_major_range or center_jitter")
    peak_v = max(abs(l.amplitude) for l in cfg.lobes) * (1 + cfg.radial_modulation)
    peak_v = max(peak_v, cfg.inplane_amplitude)
    if peak_v + 3 * cfg.noise_phase >= cfg.venc:
        raise ValueError(f"velocities up to {peak_v:.1f} cm/s plus 3 sigma noise reach venc={cfg.venc}")
    for lobe, (w0, w1) in zip(cfg.lobes, DEFAULT_WINDOWS):
        if not (w0 <= lobe.peak < w1):
            raise ValueError(f"lobe peak {lobe.peak} outside its peak-search window [{w0}, {w1})")
    if cfg.noise_magnitude < 0 or cfg.noise_phase < 0:
        raise ValueError("noise levels must be non-negative")


def _slice_scale(slice_id: int) -> float:
    # base -> apex shrinkage
    return 1.0 - 0.05 * slice_id


def analytic_velocity(cfg: PhantomConfig, t_frac):
    """Global longitudinal velocity (cm/s) at cycle fraction ``t_frac`` in [0, 1)."""
    t = np.asarray(t_frac, dtype=float)
    v = np.zeros_like(t)
    for lobe in cfg.lobes:
        v = v + lobe.amplitude * np.exp(-((t - lobe.peak) ** 2) / (2 * lobe.width**2))
    return float(v) if v.ndim == 0 else v


def contraction_profile(t_frac):
    """0 at end-diastole, 1 at peak contraction (mid-cycle); smooth and periodic."""
    return 0.5 * (1 - np.cos(2 * np.pi * np.asarray(t_frac, dtype=float)))


@dataclass
class CineStudy:
    magnitude: np.ndarray  # [T,1,H,W] float32
    phase: np.ndarray  # [T,3,H,W] float32, cm/s, channels x, y, z
    gt_mask: np.ndarray  # [T,H,W] uint8
    gt_epi: list[Ellipse]
    gt_endo: list[Ellipse]
    gt_curve: np.ndarray  # [T] float64
    subject_id: int
    slice_id: int
    venc: float

    @property
    def frames(self) -> int:
        return self.magnitude.shape[0]

    def metadata(self) -> dict:
        return {
            "subject_id": self.subject_id,
            "slice_id": self.slice_id,
            "venc": self.venc,
            "gt_epi": [e.to_dict() for e in self.gt_epi],
            "gt_endo": [e.to_dict() for e in self.gt_endo],
            "gt_curve": [float(v) for v in self.gt_curve],
        }


def generate_study(cfg: PhantomConfig, subject_id: int, slice_id: int) -> CineStudy:
    """One slice of one subject; a pure function of ``(cfg, subject_id, slice_id)``."""
    if not 0 <= slice_id < cfg.slices_per_subject:
        raise ValueError(f"slice_id {slice_id} outside [0, {cfg.slices_per_subject})")
    anat = np.random.default_rng([cfg.seed, subject_id])
    major = anat.uniform(*cfg.epi_major_range)
    aspect = anat.uniform(*cfg.aspect_range)
    wall0 = anat.uniform(*cfg.wall_range)
    theta = anat.uniform(0, np.pi)

    rng = np.random.default_rng([cfg.seed, subject_id, slice_id])
    scale = _slice_scale(slice_id)
    c0 = (cfg.size - 1) / 2
    cx = c0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
    cy = c0 + rng.uniform(-cfg.center_jitter, cfg.center_jitter)
    theta = (theta + rng.normal(0, 0.1)) % np.pi

    T, n = cfg.frames, cfg.size
    t_frac = np.arange(T) / T
    curve = analytic_velocity(cfg, t_frac)
    squeeze = contraction_profile(t_frac)
    # radial wall speed follows the derivative of the contraction profile
    radial = -cfg.inplane_amplitude * np.sin(2 * np.pi * t_frac)
    twist = cfg.inplane_amplitude * np.cos(2 * np.pi * t_frac)

    yy, xx = np.mgrid[0:n, 0:n].astype(float)
    dx, dy = xx - cx, yy - cy
    r = np.hypot(dx, dy)
    r[r == 0] = 1.0
    ux, uy = dx / r, dy / r  # radial unit vectors

    mag = np.empty((T, 1, n, n), np.float32)
    ph = np.empty((T, 3, n, n), np.float32)
    masks = np.empty((T, n, n), np.uint8)
    epis, endos = [], []
    for k in range(T):
        a = major * scale * (1 - cfg.contraction * squeeze[k])
        b = a * aspect
        wall = wall0 * (1 + cfg.thickening * squeeze[k])
        epi = Ellipse(cx, cy, a, b, theta)
        endo = Ellipse(cx, cy, a - wall, b - wall, theta)
        s_epi = epi.implicit(xx, yy)
        inside_epi = s_epi <= 1.0
        inside_endo = endo.implicit(xx, yy) <= 1.0
        ring = inside_epi & ~inside_endo
        pool = inside_endo

        img = np.full((n, n), cfg.background_value)
        img[pool] = cfg.pool_value
        img[ring] = cfg.annulus_value
        mag[k, 0] = img + cfg.noise_magnitude * rng.standard_normal((n, n))

        # transmural modulation, zero-mean over the ring so the ring mean is exactly curve[k]
        depth = np.sqrt(s_epi)
        mod = np.zeros((n, n))
        mod[ring] = depth[ring] - depth[ring].mean()
        vz = np.where(ring, curve[k] * (1 + cfg.radial_modulation * mod), 0.0)
        vx = np.where(ring, radial[k] * ux - twist[k] * uy, 0.0)
        vy = np.where(ring, radial[k] * uy + twist[k] * ux, 0.0)
        noise = cfg.noise_phase * rng.standard_normal((3, n, n))
        ph[k] = np.clip(np.stack([vx, vy, vz]) + noise, -cfg.venc, cfg.venc)

        masks[k] = ring
        epis.append(epi)
        endos.append(endo)

    return CineStudy(mag, ph, masks, epis, endos, curve, subject_id, slice_id, cfg.venc)


def generate_dataset(cfg: PhantomConfig) -> list[CineStudy]:
    return [
        generate_study(cfg, s, k) for s in range(cfg.subjects) for k in range(cfg.slices_per_subject)
    ]


# ---------------------------------------------------------------------------
# augmentation


def _rotate(img: np.ndarray, angle_deg: float, order: int) -> np.ndarray:
    """Rotate a 2-D image about its centre, zero fill; quarter turns are exact."""
    quarter = angle_deg / 90.0
    if abs(quarter - round(quarter)) < 1e-12:
        return np.rot90(img, int(round(quarter))).copy()
    th = math.radians(angle_deg)
    c, s = math.cos(th), math.sin(th)
    n0, n1 = img.shape
    centre = np.array([(n0 - 1) / 2, (n1 - 1) / 2])
    # output (row, col) -> input coordinates, matching np.rot90's direction
    m = np.array([[c, s], [-s, c]])
    offset = centre - m @ centre
    return ndimage.affine_transform(img, m, offset=offset, order=order, mode="constant", cval=0.0)


def augment(
    mag: np.ndarray,
    ph: np.ndarray,
    mask: np.ndarray,
    rng: np.random.Generator | None = None,
    *,
    flip: bool | None = None,
    angle: float | None = None,
):
    """Random horizontal flip (p = 0.5) then rotation by U[0, 90] degrees.

    ``mag`` is ``[1,H,W]``, ``ph`` ``[3,H,W]``, ``mask`` ``[H,W]``.  Images are
    resampled bilinearly, the mask by nearest neighbour; phase channels are
    treated as scalar images.  ``flip``/``angle`` override the random draws.
    """
    if flip is None or angle is None:
        if rng is None:
            raise ValueError("augment needs an rng unless flip and angle are both given")
        f = rng.random() < 0.5
        a = rng.uniform(0.0, 90.0)
        flip = f if flip is None else flip
        angle = a if angle is None else angle
    if mag.shape[-2:] != mask.shape or ph.shape[-2:] != mask.shape:
        raise ValueError("augment: magnitude, phase and mask must share the spatial shape")
    chans = np.concatenate([mag, ph], axis=0)
    m = mask
    if flip:
        chans = chans[:, :, ::-1]
        m = m[:, ::-1]
    chans = np.stack([_rotate(np.ascontiguousarray(ch, dtype=float), angle, 1) for ch in chans])
    m = _rotate(np.ascontiguousarray(m, dtype=float), angle, 0)
    nm = mag.shape[0]
    return (
        chans[:nm].astype(mag.dtype),
        chans[nm:].astype(ph.dtype),
        (m > 0.5).astype(mask.dtype),
    )
