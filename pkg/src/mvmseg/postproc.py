"""Shape-based repair of predicted myocardium masks.

A raw prediction is reduced to its largest 4-connected component, the outer
(epicardial) and inner (endocardial) boundary pixels are each regressed to an
ellipse with a direct constrained least-squares fit, and 3-pixel rings drawn
along both ellipses are merged back on top of the component.

Pixel coordinates: ``x`` is the column index and ``y`` the row index of the
pixel centre (integer centres, no half-pixel offset).
"""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

FOUR_CONN = ndimage.generate_binary_structure(2, 1)


class FitFailed(ValueError):
    """Ellipse regression impossible (too few / collinear points, no ellipse solution)."""


class DegenerateMask(ValueError):
    """Mask has no enclosed or partially enclosed cavity to take an inner contour from."""


class Unrecoverable(RuntimeError):
    """Frame cannot be repaired and there is no earlier frame to fall back on."""


class ContourWarning(UserWarning):
    pass


@dataclass(frozen=True)
class Ellipse:
    cx: float
    cy: float
    a: float
    b: float
    theta: float = 0.0

    def __post_init__(self) -> None:
        a, b, th = float(self.a), float(self.b), float(self.theta)
        if not (a > 0 and b > 0) or not all(map(math.isfinite, (a, b, th, self.cx, self.cy))):
            raise ValueError(f"invalid ellipse parameters a={a}, b={b}, theta={th}")
        if b > a:
            a, b, th = b, a, th + math.pi / 2
        th = math.fmod(th, math.pi)
        if th < 0:
            th += math.pi
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "theta", th)
        object.__setattr__(self, "cx", float(self.cx))
        object.__setattr__(self, "cy", float(self.cy))

    def implicit(self, x, y):
        """(x'/a)^2 + (y'/b)^2 in the ellipse frame; < 1 inside, 1 on the curve."""
        c, s = math.cos(self.theta), math.sin(self.theta)
        dx = np.asarray(x, dtype=float) - self.cx
        dy = np.asarray(y, dtype=float) - self.cy
        u = c * dx + s * dy
        v = -s * dx + c * dy
        return (u / self.a) ** 2 + (v / self.b) ** 2

    def sample(self, n: int | None = None) -> np.ndarray:
        """``(n, 2)`` points (x, y) at uniform parametric angle.  Default spacing <= 0.25 px."""
        if n is None:
            n = self.dense_count()
        phi = np.arange(n) * (2 * np.pi / n)
        c, s = math.cos(self.theta), math.sin(self.theta)
        u = self.a * np.cos(phi)
        v = self.b * np.sin(phi)
        return np.stack([self.cx + c * u - s * v, self.cy + s * u + c * v], axis=1)

    def dense_count(self, per_px: float = 4.0) -> int:
        # |dp/dphi| <= a, so this bounds the arc gap between samples by 1/per_px
        return max(64, int(math.ceil(per_px * 2 * math.pi * self.a)))

    def scaled(self, da: float, db: float) -> "Ellipse":
        return Ellipse(self.cx, self.cy, self.a + da, self.b + db, self.theta)

    def to_dict(self) -> dict:
        return asdict(self)

    def rasterize(self, shape: tuple[int, int]) -> np.ndarray:
        """Filled mask of pixels whose centre lies on or inside the ellipse."""
        yy, xx = np.mgrid[0 : shape[0], 0 : shape[1]]
        return self.implicit(xx, yy) <= 1.0


@dataclass
class ContourResult:
    mask: np.ndarray
    epi: Ellipse | None
    endo: Ellipse | None
    epi_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    endo_points: np.ndarray = field(default_factory=lambda: np.zeros((0, 2)))
    status: str = "ok"  # ok | fallback | unrecoverable
    warnings: list[str] = field(default_factory=list)


# ---------------------------------------------------------------------------
# components and boundaries


def largest_component(mask: np.ndarray) -> np.ndarray:
    """Keep only the largest 4-connected foreground component.

    Equal-size components: the one whose first pixel comes earliest in
    row-major scan order wins (scipy numbers labels in that order).
    """
    m = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(m, structure=FOUR_CONN)
    if n == 0:
        return np.zeros(m.shape, dtype=np.uint8)
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    return (labels == keep).astype(np.uint8)


def _neighbours_in(region: np.ndarray) -> np.ndarray:
    """Pixels with at least one 4-neighbour inside ``region``."""
    out = np.zeros_like(region)
    out[1:, :] |= region[:-1, :]
    out[:-1, :] |= region[1:, :]
    out[:, 1:] |= region[:, :-1]
    out[:, :-1] |= region[:, 1:]
    return out


def extract_boundaries(mask: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Outer and inner boundary pixels of an annulus-like mask, as ``(n, 2)`` (x, y).

    Outer pixels touch the background region connected to the image exterior;
    inner pixels touch the cavity found by flood filling from the mask
    centroid.  When the ring is broken and the cavity leaks to the exterior,
    each boundary pixel is classified instead by whether its background
    neighbour lies towards (inner) or away from (outer) the centroid; pixels
    whose background neighbour is roughly tangential (cut faces) are dropped.

    Raises :class:`DegenerateMask` when the centroid is foreground or the
    mask is empty.
    """
    m = np.pad(np.asarray(mask).astype(bool), 1)
    if not m.any():
        raise DegenerateMask("empty mask")
    rows, cols = np.nonzero(m)
    cy, cx = rows.mean(), cols.mean()
    ci, cj = int(round(cy)), int(round(cx))
    if m[ci, cj]:
        raise DegenerateMask("mask centroid is foreground: no cavity")

    bg_labels, _ = ndimage.label(~m, structure=FOUR_CONN)
    outside = bg_labels[0, 0]  # padding guarantees the frame is exterior background
    cavity = bg_labels[ci, cj]

    def to_xy(sel: np.ndarray) -> np.ndarray:
        r, c = np.nonzero(sel)
        return np.stack([c - 1, r - 1], axis=1).astype(float)

    if cavity != outside:
        outer = m & _neighbours_in(bg_labels == outside)
        inner = m & _neighbours_in(bg_labels == cavity)
        return to_xy(outer), to_xy(inner)

    # broken ring: classify by the direction of the background neighbour
    bg = ~m
    inner = np.zeros_like(m)
    outer = np.zeros_like(m)
    rr, cc = np.mgrid[0 : m.shape[0], 0 : m.shape[1]]
    ry, rx = rr - cy, cc - cx
    norm = np.hypot(rx, ry)
    norm[norm == 0] = 1.0
    ry, rx = ry / norm, rx / norm
    for di, dj in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        nb_bg = np.zeros_like(m)
        src = bg[max(di, 0) : m.shape[0] + min(di, 0), max(dj, 0) : m.shape[1] + min(dj, 0)]
        nb_bg[max(-di, 0) : m.shape[0] + min(-di, 0), max(-dj, 0) : m.shape[1] + min(-dj, 0)] = src
        dot = di * ry + dj * rx
        inner |= m & nb_bg & (dot < -0.5)
        outer |= m & nb_bg & (dot > 0.5)
    if not inner.any():
        raise DegenerateMask("no inner boundary found")
    return to_xy(outer), to_xy(inner)


# ---------------------------------------------------------------------------
# ellipse regression


def fit_conic(points: np.ndarray) -> np.ndarray:
    """Direct ellipse-specific least squares: conic ``(A,B,C,D,E,F)`` with 4AC - B^2 = 1.

    Minimises the algebraic distance ``||D p||^2`` subject to the ellipse
    constraint, using the block-reduced 3x3 eigenproblem on centred and
    scaled coordinates for conditioning.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 6:
        raise FitFailed(f"need at least 6 points, got {len(pts) if pts.ndim == 2 else 0}")
    mx, my = pts.mean(axis=0)
    scale = math.sqrt(((pts - (mx, my)) ** 2).sum(axis=1).mean() / 2)
    if not scale > 0:
        raise FitFailed("all points coincide")
    x = (pts[:, 0] - mx) / scale
    y = (pts[:, 1] - my) / scale

    d1 = np.stack([x * x, x * y, y * y], axis=1)
    d2 = np.stack([x, y, np.ones_like(x)], axis=1)
    s1 = d1.T @ d1
    s2 = d1.T @ d2
    s3 = d2.T @ d2
    if np.linalg.cond(s3) > 1e12:
        raise FitFailed("rank-deficient point scatter (collinear points)")
    t = -np.linalg.solve(s3, s2.T)
    reduced = s1 + s2 @ t
    # premultiply by the inverse of the 3x3 constraint block [[0,0,2],[0,-1,0],[2,0,0]]
    reduced = np.array([reduced[2] / 2, -reduced[1], reduced[0] / 2])
    vals, vecs = np.linalg.eig(reduced)
    vecs = np.real(vecs)
    cond = 4 * vecs[0] * vecs[2] - vecs[1] ** 2
    ok = np.nonzero((cond > 0) & (np.abs(np.imag(vals)) < 1e-9))[0]
    if len(ok) == 0:
        raise FitFailed("no eigenvector satisfies the ellipse constraint")
    a1 = vecs[:, ok[0]] / math.sqrt(cond[ok[0]])
    a2 = t @ a1
    A, B, C = a1
    D, E, F = a2
    # back to pixel coordinates: x_n = (x - mx)/s
    s = scale
    A2, B2, C2 = A / s**2, B / s**2, C / s**2
    D2 = D / s - 2 * A * mx / s**2 - B * my / s**2
    E2 = E / s - 2 * C * my / s**2 - B * mx / s**2
    F2 = F + A * mx**2 / s**2 + B * mx * my / s**2 + C * my**2 / s**2 - D * mx / s - E * my / s
    conic = np.array([A2, B2, C2, D2, E2, F2])
    return conic / math.sqrt(4 * A2 * C2 - B2**2)


def conic_to_ellipse(conic: Sequence[float]) -> Ellipse:
    A, B, C, D, E, F = map(float, conic)
    disc = 4 * A * C - B * B
    if disc <= 0:
        raise FitFailed("conic is not an ellipse")
    x0, y0 = np.linalg.solve([[2 * A, B], [B, 2 * C]], [-D, -E])
    f0 = F + (D * x0 + E * y0) / 2
    lam, vec = np.linalg.eigh([[A, B / 2], [B / 2, C]])
    if f0 > 0:
        lam, f0 = -lam, -f0
    if f0 == 0 or np.any(lam <= 0):
        raise FitFailed("imaginary or degenerate ellipse")
    # smaller eigenvalue -> longer axis
    i_major = int(np.argmin(lam))
    a = math.sqrt(-f0 / lam[i_major])
    b = math.sqrt(-f0 / lam[1 - i_major])
    vx, vy = vec[:, i_major]
    return Ellipse(float(x0), float(y0), a, b, math.atan2(vy, vx))


def fit_ellipse(points) -> Ellipse:
    """Fit an ellipse to ``(n, 2)`` (x, y) points, n >= 6.  Raises :class:`FitFailed`."""
    return conic_to_ellipse(fit_conic(points))


# ---------------------------------------------------------------------------
# rings and final assembly


def rasterize_ring(e: Ellipse, width: float = 3.0, shape: tuple[int, int] = (64, 64)) -> np.ndarray:
    """Pixels within ``width/2`` of the ellipse curve, clipped to ``shape``.

    The curve is sampled densely (<= 0.25 px apart); a pixel is set if its
    centre is within ``width/2`` of a sample, and the pixel containing each
    sample is always set so that thin rings stay 8-connected.
    """
    H, W = shape
    pts = e.sample()
    out = np.zeros((H, W), dtype=bool)
    r = width / 2
    reach = int(math.ceil(r)) + 1
    base_x = np.floor(pts[:, 0] + 0.5).astype(int)
    base_y = np.floor(pts[:, 1] + 0.5).astype(int)

    def mark(px, py):
        ok = (px >= 0) & (px < W) & (py >= 0) & (py < H)
        out[py[ok], px[ok]] = True

    mark(base_x, base_y)
    for dy in range(-reach, reach + 1):
        for dx in range(-reach, reach + 1):
            px = base_x + dx
            py = base_y + dy
            close = (px - pts[:, 0]) ** 2 + (py - pts[:, 1]) ** 2 <= r * r + 1e-12
            mark(px[close], py[close])
    return out


# Boundary pixel centres sit about half a pixel inside the region edge they
# trace, so fitted epicardia come out small and endocardia large by that much.
EDGE_OFFSET = 0.5


def _contours(mask: np.ndarray) -> tuple[Ellipse, Ellipse]:
    outer, inner = extract_boundaries(mask)
    epi = fit_ellipse(outer).scaled(EDGE_OFFSET, EDGE_OFFSET)
    endo = fit_ellipse(inner)
    if endo.b <= EDGE_OFFSET:
        raise FitFailed(f"endocardial fit too small (b={endo.b:.3f} px)")
    return epi, endo.scaled(-EDGE_OFFSET, -EDGE_OFFSET)


def _wall_rings(epi: Ellipse, endo: Ellipse, width: float, shape: tuple[int, int]) -> np.ndarray:
    """``width``-px rings lying just inside the wall.

    Each ring's outer edge runs through the boundary pixel centres rather than
    the contour itself, so a clean mask gains no pixels beyond its own edge
    layer (the half-pixel contour offset is only an estimate).
    """
    h = width / 2 + EDGE_OFFSET
    rings = rasterize_ring(endo.scaled(h, h), width, shape)
    if epi.b > h:
        rings |= rasterize_ring(epi.scaled(-h, -h), width, shape)
    return rings


def finalize(
    pred: np.ndarray,
    previous: ContourResult | None = None,
    width: float = 3.0,
) -> ContourResult:
    """Repair one predicted frame.

    largest component -> boundaries -> ellipse fits -> component U epi ring U endo ring.
    The rings run along the inside of the wall so repeated passes do not grow the mask.
    If boundaries or fits fail, the ellipses of ``previous`` (the preceding
    frame of the same slice) are reused; without one, :class:`Unrecoverable`.
    """
    pred = np.asarray(pred).astype(bool)
    comp = largest_component(pred).astype(bool)
    status = "ok"
    notes: list[str] = []
    try:
        epi, endo = _contours(comp)
    except (DegenerateMask, FitFailed) as exc:
        if previous is None or previous.epi is None:
            raise Unrecoverable(f"cannot repair frame: {exc}") from exc
        epi, endo = previous.epi, previous.endo
        status = "fallback"
        notes.append(f"fallback to previous frame: {exc}")

    epi_pts = epi.sample()
    endo_pts = endo.sample()
    if np.any(epi.implicit(endo_pts[:, 0], endo_pts[:, 1]) >= 1.0):
        msg = "endocardial ellipse not strictly inside epicardial ellipse"
        notes.append(msg)
        warnings.warn(msg, ContourWarning, stacklevel=2)

    shape = pred.shape
    final = comp | _wall_rings(epi, endo, width, shape)
    return ContourResult(final.astype(np.uint8), epi, endo, epi_pts, endo_pts, status, notes)


def finalize_slice(masks: np.ndarray, width: float = 3.0) -> list[ContourResult]:
    """Frame-by-frame :func:`finalize` over one cine slice with previous-frame fallback.

    Frames that cannot be repaired come back with status ``"unrecoverable"``,
    no ellipses and the largest component as mask.  The fallback always uses
    the most recent successfully repaired frame.
    """
    results: list[ContourResult] = []
    last_good: ContourResult | None = None
    for t, m in enumerate(masks):
        try:
            res = finalize(m, last_good, width)
        except Unrecoverable as exc:
            res = ContourResult(largest_component(m), None, None, status="unrecoverable", warnings=[f"frame {t}: {exc}"])
        else:
            last_good = res
        results.append(res)
    return results


def write_contours(results: Sequence[ContourResult], csv_path: str | Path, json_path: str | Path | None = None) -> None:
    """CSV rows ``frame,contour,index,x,y`` plus an optional JSON sidecar of ellipse parameters."""
    csv_path = Path(csv_path)
    with csv_path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "contour", "index", "x", "y"])
        for t, res in enumerate(results):
            for name, pts in (("epi", res.epi_points), ("endo", res.endo_points)):
                for i, (x, y) in enumerate(pts):
                    w.writerow([t, name, i, f"{x:.4f}", f"{y:.4f}"])
    if json_path is not None:
        meta = [
            {
                "frame": t,
                "status": r.status,
                "epi": r.epi.to_dict() if r.epi else None,
                "endo": r.endo.to_dict() if r.endo else None,
                "warnings": r.warnings,
            }
            for t, r in enumerate(results)
        ]
        Path(json_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
