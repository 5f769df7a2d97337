"""Global longitudinal velocity curves and their PS / PD / PAS peaks."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# peak-search windows as cycle fractions: systolic, early-diastolic, atrial-systolic
DEFAULT_WINDOWS: tuple[tuple[float, float], ...] = ((0.0, 0.40), (0.40, 0.75), (0.75, 1.0))
SYSTOLE_POSITIVE = "systole_positive"
SYSTOLE_NEGATIVE = "systole_negative"


class EmptyMask(ValueError):
    def __init__(self, frame: int):
        super().__init__(f"mask of frame {frame} is empty")
        self.frame = frame


def phase_to_velocity(phase, venc: float, venc_stored: float | None = None):
    """Scale stored phase values to cm/s.

    The phantom stores phase already in cm/s at ``venc_stored``; the map is
    linear with no unwrapping, and the identity when the two vencs match.
    """
    if venc <= 0 or (venc_stored is not None and venc_stored <= 0):
        raise ValueError(f"venc must be positive, got {venc} / {venc_stored}")
    ratio = 1.0 if venc_stored is None else venc / venc_stored
    return np.asarray(phase, dtype=float) * ratio if np.ndim(phase) else float(phase) * ratio


@dataclass
class VelocityCurve:
    values: np.ndarray

    @property
    def t_frac(self) -> np.ndarray:
        return np.arange(len(self.values)) / len(self.values)

    def __len__(self) -> int:
        return len(self.values)


def global_curve(phase_z: np.ndarray, masks: np.ndarray) -> VelocityCurve:
    """Per-frame mean of the through-plane velocity over the myocardium mask."""
    phase_z = np.asarray(phase_z, dtype=float)
    masks = np.asarray(masks).astype(bool)
    if phase_z.shape != masks.shape or phase_z.ndim != 3:
        raise ValueError(f"phase {phase_z.shape} and masks {masks.shape} must both be [T,H,W]")
    out = np.empty(len(phase_z))
    for t, (v, m) in enumerate(zip(phase_z, masks)):
        n = m.sum()
        if n == 0:
            raise EmptyMask(t)
        out[t] = v[m].sum() / n
    return VelocityCurve(out)


def subject_curve(curves: Sequence[VelocityCurve]) -> VelocityCurve:
    """Mean of a subject's slice curves (all of equal length)."""
    if not curves:
        raise ValueError("no curves")
    return VelocityCurve(np.mean([c.values for c in curves], axis=0))


@dataclass(frozen=True)
class Peak:
    value: float
    frame: int


@dataclass
class PeakSet:
    ps: Peak
    pd: Peak
    pas: Peak
    flags: list[str] = field(default_factory=list)

    def values(self) -> tuple[float, float, float]:
        return (self.ps.value, self.pd.value, self.pas.value)

    def to_dict(self) -> dict:
        return {
            "PS": {"value": self.ps.value, "frame": self.ps.frame},
            "PD": {"value": self.pd.value, "frame": self.pd.frame},
            "PAS": {"value": self.pas.value, "frame": self.pas.frame},
            "flags": list(self.flags),
        }


def window_frames(windows, n: int) -> list[tuple[int, int]]:
    """Cycle-fraction windows -> half-open frame-index ranges (start rounded up)."""
    out = []
    for lo, hi in windows:
        a = int(math.ceil(lo * n - 1e-9))
        b = n if hi >= 1.0 else int(math.ceil(hi * n - 1e-9))
        out.append((a, b))
    return out


def _smooth(v: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return v
    pad = width // 2
    ext = np.concatenate([v[-pad:], v, v[:pad]])  # periodic cycle
    return np.convolve(ext, np.ones(width) / width, mode="valid")[: len(v)]


def extract_peaks(
    curve: VelocityCurve | np.ndarray,
    windows=DEFAULT_WINDOWS,
    sign_convention: str = SYSTOLE_POSITIVE,
    smooth: int = 0,
) -> PeakSet:
    """PS = extreme in the systolic window, PD / PAS = opposite extreme in the
    early-diastolic / atrial windows.  Ties go to the earliest frame.

    ``windows`` are cycle fractions (floats) or frame ranges (ints).  Sign
    violations (e.g. a positive PD under the default convention) are flagged,
    not corrected.
    """
    v = np.asarray(curve.values if isinstance(curve, VelocityCurve) else curve, dtype=float)
    n = len(v)
    if all(isinstance(x, (int, np.integer)) for w in windows for x in w):
        frames = [(int(a), int(b)) for a, b in windows]
    else:
        frames = window_frames(windows, n)
    if len(frames) != 3:
        raise ValueError("need exactly three windows (systolic, early-diastolic, atrial)")
    for a, b in frames:
        if not 0 <= a < b <= n:
            raise ValueError(f"window [{a}, {b}) outside curve of length {n}")
    if sign_convention not in (SYSTOLE_POSITIVE, SYSTOLE_NEGATIVE):
        raise ValueError(f"unknown sign convention {sign_convention!r}")
    s = 1.0 if sign_convention == SYSTOLE_POSITIVE else -1.0
    work = _smooth(v, smooth)

    def pick(win, direction):
        a, b = win
        seg = direction * work[a:b]
        i = a + int(np.argmax(seg))  # argmax returns the first maximum
        return Peak(float(work[i]), i)

    ps = pick(frames[0], s)
    pd = pick(frames[1], -s)
    pas = pick(frames[2], -s)
    flags = []
    if s * ps.value <= 0:
        flags.append("PS sign")
    if s * pd.value >= 0:
        flags.append("PD sign")
    if s * pas.value >= 0:
        flags.append("PAS sign")
    return PeakSet(ps, pd, pas, flags)


def write_curve_csv(curve: VelocityCurve, path: str | Path) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame", "t_frac", "velocity"])
        for k, (t, v) in enumerate(zip(curve.t_frac, curve.values)):
            w.writerow([k, f"{t:.4f}", f"{v:.6f}"])


def write_peaks_json(peaks: PeakSet, path: str | Path) -> None:
    Path(path).write_text(json.dumps(peaks.to_dict(), indent=2, sort_keys=True) + "\n")
