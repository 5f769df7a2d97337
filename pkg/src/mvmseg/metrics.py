"""Overlap scores and the paired statistics used to compare models."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import rankdata


class DegenerateVariance(ValueError):
    pass


# ---------------------------------------------------------------------------
# Dice


@dataclass(frozen=True)
class DiceRecord:
    level: str  # frame | slice | subject
    value: float
    subject: int
    slice: int | None = None
    frame: int | None = None

    def __post_init__(self) -> None:
        if self.level not in ("frame", "slice", "subject"):
            raise ValueError(f"unknown Dice level {self.level!r}")
        if not 0.0 <= self.value <= 1.0:
            raise ValueError(f"Dice value {self.value} outside [0, 1]")
        if self.level == "frame" and (self.slice is None or self.frame is None):
            raise ValueError("frame-level record needs slice and frame ids")
        if self.level == "slice" and (self.slice is None or self.frame is not None):
            raise ValueError("slice-level record needs a slice id and no frame id")
        if self.level == "subject" and (self.slice is not None or self.frame is not None):
            raise ValueError("subject-level record carries only the subject id")


def _overlap_counts(a, b) -> tuple[int, int]:
    a = np.asarray(a).astype(bool)
    b = np.asarray(b).astype(bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a & b)), int(np.count_nonzero(a) + np.count_nonzero(b))


def dice(a, b) -> float:
    """2|a & b| / (|a| + |b|); two empty masks agree perfectly (1.0)."""
    inter, total = _overlap_counts(a, b)
    return 1.0 if total == 0 else 2.0 * inter / total


def dice_pooled(a_seq, b_seq) -> float:
    """Dice over the pooled voxel counts of aligned mask sequences."""
    if len(a_seq) != len(b_seq):
        raise ValueError(f"sequence lengths differ: {len(a_seq)} vs {len(b_seq)}")
    inter = total = 0
    for a, b in zip(a_seq, b_seq):
        i, t = _overlap_counts(a, b)
        inter += i
        total += t
    return 1.0 if total == 0 else 2.0 * inter / total


def dice_mean_of_frames(a_seq, b_seq) -> float:
    """Alternative slice/subject aggregation: the plain mean of per-frame Dice."""
    if len(a_seq) != len(b_seq):
        raise ValueError(f"sequence lengths differ: {len(a_seq)} vs {len(b_seq)}")
    return float(np.mean([dice(a, b) for a, b in zip(a_seq, b_seq)]))


# ---------------------------------------------------------------------------
# tests


@dataclass
class StatResult:
    test: str
    statistic: float
    p_value: float | None
    n: int
    aux: dict = field(default_factory=dict)
    flags: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.p_value is not None and not 0.0 <= self.p_value <= 1.0:
            raise ValueError(f"p-value {self.p_value} outside [0, 1]")

    @property
    def significant(self) -> bool:
        return self.p_value is not None and self.p_value < 0.05


EXACT_MAX_N = 25


def signed_rank_distribution(ranks2: np.ndarray) -> np.ndarray:
    """Counts of every achievable doubled positive-rank sum over all 2^n sign patterns.

    ``ranks2`` are twice the (possibly average) ranks, so they are integers.
    Entry k counts the sign assignments whose positive ranks sum to k/2.
    """
    ranks2 = np.asarray(ranks2, dtype=np.int64)
    counts = np.zeros(int(ranks2.sum()) + 1)
    counts[0] = 1.0
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(x, y, exact_max_n: int = EXACT_MAX_N) -> StatResult:
    """Two-sided Wilcoxon signed-rank test on paired samples.

    Zero differences are dropped; ties share average ranks.  The statistic is
    W = min(W+, W-).  For n <= ``exact_max_n`` the p-value is exact (the null
    distribution over all 2^n sign assignments); above that, a normal
    approximation with tie and continuity corrections is used.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return StatResult("wilcoxon", 0.0, 1.0, 0, {"w_plus": 0.0, "w_minus": 0.0}, ["NoDifferences"])
    if n < 5:
        raise ValueError(f"need at least 5 non-zero differences, got {n}")
    ranks = rankdata(np.abs(d))  # average ranks on ties
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    aux = {"w_plus": w_plus, "w_minus": w_minus}
    if n <= exact_max_n:
        counts = signed_rank_distribution(np.rint(2 * ranks).astype(np.int64))
        k = int(round(2 * w))
        p = 2.0 * counts[: k + 1].sum() / counts.sum()
        aux["method"] = "exact"
    else:
        mean = n * (n + 1) / 4.0
        _, tie_sizes = np.unique(ranks, return_counts=True)
        var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_sizes**3 - tie_sizes).sum() / 48.0
        z = (w - mean + 0.5) / math.sqrt(var) if var > 0 else 0.0
        p = math.erfc(-min(z, 0.0) / math.sqrt(2))
        aux["method"] = "normal"
        aux["z"] = z
    return StatResult("wilcoxon", w, min(1.0, p), n, aux)


def _betacf(a: float, b: float, x: float, eps: float = 1e-16, max_iter: int = 10_000) -> float:
    """Continued fraction of the incomplete beta function (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularised incomplete beta I_x(a, b)."""
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_reg(df / 2.0, 0.5, df / (df + t * t))


def pearson(x, y) -> StatResult:
    """Sample correlation R with a two-sided p-value from the t transform (n - 2 df)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    n = len(x)
    if n < 3:
        raise ValueError(f"pearson needs n >= 3, got {n}")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0 or syy == 0:
        raise DegenerateVariance("zero variance in x or y")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) >= 1.0 - 1e-15:
        p = 0.0
        t = math.copysign(math.inf, r)
    else:
        t = r * math.sqrt(df / (1 - r * r))
        p = student_t_two_sided(t, df)
    return StatResult("pearson", r, p, n, {"R": r, "t": t, "df": df})


def bland_altman(x, y, k: float = 1.96) -> StatResult:
    """Mean difference (x - y) and limits mean +/- k*sd (sample sd); outlier indices in aux."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    n = len(x)
    if n < 2:
        raise ValueError(f"bland_altman needs n >= 2, got {n}")
    d = x - y
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    lo, hi = mean - k * sd, mean + k * sd
    outliers = [int(i) for i in np.nonzero((d < lo) | (d > hi))[0]]
    aux = {
        "mean_diff": mean,
        "sd": sd,
        "loa_low": lo,
        "loa_high": hi,
        "outliers": outliers,
        "pair_mean": ((x + y) / 2).tolist(),
        "diff": d.tolist(),
    }
    return StatResult("bland_altman", mean, None, n, aux)


def write_bland_altman_csv(res: StatResult, path: str | Path) -> None:
    """Plot-ready rows: index, mean of the pair, difference, outlier flag."""
    out = set(res.aux["outliers"])
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "mean", "difference", "outlier"])
        for i, (m, d) in enumerate(zip(res.aux["pair_mean"], res.aux["diff"])):
            w.writerow([i, f"{m:.6f}", f"{d:.6f}", int(i in out)])
        w.writerow([])
        w.writerow(["mean_diff", f"{res.aux['mean_diff']:.6f}"])
        w.writerow(["loa_low", f"{res.aux['loa_low']:.6f}"])
        w.writerow(["loa_high", f"{res.aux['loa_high']:.6f}"])


def mean_sd(values: Sequence[float]) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return math.nan, math.nan
    return float(v.mean()), float(v.std(ddof=1)) if len(v) > 1 else 0.0
