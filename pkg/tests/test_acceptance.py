"""Acceptance criteria 1-9, one verdict line each (see the "acceptance criteria" summary section).

Criteria 5-8 share two five-fold runs of variants a and d, trained once per session.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from mvmseg import autodiff as ad
from mvmseg import metrics, postproc, segnet, velocity
from mvmseg import pipeline as pl
from mvmseg.autodiff import Tensor
from mvmseg.phantom import PhantomConfig, generate_study

from conftest import ACCEPTANCE, gradcheck, sampled_gradcheck
from test_autodiff import naive_conv
from test_metrics import count_dice, enumerate_p
from test_postproc import flood_largest, loops_closed


def verdict(n, ok, detail):
    ACCEPTANCE[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[n])
    return ok


# ---------------------------------------------------------------------------
# shared cross-validation runs


class _Run:
    def __init__(self, run):
        t0 = time.perf_counter()
        self.res = pl.cross_validate(run, ("a", "d"))
        self.seconds = time.perf_counter() - t0
        self.run = run


@pytest.fixture(scope="session")
def cv_default(tmp_path_factory):
    return _Run(pl.RunConfig(output_dir=str(tmp_path_factory.mktemp("cv_default"))))


@pytest.fixture(scope="session")
def cv_degraded(tmp_path_factory):
    run = pl.RunConfig(phantom=PhantomConfig(annulus_value=0.35), output_dir=str(tmp_path_factory.mktemp("cv_degraded")))
    return _Run(run)


# ---------------------------------------------------------------------------


def _primitive_cases(rng):
    """(name, scalar function, fresh leaf inputs); random projections are fixed per case."""
    T = lambda *shape: Tensor(rng.standard_normal(shape), requires_grad=True)

    def proj(op, shape):
        r = Tensor(rng.standard_normal(shape))
        return lambda *xs: ad.sum_all(ad.mul(op(*xs), r))

    pool_in = Tensor((rng.permutation(144) * 0.05 - 3.6).reshape(2, 2, 6, 6), requires_grad=True)
    labels = rng.integers(0, 2, (2, 6, 6))
    yield "conv2d", proj(ad.conv2d, (2, 3, 6, 6)), [T(2, 2, 6, 6), T(3, 2, 3, 3), T(3)]
    yield "conv1x1", proj(ad.conv2d, (2, 3, 6, 6)), [T(2, 2, 6, 6), T(3, 2, 1, 1), T(3)]
    yield "maxpool2", proj(ad.maxpool2, (2, 2, 3, 3)), [pool_in]
    yield "upsample_nn2", proj(ad.upsample_nn2, (2, 2, 12, 12)), [T(2, 2, 6, 6)]
    yield "concat_channels", proj(ad.concat_channels, (2, 5, 6, 6)), [T(2, 2, 6, 6), T(2, 3, 6, 6)]
    yield "relu", proj(ad.relu, (2, 2, 6, 6)), [T(2, 2, 6, 6)]
    yield "sigmoid", proj(ad.sigmoid, (2, 2, 6, 6)), [T(2, 2, 6, 6)]
    yield "mul", proj(ad.mul, (2, 2, 6, 6)), [T(2, 2, 6, 6), T(2, 1, 6, 6)]
    yield "softmax_ce", (lambda z: ad.softmax_ce(z, labels)), [T(2, 2, 6, 6)]


def test_criterion_1_gradients(monkeypatch):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, probes = {}, {}
    with ad.precision(np.float64):
        for name, f, inputs in _primitive_cases(rng):
            worst[name] = gradcheck(f, inputs, h=1e-3)
        for v in segnet.VARIANTS:
            m = segnet.build_model(segnet.ModelConfig(variant=v, levels=2, base_channels=4, seed=11))
            for n, p in m.named_parameters():
                if n.endswith(".b"):
                    p.data[...] = rng.standard_normal(p.shape) * 0.1
            m["head.w"].data[...] = rng.standard_normal(m["head.w"].shape) * 0.5
            mag = rng.standard_normal((2, 1, 8, 8))
            ph = rng.standard_normal((2, 3, 8, 8))
            lab = rng.integers(0, 2, (2, 8, 8))
            f = lambda: ad.softmax_ce(segnet.forward(m, mag, ph), lab)
            err, checked, skipped = sampled_gradcheck(f, m.parameters(), rng, monkeypatch, per_tensor=4)
            probes[v] = (checked, skipped)
            worst[f"variant {v}"] = err if checked >= 30 and checked >= skipped else math.inf
    secs = time.perf_counter() - t0
    bad = {k: e for k, e in worst.items() if not e < 1e-4}
    ok = not bad and secs < 60
    detail = f"max rel err {max(worst.values()):.2e} over {len(worst)} checks, {secs:.1f} s"
    assert verdict(1, ok, detail + (f", failing {sorted(bad)}" if bad else "")), (worst, probes)


def test_criterion_2_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    x = rng.standard_normal((2, 3, 7, 7))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    with ad.precision(np.float64):
        conv_err = float(np.max(np.abs(ad.conv2d(Tensor(x), Tensor(w), Tensor(b)).data - naive_conv(x, w, b))))
    lc_ok = all(
        np.array_equal(postproc.largest_component(m), flood_largest(m))
        for m in (rng.random((20, 20, 20)) < rng.uniform(0.3, 0.6, (20, 1, 1)))
    )
    dice_ok = all(
        metrics.dice(a, b) == count_dice(a, b) for a, b in (rng.random((20, 2, 12, 12)) < 0.5)
    )
    wil_ok = True
    for _ in range(10):
        xs, ys = rng.standard_normal((2, 8))
        wil_ok &= metrics.wilcoxon_signed_rank(xs, ys).p_value == enumerate_p(xs - ys)
    secs = time.perf_counter() - t0
    ok = conv_err < 1e-6 and lc_ok and dice_ok and wil_ok and secs < 60
    detail = (
        f"conv max abs err {conv_err:.1e}, largest_component exact={lc_ok}, dice exact={dice_ok}, "
        f"wilcoxon n=8 exact={wil_ok}, {secs:.1f} s"
    )
    assert verdict(2, ok, detail)


def test_criterion_3_geometry():
    truth = (31.5, 30.0, 20.0, 12.0, math.radians(30))
    e = postproc.fit_ellipse(postproc.Ellipse(*truth).sample(64))
    rel = max(abs(g - w) / abs(w) for g, w in zip((e.cx, e.cy, e.a, e.b, e.theta), truth))

    s = generate_study(PhantomConfig(noise_magnitude=0.0, noise_phase=0.0), 0, 0)
    m = s.gt_mask[0].copy()
    epi = s.gt_epi[0]
    yy, xx = np.mgrid[0:64, 0:64]
    ang = np.arctan2(yy - epi.cy, xx - epi.cx)
    m[(ang > 0) & (ang < np.pi / 2)] = 0
    broken = not loops_closed(m, (epi.cy, epi.cx))
    restored = loops_closed(postproc.finalize(m).mask, (epi.cy, epi.cx))
    ok = rel <= 1e-6 and broken and restored
    assert verdict(3, ok, f"fit max rel err {rel:.1e}; 90-degree gap opened={broken}, loops restored={restored}")


def test_criterion_4_velocity_round_trip():
    cfg = PhantomConfig(noise_magnitude=0.0, noise_phase=0.0)
    errs = {"PS": 0.0, "PD": 0.0, "PAS": 0.0}
    for subject, slice_id in ((0, 0), (4, 2), (9, 3)):
        s = generate_study(cfg, subject, slice_id)
        p = velocity.extract_peaks(velocity.global_curve(s.phase[:, 2], s.gt_mask))
        for name, peak, amp in zip(errs, (p.ps, p.pd, p.pas), (6.0, -9.0, -4.0)):
            errs[name] = max(errs[name], abs(peak.value - amp))
    ok = errs["PS"] <= 0.35 and errs["PD"] <= 0.55 and errs["PAS"] <= 0.30
    assert verdict(4, ok, "max |peak - amplitude| " + ", ".join(f"{k} {v:.3f}" for k, v in errs.items()))


def test_criterion_5_learning(cv_default):
    dice = {v: cv_default.res.fold_frame_dice(v) for v in ("a", "d")}
    passing = {v: sum(d >= 0.85 for d in ds) for v, ds in dice.items()}
    minutes = cv_default.seconds / 60
    ok = all(n >= 4 for n in passing.values()) and minutes < 30
    detail = "; ".join(f"{v} folds {' '.join(f'{d:.4f}' for d in ds)}" for v, ds in dice.items())
    assert verdict(5, ok, f"{detail}; {minutes:.1f} min"), (dice, minutes)


def test_criterion_6_phase_signal(cv_degraded):
    mean = {v: float(np.mean(cv_degraded.res.fold_frame_dice(v))) for v in ("a", "d")}
    minutes = cv_degraded.seconds / 60
    ok = mean["d"] > mean["a"] and minutes < 30
    assert verdict(6, ok, f"mean held-out Dice a {mean['a']:.4f}, d {mean['d']:.4f}; {minutes:.1f} min"), mean


def test_criterion_7_peak_agreement(cv_default):
    summary = json.loads(pl.report(cv_default.res.evals, ("a", "d"))["summary.json"])
    eligible = [v for v in ("a", "d") if sum(d >= 0.85 for d in cv_default.res.fold_frame_dice(v)) >= 4]
    parts, ok = [], bool(eligible)
    for e in summary["pearson"]:
        if e["variant"] not in eligible:
            continue
        frac = e.get("outliers", math.inf) / max(e["n"], 1)
        good = e.get("R", -1) >= 0.9 and e.get("p", 1) < 0.05 and frac <= 0.10
        ok &= good
        parts.append(f"{e['variant']}/{e['peak']} R={e.get('R', float('nan')):.3f} p={e.get('p', float('nan')):.1e} out={frac:.0%}")
    assert verdict(7, ok, "; ".join(parts) or "no variant passed criterion 5"), summary["pearson"]


def test_criterion_8_timing(cv_default, tmp_path):
    split = cv_default.res.split
    last = cv_default.run.train.epochs
    model = pl.load_checkpoint(Path(cv_default.run.output_dir) / "checkpoints" / f"model_d_fold0_epoch{last}.mvmt")
    paths = []
    for sid in split.validation[0]:
        for k in range(cv_default.run.phantom.slices_per_subject):
            p = pl.study_path(tmp_path, sid, k)
            pl.save_study(generate_study(cv_default.run.phantom, sid, k), p)
            paths.append(p)
    ev = pl.evaluate(pl.ModelPredictor(model), [lambda p=p: pl.load_study(p) for p in paths], "d", 0)
    worst = max(t["seconds"] for t in ev.timing)
    ok = worst < 15.0
    assert verdict(8, ok, f"load+infer+postprocess per 50-frame slice: worst {worst:.2f} s over {len(paths)} slices")


def test_criterion_9_determinism(tmp_path):
    # small enough to run twice, trained enough that every report table is populated
    tiny = PhantomConfig(
        size=32, frames=10, subjects=4, slices_per_subject=3,
        epi_major_range=(10.5, 11.5), wall_range=(3.0, 3.5), center_jitter=1.0,
    )
    files = []
    for i in range(2):
        run = pl.RunConfig(
            phantom=tiny, levels=2, base_channels=4, folds=4, seed=42,
            train=pl.TrainConfig(epochs=4, batch_size=4, lr=1e-2), output_dir=str(tmp_path / f"run{i}"),
        )
        files.append(pl.report(pl.cross_validate(run).evals))
    same = files[0] == files[1]
    populated = sum(name.startswith("bland_altman_") for name in files[0]) == 12
    ok = same and populated
    assert verdict(9, ok, f"{len(files[0])} report files, byte-identical={same}"), sorted(files[0])
