"""Cross-validated training, evaluation and reporting over phantom cine data."""

from __future__ import annotations

import csv
import ctypes
import ctypes.util
import io
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import autodiff as ad
from . import metrics, postproc, segnet, velocity
from .phantom import CineStudy, PhantomConfig, augment, generate_dataset
from .tensorfile import load_archive, save_archive

log = logging.getLogger(__name__)

PEAK_NAMES = ("PS", "PD", "PAS")
LEVELS = ("subject", "slice", "frame")
# model pairs compared with the Wilcoxon test
COMPARISON_PAIRS = (("a", "d"), ("b", "d"), ("c", "d"), ("a", "c"), ("b", "c"))


class TrainingAborted(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs: int = 5
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    augment: bool = True
    validate_each_epoch: bool = True


@dataclass
class RunConfig:
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    levels: int = 3
    base_channels: int = 8
    train: TrainConfig = field(default_factory=TrainConfig)
    folds: int = 5
    seed: int = 0
    variants: tuple[str, ...] = segnet.VARIANTS
    output_dir: str | None = None
    infer_batch: int = 10

    def __post_init__(self) -> None:
        if self.train.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if self.folds > self.phantom.subjects:
            raise ValueError(f"{self.folds} folds but only {self.phantom.subjects} subjects")
        for v in self.variants:
            if v not in segnet.VARIANTS:
                raise ValueError(f"unknown variant {v!r}")

    def model_config(self, variant: str, fold: int) -> segnet.ModelConfig:
        return segnet.ModelConfig(variant, self.levels, self.base_channels, derive_seed(self.seed, fold, variant, "init"))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variants"] = list(self.variants)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunConfig":
        kw = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(kw) - known
        if unknown:
            raise ValueError(f"unknown run config keys: {sorted(unknown)}")
        if "phantom" in kw:
            kw["phantom"] = PhantomConfig.from_dict(kw["phantom"])
        if "train" in kw:
            kw["train"] = TrainConfig(**kw["train"])
        if "variants" in kw:
            kw["variants"] = tuple(kw["variants"])
        return cls(**kw)

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def derive_seed(master: int, fold: int, variant: str, purpose: str) -> int:
    """Independent child seed per (fold, variant, purpose)."""
    words = [master, fold, segnet.VARIANTS.index(variant), sum(map(ord, purpose)) * 131 + len(purpose)]
    return int(np.random.SeedSequence(words).generate_state(1)[0])


# ---------------------------------------------------------------------------
# data


def scale_phase(ph: np.ndarray, venc: float) -> np.ndarray:
    """Network input scaling for phase channels (about +/-1 for 10 cm/s at venc 30)."""
    return (ph * (3.0 / venc)).astype(np.float32)


@dataclass
class Dataset:
    studies: list[CineStudy]

    @classmethod
    def generate(cls, cfg: PhantomConfig) -> "Dataset":
        return cls(generate_dataset(cfg))

    def __post_init__(self) -> None:
        self.magnitude = np.concatenate([s.magnitude for s in self.studies])
        self.phase = np.concatenate([scale_phase(s.phase, s.venc) for s in self.studies])
        self.mask = np.concatenate([s.gt_mask for s in self.studies])
        self.frame_subject = np.concatenate([np.full(s.frames, s.subject_id) for s in self.studies])

    @property
    def subject_ids(self) -> list[int]:
        return sorted({s.subject_id for s in self.studies})

    def frames_of(self, subjects: Iterable[int]) -> np.ndarray:
        return np.nonzero(np.isin(self.frame_subject, list(subjects)))[0]

    def studies_of(self, subjects: Iterable[int]) -> list[CineStudy]:
        keep = set(subjects)
        return [s for s in self.studies if s.subject_id in keep]


def save_study(study: CineStudy, path: str | Path) -> None:
    """Arrays to a TensorFile archive, everything else to a JSON sidecar next to it."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_archive(path, {"magnitude": study.magnitude, "phase": study.phase, "gt_mask": study.gt_mask})
    path.with_suffix(".json").write_text(json.dumps(study.metadata(), indent=2, sort_keys=True) + "\n")


def load_study(path: str | Path) -> CineStudy:
    path = Path(path)
    arrays = load_archive(path)
    meta = json.loads(path.with_suffix(".json").read_text())
    return CineStudy(
        magnitude=arrays["magnitude"],
        phase=arrays["phase"],
        gt_mask=arrays["gt_mask"],
        gt_epi=[postproc.Ellipse(**e) for e in meta["gt_epi"]],
        gt_endo=[postproc.Ellipse(**e) for e in meta["gt_endo"]],
        gt_curve=np.asarray(meta["gt_curve"], dtype=np.float64),
        subject_id=meta["subject_id"],
        slice_id=meta["slice_id"],
        venc=meta["venc"],
    )


def study_path(directory: str | Path, subject: int, slice_id: int) -> Path:
    return Path(directory) / f"subject{subject:02d}_slice{slice_id}.mvmt"


@dataclass
class FoldSplit:
    train: list[list[int]]
    validation: list[list[int]]

    def __len__(self) -> int:
        return len(self.validation)

    def fold(self, i: int) -> tuple[list[int], list[int]]:
        return self.train[i], self.validation[i]


def kfold_split(subject_ids: Sequence[int], k: int, seed: int) -> FoldSplit:
    """Seeded shuffle of subjects, dealt round-robin into ``k`` validation folds."""
    ids = list(subject_ids)
    if len(set(ids)) != len(ids):
        raise ValueError("subject ids must be unique")
    if not 2 <= k <= len(ids):
        raise ValueError(f"k={k} must be in [2, {len(ids)}]")
    order = [ids[i] for i in np.random.default_rng(seed).permutation(len(ids))]
    val = [sorted(order[i::k]) for i in range(k)]
    train = [sorted(set(ids) - set(v)) for v in val]
    return FoldSplit(train, val)


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainLog:
    variant: str
    fold: int
    first_batch_loss: float | None = None
    epochs: list[dict] = field(default_factory=list)
    checkpoints: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def model_logits(model: segnet.UNetModel, mag: np.ndarray, ph: np.ndarray) -> ad.Tensor:
    """Forward pass; each variant picks (or stacks) the inputs it consumes.  Phase is pre-scaled."""
    return segnet.forward(model, mag, ph)


def predict_frames(model: segnet.UNetModel, mag: np.ndarray, ph: np.ndarray, batch: int = 10) -> np.ndarray:
    """Raw argmax masks for ``[N,1,H,W]`` / ``[N,3,H,W]`` inputs (phase scaled)."""
    out = []
    for i in range(0, len(mag), batch):
        out.append(segnet.predict_mask(model_logits(model, mag[i : i + batch], ph[i : i + batch])))
    return np.concatenate(out) if out else np.zeros((0,) + mag.shape[2:], np.uint8)


def _keep_heap() -> None:
    """Ask glibc to serve large blocks from a heap it never trims.

    Every step allocates and frees many multi-MB activation buffers; with the
    default mmap threshold each one is a fresh mapping that page-faults on first
    touch, which costs about 15% of a training step.  No effect elsewhere.
    """
    name = ctypes.util.find_library("c")
    if not name or "libc" not in name:
        return
    try:
        libc = ctypes.CDLL(name)
        m_trim_threshold, m_top_pad, m_mmap_threshold = -1, -2, -3
        libc.mallopt(m_mmap_threshold, 32 << 20)
        libc.mallopt(m_trim_threshold, 1 << 30)
        libc.mallopt(m_top_pad, 64 << 20)
    except (OSError, AttributeError):
        pass


def train(
    run: RunConfig,
    data: Dataset,
    variant: str,
    fold: int,
    split: FoldSplit | None = None,
    out_dir: str | Path | None = None,
) -> tuple[segnet.UNetModel, TrainLog]:
    """Train one variant on one fold from scratch.

    Frames of the training subjects are shuffled every epoch and consumed in
    batches (augmented when enabled); each batch does forward, cross-entropy,
    backward and one Adam step.  A checkpoint is written per epoch when
    ``out_dir`` is given.
    """
    split = split or kfold_split(data.subject_ids, run.folds, run.seed)
    train_ids, val_ids = split.fold(fold)
    model = segnet.build_model(run.model_config(variant, fold))
    tlog = TrainLog(variant, fold)
    tc = run.train
    if tc.epochs == 0:
        return model, tlog

    _keep_heap()
    opt = ad.Adam(model.parameters(), tc.lr, tc.beta1, tc.beta2, tc.eps)
    rng = np.random.default_rng(derive_seed(run.seed, fold, variant, "train"))
    train_frames = data.frames_of(train_ids)
    val_frames = data.frames_of(val_ids)
    val_set = set(val_ids)
    n_batches = math.ceil(len(train_frames) / tc.batch_size)
    step = 0
    for epoch in range(tc.epochs):
        order = train_frames[rng.permutation(len(train_frames))]
        total = 0.0
        for bi in range(n_batches):
            idx = order[bi * tc.batch_size : (bi + 1) * tc.batch_size]
            if val_set.intersection(data.frame_subject[idx].tolist()):
                raise AssertionError(f"validation subject leaked into training batch {bi}")
            mag, ph, lab = data.magnitude[idx], data.phase[idx], data.mask[idx]
            if tc.augment:
                mag, ph, lab = _augment_batch(mag, ph, lab, rng)
            opt.zero_grad()
            with ad.Tape() as tape:
                loss = ad.softmax_ce(model_logits(model, mag, ph), lab)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingAborted(f"non-finite loss at epoch {epoch}, batch {bi}")
            if step == 0:
                tlog.first_batch_loss = value
            tape.backward(loss)
            opt.step()
            total += value
            step += 1
        entry = {"epoch": epoch + 1, "mean_loss": total / n_batches, "batches": n_batches}
        if tc.validate_each_epoch and len(val_frames):
            pred = predict_frames(model, data.magnitude[val_frames], data.phase[val_frames], run.infer_batch)
            entry["val_frame_dice"] = float(
                np.mean([metrics.dice(p, g) for p, g in zip(pred, data.mask[val_frames])])
            )
        tlog.epochs.append(entry)
        log.info("variant %s fold %d epoch %d: %s", variant, fold, epoch + 1, entry)
        if out_dir is not None:
            path = Path(out_dir) / f"model_{variant}_fold{fold}_epoch{epoch + 1}.mvmt"
            save_checkpoint(model, path)
            tlog.checkpoints.append(str(path))
    return model, tlog


def _augment_batch(mag, ph, lab, rng):
    out = [augment(m, p, l, rng) for m, p, l in zip(mag, ph, lab)]
    return (
        np.stack([o[0] for o in out]),
        np.stack([o[1] for o in out]),
        np.stack([o[2] for o in out]),
    )


def save_checkpoint(model: segnet.UNetModel, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_archive(path, model.state_dict())
    path.with_suffix(".json").write_text(json.dumps(model.config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_checkpoint(path: str | Path) -> segnet.UNetModel:
    path = Path(path)
    cfg = segnet.ModelConfig(**json.loads(path.with_suffix(".json").read_text()))
    model = segnet.build_model(cfg)
    model.load_state_dict(load_archive(path))
    return model


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class SlicePeaks:
    subject: int
    slice: int
    predicted: dict | None
    ground_truth: dict
    flags: list[str] = field(default_factory=list)


@dataclass
class FoldEval:
    variant: str
    fold: int
    frame_dice: list[dict] = field(default_factory=list)
    slice_dice: list[dict] = field(default_factory=list)
    subject_dice: list[dict] = field(default_factory=list)
    slice_dice_frame_mean: list[dict] = field(default_factory=list)
    subject_dice_frame_mean: list[dict] = field(default_factory=list)
    peaks: list[dict] = field(default_factory=list)
    timing: list[dict] = field(default_factory=list)
    unrecoverable: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldEval":
        return cls(**d)

    def mean_frame_dice(self) -> float:
        return float(np.mean([r["value"] for r in self.frame_dice]))


Predictor = Callable[[CineStudy], np.ndarray]


class ModelPredictor:
    """Raw per-frame masks of a trained model for a whole cine slice."""

    def __init__(self, model: segnet.UNetModel, batch: int = 10):
        self.model = model
        self.batch = batch

    def __call__(self, study: CineStudy) -> np.ndarray:
        return predict_frames(self.model, study.magnitude, scale_phase(study.phase, study.venc), self.batch)


def analyse_slice(study: CineStudy, raw: np.ndarray) -> tuple[list[postproc.ContourResult], SlicePeaks]:
    """Post-process one slice's raw masks and extract predicted and reference peaks."""
    results = postproc.finalize_slice(raw)
    gt_peaks = velocity.extract_peaks(velocity.global_curve(study.phase[:, 2], study.gt_mask))
    final = np.stack([r.mask for r in results])
    flags = []
    try:
        curve = velocity.global_curve(study.phase[:, 2], final)
        pred = velocity.extract_peaks(curve).to_dict()
    except velocity.EmptyMask as exc:
        pred = None
        flags.append(f"no velocity curve: {exc}")
    return results, SlicePeaks(study.subject_id, study.slice_id, pred, gt_peaks.to_dict(), flags)


def evaluate(
    predictor: Predictor,
    studies: Sequence[CineStudy] | Sequence[Callable[[], CineStudy]],
    variant: str = "?",
    fold: int = -1,
) -> FoldEval:
    """Dice (raw predictions, before post-processing) at frame / slice / subject
    level, post-processed contours, velocity peaks from predicted and reference
    masks, and per-slice wall-clock time.

    ``studies`` may hold zero-argument loaders instead of studies; their
    loading time then counts towards the slice timing.
    """
    ev = FoldEval(variant, fold)
    by_subject: dict[int, tuple[list, list]] = {}
    for item in studies:
        t0 = time.perf_counter()
        study = item() if callable(item) else item
        raw = predictor(study)
        results, peaks = analyse_slice(study, raw)
        elapsed = time.perf_counter() - t0

        sid, kid = study.subject_id, study.slice_id
        for t, (p, g) in enumerate(zip(raw, study.gt_mask)):
            ev.frame_dice.append({"subject": sid, "slice": kid, "frame": t, "value": metrics.dice(p, g)})
        ev.slice_dice.append({"subject": sid, "slice": kid, "value": metrics.dice_pooled(raw, study.gt_mask)})
        ev.slice_dice_frame_mean.append(
            {"subject": sid, "slice": kid, "value": metrics.dice_mean_of_frames(raw, study.gt_mask)}
        )
        acc = by_subject.setdefault(sid, ([], []))
        acc[0].extend(raw)
        acc[1].extend(study.gt_mask)
        for t, r in enumerate(results):
            if r.status == "unrecoverable":
                ev.unrecoverable.append({"subject": sid, "slice": kid, "frame": t})
        ev.peaks.append(asdict(peaks))
        ev.timing.append({"subject": sid, "slice": kid, "seconds": elapsed})
    for sid in sorted(by_subject):
        p, g = by_subject[sid]
        ev.subject_dice.append({"subject": sid, "value": metrics.dice_pooled(p, g)})
        ev.subject_dice_frame_mean.append({"subject": sid, "value": metrics.dice_mean_of_frames(p, g)})
    return ev


# ---------------------------------------------------------------------------
# cross-validation


@dataclass
class CVResult:
    config: RunConfig
    split: FoldSplit
    evals: dict[str, list[FoldEval]] = field(default_factory=dict)
    logs: dict[str, list[TrainLog]] = field(default_factory=dict)

    def fold_frame_dice(self, variant: str) -> list[float]:
        return [e.mean_frame_dice() for e in self.evals[variant]]


def cross_validate(
    run: RunConfig,
    variants: Sequence[str] | None = None,
    data: Dataset | None = None,
    folds: Sequence[int] | None = None,
) -> CVResult:
    """Train and evaluate every requested variant on every fold."""
    data = data or Dataset.generate(run.phantom)
    split = kfold_split(data.subject_ids, run.folds, run.seed)
    res = CVResult(run, split)
    out = Path(run.output_dir) if run.output_dir else None
    for v in variants or run.variants:
        for f in folds if folds is not None else range(run.folds):
            ckpt_dir = out / "checkpoints" if out else None
            model, tlog = train(run, data, v, f, split, ckpt_dir)
            ev = evaluate(ModelPredictor(model, run.infer_batch), data.studies_of(split.validation[f]), v, f)
            res.evals.setdefault(v, []).append(ev)
            res.logs.setdefault(v, []).append(tlog)
            log.info("variant %s fold %d: mean frame Dice %.4f", v, f, ev.mean_frame_dice())
    if out:
        save_evaluations(res.evals, out / "evaluations")
        (out / "train_logs.json").write_text(
            json.dumps({v: [l.to_dict() for l in ls] for v, ls in res.logs.items()}, indent=2, sort_keys=True) + "\n"
        )
    return res


def save_evaluations(evals: Mapping[str, Sequence[FoldEval]], directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for v, evs in evals.items():
        for e in evs:
            (d / f"eval_{v}_fold{e.fold}.json").write_text(json.dumps(e.to_dict(), sort_keys=True) + "\n")


def load_evaluations(directory: str | Path) -> dict[str, list[FoldEval]]:
    out: dict[str, list[FoldEval]] = {}
    for p in sorted(Path(directory).glob("eval_*_fold*.json")):
        e = FoldEval.from_dict(json.loads(p.read_text()))
        out.setdefault(e.variant, []).append(e)
    for evs in out.values():
        evs.sort(key=lambda e: e.fold)
    return out


# ---------------------------------------------------------------------------
# report


def _fmt(x: float | None, digits: int = 4) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "NA"
    return f"{x:.{digits}f}"


def _csv(rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def _dice_values(evs: Sequence[FoldEval], level: str, alt: bool = False) -> dict[tuple, float]:
    attr = {"frame": "frame_dice", "slice": "slice_dice", "subject": "subject_dice"}[level]
    if alt and level != "frame":
        attr += "_frame_mean"
    out = {}
    for e in evs:
        for r in getattr(e, attr):
            key = tuple(r[k] for k in ("subject", "slice", "frame") if k in r)
            out[key] = r["value"]
    return out


def _peak_pairs(evs: Sequence[FoldEval], peak: str) -> tuple[list[float], list[float], list[tuple]]:
    pred, gt, keys = [], [], []
    for e in evs:
        for p in e.peaks:
            if p["predicted"] is None:
                continue
            keys.append((p["subject"], p["slice"]))
            pred.append(p["predicted"][peak]["value"])
            gt.append(p["ground_truth"][peak]["value"])
    order = sorted(range(len(keys)), key=keys.__getitem__)
    return [pred[i] for i in order], [gt[i] for i in order], [keys[i] for i in order]


def report(evals: Mapping[str, Sequence[FoldEval]], variants: Sequence[str] = segnet.VARIANTS) -> dict[str, str]:
    """Report bundle as ``{file name: text}``; a pure function of the evaluations.

    Dice table (mean, sd per level per variant), pairwise Wilcoxon p-values,
    Pearson R / p and Bland-Altman data per peak per variant.  Missing
    variants leave explicit ``NA`` gaps.  Timing is written separately.
    """
    present = [v for v in variants if v in evals and evals[v]]
    missing = [v for v in variants if v not in present]
    files: dict[str, str] = {}
    summary: dict = {"variants": present, "missing_variants": missing, "dice": {}, "wilcoxon": [], "pearson": []}

    for alt, name in ((False, "table1_dice.csv"), (True, "table1_dice_frame_mean.csv")):
        header = ["level"] + [f"{v}_{s}" for v in variants for s in ("mean", "sd", "n")]
        rows = [header]
        for level in LEVELS:
            row = [level]
            for v in variants:
                if v in present:
                    vals = list(_dice_values(evals[v], level, alt).values())
                    m, sd = metrics.mean_sd(vals)
                    row += [_fmt(m), _fmt(sd), len(vals)]
                    if not alt:
                        summary["dice"].setdefault(level, {})[v] = {"mean": m, "sd": sd, "n": len(vals)}
                else:
                    row += ["NA", "NA", 0]
            rows.append(row)
        files[name] = _csv(rows)

    rows = [["model_x", "model_y", "level", "n", "W", "p_value", "significant", "note"]]
    for x, y in COMPARISON_PAIRS:
        for level in LEVELS:
            if x not in present or y not in present:
                rows.append([x, y, level, 0, "NA", "NA", "NA", "missing variant"])
                summary["wilcoxon"].append({"x": x, "y": y, "level": level, "p": None, "note": "missing variant"})
                continue
            dx, dy = _dice_values(evals[x], level), _dice_values(evals[y], level)
            keys = sorted(set(dx) & set(dy))
            xs, ys = [dx[k] for k in keys], [dy[k] for k in keys]
            note = ""
            try:
                r = metrics.wilcoxon_signed_rank(xs, ys)
                note = ";".join(r.flags + [r.aux.get("method", "")]).strip(";")
                rows.append([x, y, level, r.n, _fmt(r.statistic, 2), _fmt(r.p_value, 6), int(r.significant), note])
                summary["wilcoxon"].append({"x": x, "y": y, "level": level, "n": r.n, "W": r.statistic, "p": r.p_value, "note": note})
            except ValueError as exc:
                rows.append([x, y, level, len(keys), "NA", "NA", "NA", str(exc)])
                summary["wilcoxon"].append({"x": x, "y": y, "level": level, "p": None, "note": str(exc)})
    files["wilcoxon.csv"] = _csv(rows)

    rows = [["peak", "variant", "n", "R", "p_value", "significant", "ba_mean_diff", "ba_loa_low", "ba_loa_high", "ba_outliers", "note"]]
    for peak in PEAK_NAMES:
        for v in variants:
            if v not in present:
                rows.append([peak, v, 0, "NA", "NA", "NA", "NA", "NA", "NA", "NA", "missing variant"])
                continue
            pred, gt, keys = _peak_pairs(evals[v], peak)
            entry = {"peak": peak, "variant": v, "n": len(pred)}
            try:
                pr = metrics.pearson(pred, gt)
                ba = metrics.bland_altman(pred, gt)
            except (ValueError, metrics.DegenerateVariance) as exc:
                rows.append([peak, v, len(pred), "NA", "NA", "NA", "NA", "NA", "NA", "NA", str(exc)])
                entry["note"] = str(exc)
                summary["pearson"].append(entry)
                continue
            rows.append(
                [
                    peak, v, pr.n, _fmt(pr.statistic), _fmt(pr.p_value, 6), int(pr.significant),
                    _fmt(ba.aux["mean_diff"]), _fmt(ba.aux["loa_low"]), _fmt(ba.aux["loa_high"]),
                    len(ba.aux["outliers"]), "",
                ]
            )
            entry.update(
                R=pr.statistic, p=pr.p_value, mean_diff=ba.aux["mean_diff"], loa_low=ba.aux["loa_low"],
                loa_high=ba.aux["loa_high"], outliers=len(ba.aux["outliers"]),
            )
            summary["pearson"].append(entry)
            ba_rows = [["subject", "slice", "mean", "difference", "outlier"]]
            out_set = set(ba.aux["outliers"])
            for i, (k, m, d) in enumerate(zip(keys, ba.aux["pair_mean"], ba.aux["diff"])):
                ba_rows.append([k[0], k[1], _fmt(m, 6), _fmt(d, 6), int(i in out_set)])
            files[f"bland_altman_{v}_{peak}.csv"] = _csv(ba_rows)
    files["table2_pearson.csv"] = _csv(rows)
    files["summary.json"] = json.dumps(summary, indent=2, sort_keys=True, default=_json_default) + "\n"
    return files


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def timing_table(evals: Mapping[str, Sequence[FoldEval]]) -> str:
    rows = [["variant", "fold", "subject", "slice", "seconds"]]
    for v in sorted(evals):
        for e in evals[v]:
            for t in e.timing:
                rows.append([v, e.fold, t["subject"], t["slice"], f"{t['seconds']:.4f}"])
    return _csv(rows)


def write_report(files: Mapping[str, str], directory: str | Path) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name, text in files.items():
        (d / name).write_text(text)
