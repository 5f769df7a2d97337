"""Command-line entry point: ``mvmseg <command> ...``.

Arrays are TensorFile archives, tables CSV, metadata JSON.  Run ``mvmseg
<command> -h`` for per-command options.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import pipeline as pl
from . import postproc, velocity
from .tensorfile import load_archive, save_archive


def _run_config(args) -> pl.RunConfig:
    run = pl.RunConfig.load(args.config) if getattr(args, "config", None) else pl.RunConfig()
    if getattr(args, "seed", None) is not None:
        run = pl.RunConfig.from_dict({**run.to_dict(), "seed": args.seed})
    return run


def cmd_phantom(args) -> int:
    run = _run_config(args)
    data = pl.Dataset.generate(run.phantom)
    for s in data.studies:
        pl.save_study(s, pl.study_path(args.out, s.subject_id, s.slice_id))
    (Path(args.out) / "phantom.json").write_text(json.dumps(run.phantom.to_dict(), indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(data.studies)} slices to {args.out}")
    return 0


def cmd_train(args) -> int:
    run = _run_config(args)
    data = pl.Dataset.generate(run.phantom)
    out = Path(args.out)
    _, tlog = pl.train(run, data, args.variant, args.fold, out_dir=out)
    (out / f"train_log_{args.variant}_fold{args.fold}.json").write_text(
        json.dumps(tlog.to_dict(), indent=2, sort_keys=True) + "\n"
    )
    print(tlog.checkpoints[-1] if tlog.checkpoints else "no epochs run")
    return 0


def cmd_predict(args) -> int:
    model = pl.load_checkpoint(args.checkpoint)
    study = pl.load_study(args.study)
    raw = pl.ModelPredictor(model)(study)
    save_archive(args.out, {"mask": raw})
    return 0


def cmd_postprocess(args) -> int:
    raw = load_archive(args.masks)["mask"]
    results = postproc.finalize_slice(raw)
    save_archive(args.out, {"mask": np.stack([r.mask for r in results])})
    if args.contours:
        stem = Path(args.contours)
        postproc.write_contours(results, stem.with_suffix(".csv"), stem.with_suffix(".json"))
    bad = sum(r.status == "unrecoverable" for r in results)
    if bad:
        print(f"{bad} unrecoverable frame(s)", file=sys.stderr)
    return 0


def cmd_velocity(args) -> int:
    study = pl.load_study(args.study)
    masks = load_archive(args.masks)["mask"] if args.masks else study.gt_mask
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curve = velocity.global_curve(study.phase[:, 2], masks)
    velocity.write_curve_csv(curve, out / "curve.csv")
    velocity.write_peaks_json(velocity.extract_peaks(curve), out / "peaks.json")
    return 0


def cmd_report(args) -> int:
    evals = pl.load_evaluations(args.evaluations)
    pl.write_report(pl.report(evals), args.out)
    (Path(args.out) / "timing.csv").write_text(pl.timing_table(evals))
    return 0


def cmd_run(args) -> int:
    run = _run_config(args)
    run = pl.RunConfig.from_dict({**run.to_dict(), "output_dir": args.out})
    res = pl.cross_validate(run, args.variants or None)
    out = Path(args.out)
    pl.write_report(pl.report(res.evals), out / "report")
    (out / "report" / "timing.csv").write_text(pl.timing_table(res.evals))
    run.dump(out / "config.json")
    for v in res.evals:
        print(v, " ".join(f"{d:.4f}" for d in res.fold_frame_dice(v)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mvmseg", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed=True):
        sp.add_argument("--config", help="run config JSON (RunConfig keys)")
        if seed:
            sp.add_argument("--seed", type=int, help="override the master seed")

    sp = sub.add_parser("phantom", help="generate the phantom dataset")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_phantom)

    sp = sub.add_parser("train", help="train one variant on one fold")
    common(sp)
    sp.add_argument("--variant", required=True, choices=pl.segnet.VARIANTS)
    sp.add_argument("--fold", required=True, type=int)
    sp.add_argument("--out", required=True, help="checkpoint directory")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("predict", help="raw masks for one slice")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--study", required=True, help="slice archive written by 'phantom'")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_predict)

    sp = sub.add_parser("postprocess", help="clean masks and fit contours")
    sp.add_argument("--masks", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--contours", help="path stem for contour CSV and JSON")
    sp.set_defaults(func=cmd_postprocess)

    sp = sub.add_parser("velocity", help="global velocity curve and peaks")
    sp.add_argument("--study", required=True)
    sp.add_argument("--masks", help="mask archive; ground truth when omitted")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_velocity)

    sp = sub.add_parser("report", help="tables from saved evaluations")
    sp.add_argument("--evaluations", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("run", help="full cross-validation plus report")
    common(sp)
    sp.add_argument("--variants", nargs="*", choices=pl.segnet.VARIANTS)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
