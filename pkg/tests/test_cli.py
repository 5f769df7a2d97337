import json

import pytest

from mvmseg import cli
from mvmseg import pipeline as pl

TINY = {
    "phantom": {"size": 32, "frames": 8, "subjects": 3, "slices_per_subject": 3, "epi_major_range": [10.5, 11.5],
                "wall_range": [3.0, 3.5], "center_jitter": 1.0},
    "levels": 2,
    "base_channels": 4,
    "folds": 3,
    "train": {"epochs": 1, "batch_size": 4},
}


@pytest.fixture
def config(tmp_path):
    p = tmp_path / "config.json"
    p.write_text(json.dumps(TINY))
    return p


def test_help_lists_commands(capsys):
    with pytest.raises(SystemExit):
        cli.main(["-h"])
    out = capsys.readouterr().out
    for c in ("phantom", "train", "predict", "postprocess", "velocity", "report", "run"):
        assert c in out


def test_bad_variant():
    with pytest.raises(SystemExit):
        cli.main(["train", "--variant", "e", "--fold", "0", "--out", "x"])


def test_step_by_step(tmp_path, config):
    data, ck = tmp_path / "data", tmp_path / "ck"
    assert cli.main(["phantom", "--config", str(config), "--out", str(data)]) == 0
    assert len(list(data.glob("*.mvmt"))) == 9
    assert cli.main(["train", "--config", str(config), "--seed", "3", "--variant", "d", "--fold", "1", "--out", str(ck)]) == 0
    ckpt = ck / "model_d_fold1_epoch1.mvmt"
    assert ckpt.exists() and (ck / "train_log_d_fold1.json").exists()
    study = pl.study_path(data, 0, 0)
    raw, final = tmp_path / "raw.mvmt", tmp_path / "final.mvmt"
    assert cli.main(["predict", "--checkpoint", str(ckpt), "--study", str(study), "--out", str(raw)]) == 0
    assert cli.main(["postprocess", "--masks", str(raw), "--out", str(final), "--contours", str(tmp_path / "c")]) == 0
    assert (tmp_path / "c.csv").read_text().startswith("frame,contour,index,x,y")
    assert cli.main(["velocity", "--study", str(study), "--out", str(tmp_path / "v")]) == 0
    peaks = json.loads((tmp_path / "v" / "peaks.json").read_text())
    assert set(peaks) == {"PS", "PD", "PAS", "flags"}


def test_run_and_report(tmp_path, config):
    out = tmp_path / "run"
    assert cli.main(["run", "--config", str(config), "--variants", "a", "d", "--out", str(out)]) == 0
    assert (out / "report" / "wilcoxon.csv").exists() and (out / "report" / "timing.csv").exists()
    assert cli.main(["report", "--evaluations", str(out / "evaluations"), "--out", str(tmp_path / "again")]) == 0
    for name in ("table1_dice.csv", "wilcoxon.csv", "table2_pearson.csv", "summary.json"):
        assert (out / "report" / name).read_bytes() == (tmp_path / "again" / name).read_bytes()
