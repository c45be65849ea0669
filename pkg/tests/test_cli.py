import json

import numpy as np
import pytest

from ichfusion import cli
from ichfusion.errors import NumericalAbort
from ichfusion.metrics import read_predictions_csv

TINY_RUN = {
    "seed": 3,
    "deterministic": True,
    "synth": {"n_studies": 6, "fractions": [0.5, 0.5], "phantom": {"image_size": 16, "slices": [6, 8]}},
    "stage1": {
        "epochs": 2,
        "blocks_per_batch": 4,
        "backbone": {"input_size": [16, 16], "stages": [{"channels": 4}, {"channels": 8}]},
    },
    "stage2": {"epochs": 2, "batch_size": 16},
}


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = root / "run.json"
    config.write_text(json.dumps(TINY_RUN))
    data = root / "data"
    s1, s2 = root / "models" / "s1.ichw", root / "models" / "s2.ichw"
    desc = root / "desc" / "train.json"
    steps = [
        ["synth-data", "--config", config, "--out", data],
        ["train-stage1", "--data", data / "manifest_train.json", "--config", config, "--out", s1],
        ["extract", "--data", data / "manifest_train.json", "--model", s1, "--config", config, "--out", desc],
        ["train-stage2", "--descriptors", desc, "--data", data / "manifest_train.json", "--config", config, "--out", s2],
        ["predict", "--data", data / "manifest_test.json", "--stage1", s1, "--stage2", s2, "--out", root / "pred.csv"],
        ["predict", "--data", data / "manifest_test.json", "--stage1", s1, "--stage2", s2,
         "--out", root / "pred_study.csv", "--study-level"],
        ["eval", "--preds", root / "pred.csv", "--labels", data / "labels_test.csv", "--out", root / "report.json"],
    ]
    for step in steps:
        assert cli.main([str(a) for a in step]) == 0, step
    return root


def test_pipeline_outputs(pipeline):
    report = json.loads((pipeline / "report.json").read_text())
    assert report["mode"] == "slice" and report["n_samples"] > 0
    slices = read_predictions_csv(pipeline / "pred.csv")
    studies = read_predictions_csv(pipeline / "pred_study.csv")
    for sid, row in studies.items():
        rows = [v for k, v in slices.items() if k.rsplit("_", 1)[0] == sid]
        assert np.array_equal(row, np.max(rows, axis=0))


def test_stage1_log_and_checkpoints(pipeline):
    log = json.loads((pipeline / "models" / "s1.log.json").read_text())
    assert log["lr_trace"][0] == 5e-4 and log["lr_trace"][-1] == 0.0
    assert log["config"]["seed"] == 3
    ckpts = sorted(p.name for p in (pipeline / "models" / "s1.checkpoints").iterdir())
    assert ckpts == ["epoch_001.ichw", "epoch_002.ichw"]


def test_eval_labels_against_themselves(pipeline, capsys):
    labels = pipeline / "data" / "labels_test.csv"
    assert cli.main(["eval", "--preds", str(labels), "--labels", str(labels), "--out", str(pipeline / "self.json")]) == 0
    rep = json.loads((pipeline / "self.json").read_text())
    assert all(v in (1.0, None) for v in rep["auc"].values())
    assert "Mean" in capsys.readouterr().out


def test_invalid_config_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"seed": 1, "stage1": {"epochs": 0}}))
    assert cli.main(["synth-data", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2
    assert "stage1.epochs" in capsys.readouterr().err


def test_bad_arguments_exit_2():
    with pytest.raises(SystemExit) as info:
        cli.main(["predict", "--data"])
    assert info.value.code == 2


def test_missing_file_exit_4(tmp_path, pipeline):
    code = cli.main(["predict", "--data", str(tmp_path / "nope.json"), "--stage1", str(pipeline / "models" / "s1.ichw"),
                     "--stage2", str(pipeline / "models" / "s2.ichw"), "--out", str(tmp_path / "p.csv")])
    assert code == 4


def test_wrong_bundle_kind_exit_2(tmp_path, pipeline):
    s1 = str(pipeline / "models" / "s1.ichw")
    code = cli.main(["predict", "--data", str(pipeline / "data" / "manifest_test.json"), "--stage1", s1,
                     "--stage2", s1, "--out", str(tmp_path / "p.csv")])
    assert code == 2


def test_numerical_abort_exit_3(tmp_path, pipeline, monkeypatch):
    def boom(*a, **k):
        raise NumericalAbort(step=4, lr=1e-4, grad_norm=float("inf"))

    monkeypatch.setattr(cli, "train_stage1", boom)
    config = tmp_path / "run.json"
    config.write_text(json.dumps(TINY_RUN))
    code = cli.main(["train-stage1", "--data", str(pipeline / "data" / "manifest_train.json"),
                     "--config", str(config), "--out", str(tmp_path / "s1.ichw")])
    assert code == 3


def test_verify_quick():
    assert cli.main(["verify", "--quick"]) == 0
