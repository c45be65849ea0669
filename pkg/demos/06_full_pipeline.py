# # The full command-line pipeline
#
# synth-data -> train-stage1 -> extract -> train-stage2 -> predict -> eval,
# driven from the demo config (seed 42, deterministic). Running it twice
# gives byte-identical predictions. Takes a minute or two on a laptop CPU.
#
#     python demos/06_full_pipeline.py [workdir]

import sys
import tempfile
from pathlib import Path

from ichfusion.cli import main

config = Path(__file__).parent / "configs" / "demo_seed42.json"
work = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="ichfusion_demo_"))
data, models = work / "data", work / "models"

steps = [
    ["synth-data", "--config", config, "--out", data],
    ["train-stage1", "--data", data / "manifest_train.json", "--config", config, "--out", models / "stage1.ichw"],
    ["extract", "--data", data / "manifest_train.json", "--model", models / "stage1.ichw", "--config", config,
     "--out", work / "descriptors_train.json"],
    ["train-stage2", "--descriptors", work / "descriptors_train.json", "--data", data / "manifest_train.json",
     "--config", config, "--out", models / "stage2.ichw"],
    ["predict", "--data", data / "manifest_test.json", "--stage1", models / "stage1.ichw",
     "--stage2", models / "stage2.ichw", "--out", work / "predictions.csv"],
    ["eval", "--preds", work / "predictions.csv", "--labels", data / "labels_test.csv", "--out", work / "report.json"],
    ["predict", "--data", data / "manifest_test.json", "--stage1", models / "stage1.ichw",
     "--stage2", models / "stage2.ichw", "--out", work / "predictions_study.csv", "--study-level"],
]
for step in steps:
    print(f"\n$ ichfusion {' '.join(str(a) for a in step)}")
    code = main([str(a) for a in step])
    if code:
        sys.exit(code)
print(f"\noutputs in {work}")
