"""The whole loop on a tiny synthetic dataset: calibrate, perturb, score, report.

Predictions come from a stand-in "model" that gets worse with severity, so the
numbers only show the plumbing.  The same steps are available as
``medrobust calibrate|perturb|score|report``.

Run:  python demos/03_pipeline_and_report.py [work_dir]
"""

import os
import sys

from medrobust.aggregate import round3
from medrobust.manifest import load_manifest
from medrobust.pipeline import (RunConfig, cmd_calibrate, cmd_perturb, cmd_report, cmd_score,
                                synthetic_predictions)
from medrobust.synthetic import write_demo_dataset

work = sys.argv[1] if len(sys.argv) > 1 else "demo_out/03"
manifests = write_demo_dataset(os.path.join(work, "data"))
cfg = RunConfig(cache_path=os.path.join(work, "calibration.json"), output_root=os.path.join(work, "perturbed"))

records = []
for path in manifests:
    m = load_manifest(path)
    _, summary = cmd_calibrate(m, cfg)
    print(m.dataset_id, m.modality.value)
    print(summary)
    res = cmd_perturb(m, cfg)
    print(res["rows"], "perturbed images\n")

    gt = res["ground_truth"]
    for task in ("segmentation", "vqa", "grounding", "captioning"):
        pred = os.path.join(work, "%s_%s.jsonl" % (m.dataset_id, task))
        synthetic_predictions(gt, pred, task, seed=3)
        records += cmd_score(pred, gt, task, model="toy", ledger_path=res["ledger"])

report = cmd_report(records, os.path.join(work, "report"))
for row in report.table:
    print("%-12s avg_delta_b=%s" % (row["task"], round3(row["avg_delta_b"])))
print()
print("worst perturbations:")
for item in report.ranked_perturbations[:5]:
    print("  %-24s %.3f  %s" % (item.id, item.mean_drop, item.category))
print(report.top_k_summary)
print("severity curve:", {s: round3(v) for s, v in report.severity_curves["toy/default"].items()})
print("\nreport files in", os.path.join(work, "report"))
