"""Acceptance suite: six criteria, each checked at its stated tolerance and time budget.

Run with ``pytest tests/test_acceptance.py -v`` (a PASS/FAIL line per criterion is
printed in the terminal summary) or directly with ``python tests/test_acceptance.py``.
"""

import os
import time

import numpy as np

from medrobust import registry
from medrobust.aggregate import build_report, severity_curve, table_rows
from medrobust.calibrate import SEVERITY_LEVELS, calibrate
from medrobust.imagekit import ImageBuffer, ssim
from medrobust.manifest import load_manifest
from medrobust.metrics import bleu, cider, mask_dice, mask_iou, rouge_l
from medrobust.perturb_base import BaseKind
from medrobust.perturb_medical import MedicalKind
from medrobust.pipeline import (RunConfig, cmd_calibrate, cmd_perturb, cmd_report, cmd_score,
                                read_ledger, synthetic_predictions)
from medrobust.seeding import application_seed
from medrobust.synthetic import probe_set, write_demo_dataset

import oracles
from factories import severity_records, table_row_records

RESULTS = {}
ALL_KINDS = [k.value for k in BaseKind] + [k.value for k in MedicalKind]


def _record(n, title, ok, elapsed, budget, detail=""):
    ok = bool(ok) and elapsed < budget
    RESULTS[n] = f"criterion {n} {'PASS' if ok else 'FAIL'}: {title} ({elapsed:.2f}s / {budget:.0f}s){detail}"
    return ok


def _tree(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


def check_ssim():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst_identity = 0.0
    for i in range(20):
        shape = (int(rng.integers(8, 40)), int(rng.integers(8, 40)), int(rng.choice([1, 3])))
        x = ImageBuffer(rng.random(shape))
        worst_identity = max(worst_identity, abs(ssim(x, x) - 1.0))
    worst_oracle = 0.0
    for k, p in enumerate(probe_set()):
        pid = ALL_KINDS[k]
        q = registry.apply(pid, p, 0.4, k)
        worst_oracle = max(worst_oracle, abs(ssim(p, q) - oracles.ssim_bruteforce(p.data, q.data)))
    ok = worst_identity <= 1e-9 and worst_oracle <= 1e-6
    return _record(1, "SSIM identity and brute-force agreement", ok, time.perf_counter() - t0, 10,
                   f"; max |ssim(x,x)-1| = {worst_identity:.1e}, max oracle gap = {worst_oracle:.1e}")


def check_calibration():
    t0 = time.perf_counter()
    probes = probe_set()
    entries = {}
    for i, img in enumerate(probes):
        for pid in ALL_KINDS:
            for lvl in SEVERITY_LEVELS:
                seed = application_seed(0, "probes", f"probe{i}", pid, lvl)
                entries[(i, pid, lvl)] = calibrate(img, pid, lvl, seed)
    outside = [k for k, e in entries.items() if e.converged and not SEVERITY_LEVELS[k[2]].contains(e.achieved_ssim)]
    base_low = [e for (i, pid, lvl), e in entries.items() if pid in BaseKind._value2member_map_ and lvl <= 3]
    rate = sum(e.converged for e in base_low) / len(base_low)
    disorder = []
    for i in range(len(probes)):
        for pid in ALL_KINDS:
            ok = [entries[(i, pid, l)] for l in SEVERITY_LEVELS if entries[(i, pid, l)].converged]
            if any(a.achieved_ssim <= b.achieved_ssim for a, b in zip(ok, ok[1:])):
                disorder.append((i, pid))
    ok = not outside and rate >= 0.90 and not disorder
    return _record(2, "calibration band containment and convergence", ok, time.perf_counter() - t0, 180,
                   f"; base L1-3 converged {100 * rate:.1f}%, out-of-band {len(outside)}, "
                   f"level-order violations {len(disorder)}")


def check_identity_determinism(tmp):
    t0 = time.perf_counter()
    probes = probe_set()
    bad = []
    for pid in ALL_KINDS:
        for img in (probes[7], probes[9]):
            out = registry.apply(pid, img, 0.0, 5)
            if not np.array_equal(out.data, img.data):
                bad.append((pid, "t=0"))
            for t in (0.3, 1.0):
                a, b = registry.apply(pid, img, t, 77), registry.apply(pid, img, t, 77)
                if not np.array_equal(a.data, b.data):
                    bad.append((pid, t))
    manifests = write_demo_dataset(os.path.join(tmp, "data"))
    trees = []
    for run in ("run_a", "run_b"):
        for mpath in manifests:
            cmd_perturb(load_manifest(mpath), RunConfig(cache_path=os.path.join(tmp, run, "cache.json"),
                                                        output_root=os.path.join(tmp, run, "out")))
        trees.append(_tree(os.path.join(tmp, run, "out")))
    same = trees[0] == trees[1] and len(trees[0]) > 0
    ok = len(ALL_KINDS) == 29 and not bad and same
    return _record(3, "identity at t=0, seeded determinism, byte-identical perturb runs", ok,
                   time.perf_counter() - t0, 120,
                   f"; {len(ALL_KINDS)} kinds, violations {len(bad)}, {len(trees[0])} files compared")


def check_metrics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    exact = True
    identity_gap = 0.0
    for _ in range(100):
        p, g = rng.random((8, 8)) < rng.random(), rng.random((8, 8)) < rng.random()
        inter, union, np_, ng = oracles.mask_counts(p, g)
        iou, dice = mask_iou(p, g), mask_dice(p, g)
        exact &= iou == (1.0 if union == 0 else inter / union)
        exact &= dice == (1.0 if np_ + ng == 0 else 2 * inter / (np_ + ng))
        identity_gap = max(identity_gap, abs(dice - 2 * iou / (1 + iou)))
    toy = [
        abs(bleu(["the cat"], ["the cat sat"], max_n=2) - np.exp(1 - 3 / 2)),
        abs(bleu(["the cat sat on the mat"], ["the cat is on the mat"], max_n=3) - 0.5),
        abs(rouge_l(["a b c d"], ["a c d e"]) - 0.75),
        abs(cider(["a small lesion in the left lobe", "normal chest film"],
                  [["a lesion in the left lobe", "small left lobe lesion"], ["normal chest radiograph"]])
            - 0.3795421130341273),
        abs(cider(["alpha beta gamma delta", "epsilon zeta eta theta"],
                  ["alpha beta gamma delta", "epsilon zeta eta theta"]) - 1.0),
    ]
    ok = exact and identity_gap <= 1e-12 and max(toy) <= 1e-9
    return _record(4, "metric oracles", ok, time.perf_counter() - t0, 10,
                   f"; mask counts exact={exact}, dice/iou gap {identity_gap:.1e}, toy gap {max(toy):.1e}")


def check_aggregation():
    t0 = time.perf_counter()
    report = build_report(table_row_records())
    avg = report.table[0]["avg_delta_b"]
    header, row = table_rows(report)
    printed = row[header.index("avg_delta_b")]
    curve = severity_curve(severity_records({1: 0.028, 2: 0.028, 3: 0.046, 4: 0.065, 5: 0.065}))
    c = curve[("segmenter", "low_rank")]
    ok = (abs(avg - 0.021) <= 0.0005 and printed == "0.021"
          and abs(c[1] - 0.028) <= 1e-12 and abs(c[5] - 0.065) <= 1e-12)
    return _record(5, "aggregation reproduces the reference row mean and severity endpoints", ok,
                   time.perf_counter() - t0, 1,
                   f"; avg_delta_b {avg:.4f} -> {printed}, curve {c[1]:.3f} -> {c[5]:.3f}")


def check_end_to_end(tmp):
    t0 = time.perf_counter()
    manifests = [load_manifest(p) for p in write_demo_dataset(os.path.join(tmp, "data"))]
    cache = os.path.join(tmp, "cache.json")
    out = os.path.join(tmp, "out")
    records = []
    ledger_ok = True
    for m in manifests:
        cfg = RunConfig(cache_path=cache, output_root=out)
        cmd_calibrate(m, cfg)
        cmd_perturb(m, cfg)
        ledger = os.path.join(out, m.dataset_id, "ledger.csv")
        rows = read_ledger(ledger)
        expected = len(m.samples) * len(registry.registered_for(m.modality)) * 5
        ledger_ok &= len(rows) == expected and all(os.path.isfile(os.path.join(out, r["output_path"])) for r in rows)
        gt = os.path.join(out, m.dataset_id, "ground_truth.jsonl")
        for task in ("segmentation", "vqa", "grounding", "captioning"):
            pred = os.path.join(tmp, f"{m.dataset_id}_{task}.jsonl")
            synthetic_predictions(gt, pred, task, seed=1)
            records += cmd_score(pred, gt, task, model="synthetic", ledger_path=ledger)
    report = cmd_report(records, os.path.join(tmp, "report"))
    grid_full = bool(report.grid) and all(
        v is not None for cell in report.grid.values() for row in cell.values() for v in row.values())
    rows = table_rows(report)
    table_full = len(rows) == 1 + 4 and all(cell != "" for r in rows for cell in r)
    n_samples = sum(len(m.samples) for m in manifests)
    ok = n_samples == 6 and len(manifests) == 2 and ledger_ok and grid_full and table_full
    return _record(6, "end-to-end calibrate -> perturb -> score -> report", ok, time.perf_counter() - t0, 300,
                   f"; {n_samples} images, ledger complete={ledger_ok}, grid complete={grid_full}, "
                   f"table complete={table_full}")


def test_criterion_1_ssim():
    assert check_ssim(), RESULTS[1]


def test_criterion_2_calibration():
    assert check_calibration(), RESULTS[2]


def test_criterion_3_identity_and_determinism(tmp_path):
    assert check_identity_determinism(str(tmp_path)), RESULTS[3]


def test_criterion_4_metric_oracles():
    assert check_metrics(), RESULTS[4]


def test_criterion_5_aggregation():
    assert check_aggregation(), RESULTS[5]


def test_criterion_6_end_to_end(tmp_path):
    assert check_end_to_end(str(tmp_path)), RESULTS[6]


if __name__ == "__main__":
    import tempfile

    with tempfile.TemporaryDirectory() as d:
        check_ssim()
        check_calibration()
        check_identity_determinism(os.path.join(d, "c3"))
        check_metrics()
        check_aggregation()
        check_end_to_end(os.path.join(d, "c6"))
    for n in sorted(RESULTS):
        print(RESULTS[n])
    raise SystemExit(0 if all(" PASS" in RESULTS[n] for n in RESULTS) else 1)
