"""End-to-end pipeline: calibrate, write perturbed trees, score prediction files, report.

Output layout of :func:`cmd_perturb`::

    <out>/<dataset>/<perturbation>/<level>/<sample_id>.png
    <out>/<dataset>/gt/<perturbation>/<level>/<sample_id>.png   (co-transformed masks)
    <out>/<dataset>/ground_truth.jsonl
    <out>/<dataset>/ledger.csv
"""

from __future__ import annotations

import csv
import json
import logging
import os
from collections import defaultdict
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import aggregate, metrics, registry
from .calibrate import DEFAULT_MAX_ITERATIONS, CalibrationCache, calibrate, calibrate_dataset
from .imagekit import ImageBuffer, load_image, save_image
from .manifest import DatasetManifest
from .perturb_base import GEOMETRIC_KINDS, BaseKind, geometric_matrix, warp
from .seeding import application_seed, stable_hash64

log = logging.getLogger(__name__)

LEDGER_COLUMNS = ["dataset_id", "sample_id", "perturbation_id", "category", "level", "t",
                  "achieved_ssim", "converged", "seed", "output_path"]


@dataclass
class RunConfig:
    master_seed: int = 0
    levels: tuple = (1, 2, 3, 4, 5)
    perturbations: tuple | None = None
    workers: int = 1
    cache_path: str = "calibration_cache.json"
    output_root: str = "out"
    include_unconverged: bool = True
    dataset_level: bool = False
    co_transform: bool = True
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    max_samples: int | None = None


def subsample(manifest: DatasetManifest, n: int | None, master_seed: int = 0) -> DatasetManifest:
    """Seeded uniform subset of ``n`` samples, kept in manifest order.

    Samples are ranked by a hash of their ids, so the choice does not depend on
    manifest order and growing the manifest only swaps in newcomers that outrank
    existing picks.
    """
    if n is None or n >= len(manifest.samples):
        return manifest
    if n < 1:
        raise ValueError("max_samples must be >= 1")
    ranked = sorted(manifest.samples,
                    key=lambda s: (stable_hash64(master_seed, manifest.dataset_id, s.sample_id), s.sample_id))
    keep = {s.sample_id for s in ranked[:n]}
    return replace(manifest, samples=tuple(s for s in manifest.samples if s.sample_id in keep))


def applicable(manifest: DatasetManifest, config: RunConfig) -> list[tuple[str, str]]:
    pairs = registry.registered_for(manifest.modality)
    if config.perturbations is not None:
        wanted = set(config.perturbations)
        unknown = wanted - set(registry.all_ids())
        if unknown:
            raise ValueError(f"unknown perturbations: {sorted(unknown)}")
        pairs = [(p, c) for p, c in pairs if p in wanted]
    return pairs


def check_perturbation_modality(manifest: DatasetManifest, perturbation_id: str) -> None:
    spec = registry.get(perturbation_id)
    if not spec.applies_to(manifest.modality):
        raise ValueError(f"{perturbation_id} does not apply to modality {manifest.modality.value}")


# -- calibrate --------------------------------------------------------------

@dataclass
class CalibrationSummary:
    entries: list = field(default_factory=list)
    computed: int = 0
    reused: int = 0

    @property
    def converged_fraction(self) -> float:
        return sum(e.converged for e in self.entries) / len(self.entries) if self.entries else 0.0

    def per_level(self) -> dict:
        hist = defaultdict(lambda: [0, 0])
        for e in self.entries:
            hist[e.level][0] += e.converged
            hist[e.level][1] += 1
        return dict(sorted(hist.items()))

    def __str__(self):
        lines = [f"{self.computed} computed, {self.reused} reused, {len(self.entries)} entries",
                 f"converged: {100.0 * self.converged_fraction:.1f}%"]
        for lvl, (ok, n) in self.per_level().items():
            lines.append(f"  level {lvl}: {ok}/{n} converged")
        return "\n".join(lines)


def _entry_for(cache, image_key, pid, level, seed):
    return cache.get(image_key, pid, level, seed) or cache.get(image_key, pid, level, seed, "dataset")


def cmd_calibrate(manifest: DatasetManifest, config: RunConfig) -> tuple[CalibrationCache, CalibrationSummary]:
    manifest = subsample(manifest, config.max_samples, config.master_seed)
    pids = [p for p, _ in applicable(manifest, config)]
    cache = calibrate_dataset(manifest, config.levels, config.cache_path,
                              master_seed=config.master_seed, max_iterations=config.max_iterations,
                              perturbations=pids, workers=config.workers,
                              dataset_level=config.dataset_level)
    summary = CalibrationSummary(computed=cache.computed, reused=cache.reused)
    for s in manifest.samples:
        try:
            key = load_image(s.image_path).content_key
        except (OSError, ValueError):
            continue
        for pid in pids:
            for lvl in config.levels:
                seed = application_seed(config.master_seed, manifest.dataset_id, s.sample_id, pid, lvl)
                e = _entry_for(cache, key, pid, lvl, seed)
                if e is not None:
                    summary.entries.append(e)
    return cache, summary


# -- perturb ----------------------------------------------------------------

def transform_box(box, forward: np.ndarray, height: int, width: int):
    """Map box corners through ``forward`` and re-box; ``None`` if it leaves the frame.

    Box coordinates are continuous (pixel ``i`` spans [i, i+1)); ``forward``
    acts on pixel centres, hence the half-pixel shifts.
    """
    x0, y0, x1, y1 = box
    corners = np.array([[y - 0.5, x - 0.5, 1.0] for y in (y0, y1) for x in (x0, x1)])
    mapped = corners @ forward.T
    ys, xs = mapped[:, 0] + 0.5, mapped[:, 1] + 0.5
    nx0, nx1 = float(np.clip(xs.min(), 0, width)), float(np.clip(xs.max(), 0, width))
    ny0, ny1 = float(np.clip(ys.min(), 0, height)), float(np.clip(ys.max(), 0, height))
    if not (nx0 < nx1 and ny0 < ny1):
        return None
    return [nx0, ny0, nx1, ny1]


def load_mask(path) -> np.ndarray:
    return load_image(path).data[:, :, 0] > 0.5


def transform_mask(mask: np.ndarray, kind, t: float, seed: int) -> np.ndarray:
    """Nearest-neighbour resampling of a mask under the image's geometric transform."""
    if t == 0.0:
        return mask.copy()
    m = geometric_matrix(kind, t, seed, mask.shape[0], mask.shape[1])
    return warp(mask.astype(np.float64), m, order=0) > 0.5


def _gt_records(sample, rel_mask=None, box=None, pid="clean", level=0):
    """Ground-truth JSONL records for every task the sample supports."""
    base = {"sample_id": sample.sample_id, "perturbation_id": pid, "level": level}
    recs = []
    mask = rel_mask if rel_mask is not None else sample.mask_path
    if mask is not None:
        recs.append({**base, "task": "segmentation", "mask": mask})
    b = box if box is not None else (list(sample.box) if sample.box is not None else None)
    if b is not None:
        recs.append({**base, "task": "grounding", "box": b})
    if pid == "clean":
        if sample.answer is not None:
            r = {**base, "task": "vqa", "answer": sample.answer}
            if sample.answer_letter is not None:
                r["answer_letter"] = sample.answer_letter
            recs.append(r)
        refs = sample.caption_references()
        if refs:
            recs.append({**base, "task": "captioning", "references": refs})
    return recs


def _perturb_sample(job):
    """Worker: every (perturbation, level) output for one sample."""
    (dataset_id, sample, pairs, levels, entries, out_root, co_transform, master_seed,
     max_iterations) = job
    img = load_image(sample.image_path)
    mask = load_mask(sample.mask_path) if (co_transform and sample.mask_path) else None
    rows, gts, new_entries = [], [], []
    for pid, category in pairs:
        for lvl in levels:
            seed = application_seed(master_seed, dataset_id, sample.sample_id, pid, lvl)
            e = entries.get((pid, lvl))
            if e is None:
                e = calibrate(img, pid, lvl, seed, max_iterations)
                new_entries.append(e)
            out = registry.apply(pid, img, e.t, seed)
            rel = os.path.join(dataset_id, pid, str(lvl), f"{sample.sample_id}.png")
            dest = os.path.join(out_root, rel)
            os.makedirs(os.path.dirname(dest), exist_ok=True)
            save_image(out, dest)
            rows.append([dataset_id, sample.sample_id, pid, category, lvl, repr(e.t),
                         repr(e.achieved_ssim), int(e.converged), seed, rel.replace(os.sep, "/")])

            if co_transform and pid in GEOMETRIC_KINDS:
                kind = BaseKind(pid)
                rel_mask = None
                if mask is not None:
                    tm = transform_mask(mask, kind, e.t, seed)
                    mrel = os.path.join("gt", pid, str(lvl), f"{sample.sample_id}.png")
                    mdest = os.path.join(out_root, dataset_id, mrel)
                    os.makedirs(os.path.dirname(mdest), exist_ok=True)
                    save_image(ImageBuffer(tm.astype(np.float64)), mdest)
                    rel_mask = mrel.replace(os.sep, "/")
                box = None
                if sample.box is not None:
                    fwd = geometric_matrix(kind, e.t, seed, img.height, img.width)
                    box = transform_box(sample.box, fwd, img.height, img.width)
                if rel_mask is not None or box is not None:
                    gts.extend(_gt_records(sample, rel_mask, box, pid, lvl))
    return sample.sample_id, rows, gts, new_entries


def cmd_perturb(manifest: DatasetManifest, config: RunConfig,
                cache: CalibrationCache | None = None) -> dict:
    """Write the perturbed tree, co-transformed ground truth and the run ledger.

    Triples missing from the cache are calibrated on the fly and merged back.
    Returns ``{"ledger": path, "ground_truth": path, "rows": n}``.
    """
    manifest = subsample(manifest, config.max_samples, config.master_seed)
    pairs = applicable(manifest, config)
    if cache is None:
        cache = CalibrationCache.load(config.cache_path)
    out_root = config.output_root
    ds_dir = os.path.join(out_root, manifest.dataset_id)
    try:
        os.makedirs(ds_dir, exist_ok=True)
    except OSError as exc:
        raise OSError(f"output root not writable: {out_root}: {exc}") from exc

    jobs = []
    for s in manifest.samples:
        key = load_image(s.image_path).content_key
        entries = {}
        for pid, _ in pairs:
            for lvl in config.levels:
                seed = application_seed(config.master_seed, manifest.dataset_id, s.sample_id, pid, lvl)
                e = _entry_for(cache, key, pid, lvl, seed)
                if e is not None:
                    entries[(pid, lvl)] = e
        jobs.append((manifest.dataset_id, s, pairs, tuple(config.levels), entries, out_root,
                     config.co_transform, config.master_seed, config.max_iterations))

    if config.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = list(pool.map(_perturb_sample, jobs))
    else:
        results = [_perturb_sample(j) for j in jobs]

    rows, gts, fresh = [], [], []
    for s in manifest.samples:
        gts.extend(_gt_records(s))
    for _sid, r, g, new in results:
        rows.extend(r)
        gts.extend(g)
        fresh.extend(new)
    if fresh:
        for e in fresh:
            cache.add(e)
        cache.save(config.cache_path)

    rows.sort(key=lambda r: (r[0], r[1], r[2], r[4]))
    ledger = os.path.join(ds_dir, "ledger.csv")
    with open(ledger, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LEDGER_COLUMNS)
        w.writerows(rows)

    gts.sort(key=lambda r: (r["sample_id"], r["task"], r["perturbation_id"], r["level"]))
    gt_path = os.path.join(ds_dir, "ground_truth.jsonl")
    with open(gt_path, "w") as fh:
        for r in gts:
            fh.write(json.dumps({"dataset": manifest.dataset_id, **r}, sort_keys=True) + "\n")
    return {"ledger": ledger, "ground_truth": gt_path, "rows": len(rows)}


def read_ledger(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- score ------------------------------------------------------------------

def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValueError(f"{path}:{i}: {exc}") from None
    return out


_PAYLOAD = {"segmentation": "mask", "vqa": "answer", "grounding": "box", "captioning": "caption"}


def _to_record(d: dict, base_dir: str, ground_truth: bool) -> metrics.PredictionRecord:
    task = d.get("task")
    if task not in metrics.TASKS:
        raise ValueError(f"record {d.get('sample_id')!r}: unknown task {task!r}")
    if task == "captioning" and ground_truth:
        payload = d.get("references") or ([d["caption"]] if "caption" in d else None)
    else:
        payload = d.get(_PAYLOAD[task])
    if task == "segmentation" and payload is not None and not os.path.isabs(payload):
        payload = os.path.normpath(os.path.join(base_dir, payload))
    if task == "grounding" and payload is not None:
        payload = metrics.BoundingBox.of(payload)
    return metrics.PredictionRecord(
        sample_id=str(d["sample_id"]), task=task, payload=payload,
        perturbation_id=d.get("perturbation_id", "clean"), level=int(d.get("level", 0)),
        answer_letter=d.get("answer_letter"),
    )


def load_records(path, task: str, ground_truth: bool) -> list[metrics.PredictionRecord]:
    base = os.path.dirname(os.path.abspath(path))
    return [_to_record(d, base, ground_truth) for d in read_jsonl(path) if d.get("task") == task]


def _condition_metrics(task, preds, gts, threshold) -> dict:
    if task == "segmentation":
        p = {r.sample_id: r for r in preds}
        ious, dices = [], []
        for g in gts:
            gm = load_mask(g.payload)
            if g.sample_id in p and p[g.sample_id].payload is not None:
                pm = load_mask(p[g.sample_id].payload)
                ious.append(metrics.mask_iou(pm, gm))
                dices.append(metrics.mask_dice(pm, gm))
            else:
                ious.append(0.0)
                dices.append(0.0)
        return {"iou": float(np.mean(ious)), "dice": float(np.mean(dices))}
    if task == "vqa":
        return {"accuracy": metrics.vqa_accuracy(preds, gts)}
    if task == "grounding":
        name = "acc_iou50" if threshold == 0.5 else f"acc_iou{round(threshold * 100)}"
        return {name: metrics.grounding_accuracy(preds, gts, threshold)}
    p = {r.sample_id: r for r in preds}
    cands = [(p[g.sample_id].payload or "") if g.sample_id in p else "" for g in gts]
    refs = [g.payload for g in gts]
    return {
        "bleu": metrics.bleu(cands, refs),
        "rouge_l": metrics.rouge_l(cands, refs),
        "cider": metrics.cider(cands, refs),
        "cider_d": metrics.cider(cands, refs, scaled=True),
    }


def cmd_score(predictions_path, ground_truth_path, task: str, *, model: str = "model",
              strategy: str = "default", dataset: str | None = None, ledger_path=None,
              threshold: float = 0.5) -> list[aggregate.MetricRecord]:
    """One MetricRecord per metric for the clean condition and each (perturbation, level)."""
    if task not in metrics.TASKS:
        raise ValueError(f"unknown task {task!r}")
    preds = load_records(predictions_path, task, ground_truth=False)
    gts = load_records(ground_truth_path, task, ground_truth=True)
    if dataset is None:
        ds = {d.get("dataset") for d in read_jsonl(ground_truth_path)} - {None}
        dataset = ds.pop() if len(ds) == 1 else "dataset"

    clean_gt = {g.sample_id: g for g in gts if g.perturbation_id == "clean"}
    cond_gt = {(g.perturbation_id, g.level, g.sample_id): g for g in gts if g.perturbation_id != "clean"}
    by_cond = defaultdict(list)
    for p in preds:
        by_cond[(p.perturbation_id, p.level)].append(p)

    converged = {}
    if ledger_path is not None:
        flags = defaultdict(list)
        for row in read_ledger(ledger_path):
            flags[(row["perturbation_id"], int(row["level"]))].append(row["converged"] == "1")
        converged = {k: all(v) for k, v in flags.items()}

    out = []
    for (pid, lvl) in sorted(by_cond, key=lambda c: (c[0] != "clean", c)):
        cond_preds = by_cond[(pid, lvl)]
        unmatched = [p.sample_id for p in cond_preds if p.sample_id not in clean_gt]
        if unmatched:
            log.warning("%s/%s level %d: %d predictions have no ground truth",
                        task, pid, lvl, len(unmatched))
        missing = len(clean_gt) - (len(cond_preds) - len(unmatched))
        if missing:
            log.warning("%s/%s level %d: %d of %d samples have no prediction",
                        task, pid, lvl, missing, len(clean_gt))
        gts_here = [cond_gt.get((pid, lvl, sid), g) for sid, g in clean_gt.items()]
        matched = [p for p in cond_preds if p.sample_id in clean_gt]
        category = registry.category_of(pid)
        for name, value in _condition_metrics(task, matched, gts_here, threshold).items():
            out.append(aggregate.MetricRecord(
                model=model, strategy=strategy, dataset=dataset, task=task, perturbation_id=pid,
                category=category, level=lvl, value=float(value), metric_name=name,
                converged=converged.get((pid, lvl), True),
            ))
    return out


# -- report -----------------------------------------------------------------

def cmd_report(records, out_dir, *, include_unconverged: bool = True, metric_name=None,
               top_k: int = 15) -> aggregate.RobustnessReport:
    """Write ``table.csv`` (per-dataset clean/base/medical summary), ``report.json`` and ``records.csv``."""
    records = list(records)
    report = aggregate.build_report(records, metric_name=metric_name, k=top_k,
                                    include_unconverged=include_unconverged)
    os.makedirs(out_dir, exist_ok=True)
    aggregate.write_table(report, os.path.join(out_dir, "table.csv"))
    aggregate.write_report_json(report, os.path.join(out_dir, "report.json"))
    aggregate.write_records(records, os.path.join(out_dir, "records.csv"))
    return report


def synthetic_predictions(ground_truth_path, out_path, task: str, *, seed: int = 0,
                          quality=None) -> None:
    """Write a predictions file derived from ground truth, degraded per condition.

    ``quality(perturbation_id, level) -> probability`` controls how often a
    prediction stays correct; used by demos and smoke tests in place of a model.
    """
    rng = np.random.default_rng(seed)
    gts = [d for d in read_jsonl(ground_truth_path) if d.get("task") == task]
    clean = [d for d in gts if d.get("perturbation_id", "clean") == "clean"]
    cond = {(d["perturbation_id"], d["level"], d["sample_id"]): d for d in gts
            if d.get("perturbation_id", "clean") != "clean"}
    ledger = os.path.join(os.path.dirname(ground_truth_path), "ledger.csv")
    conditions = [("clean", 0)] + sorted({(r["perturbation_id"], int(r["level"]))
                                          for r in read_ledger(ledger)})
    quality = quality or (lambda pid, lvl: 1.0 - 0.08 * lvl)
    base_dir = os.path.dirname(os.path.abspath(ground_truth_path))
    pred_dir = os.path.dirname(os.path.abspath(out_path))
    lines = []
    for pid, lvl in conditions:
        q = quality(pid, lvl)
        for g in clean:
            g = cond.get((pid, lvl, g["sample_id"]), g)
            ok = rng.random() < q
            rec = {"sample_id": g["sample_id"], "task": task, "perturbation_id": pid, "level": lvl}
            if task == "segmentation":
                src = g["mask"] if os.path.isabs(g["mask"]) else os.path.join(base_dir, g["mask"])
                m = load_mask(src)
                if not ok:
                    m = np.roll(m, 2 + lvl, axis=1)
                name = f"pred_masks/{pid}_{lvl}_{g['sample_id']}.png"
                os.makedirs(os.path.join(pred_dir, "pred_masks"), exist_ok=True)
                save_image(ImageBuffer(m.astype(np.float64)), os.path.join(pred_dir, name))
                rec["mask"] = name
            elif task == "vqa":
                rec["answer"] = g["answer"] if ok else "maybe"
            elif task == "grounding":
                x0, y0, x1, y1 = g["box"]
                shift = 0.0 if ok else (x1 - x0) * 0.6
                rec["box"] = [x0 + shift, y0, x1 + shift, y1]
            else:
                words = g["references"][0].split()
                rec["caption"] = " ".join(words if ok else words[: max(1, len(words) - 2)])
            lines.append(json.dumps(rec, sort_keys=True))
    with open(out_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


__all__ = [
    "LEDGER_COLUMNS", "RunConfig", "CalibrationSummary", "applicable",
    "cmd_calibrate", "cmd_perturb", "cmd_report", "cmd_score", "read_ledger", "synthetic_predictions",
    "transform_box", "transform_mask",
]
