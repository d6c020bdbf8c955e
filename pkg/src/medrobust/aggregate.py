"""Robustness drops: clean minus perturbed metric, averaged by category and severity.

Drops keep their sign, so a perturbation that helps lowers the mean rather
than being clamped away.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import defaultdict
from dataclasses import asdict, dataclass, field, fields
from decimal import ROUND_HALF_EVEN, Decimal

log = logging.getLogger(__name__)

CLEAN = "clean"
BASE = "base"
MED_SPECIFIC = "med_specific"
CATEGORIES = (BASE, MED_SPECIFIC)
LEVELS = (1, 2, 3, 4, 5)

PRIMARY_METRIC = {
    "segmentation": "iou",
    "vqa": "accuracy",
    "grounding": "acc_iou50",
    "captioning": "bleu",
}


@dataclass(frozen=True)
class MetricRecord:
    model: str
    strategy: str
    dataset: str
    task: str
    perturbation_id: str
    category: str
    level: int
    value: float
    metric_name: str
    converged: bool = True

    def __post_init__(self):
        clean = (self.perturbation_id == CLEAN, self.level == 0, self.category == CLEAN)
        if any(clean) and not all(clean):
            raise ValueError(f"clean record must have level 0 and category 'clean': {self}")
        if not any(clean) and (self.category not in CATEGORIES or self.level not in LEVELS):
            raise ValueError(f"bad category/level in {self}")

    @property
    def group(self) -> tuple:
        return (self.model, self.strategy, self.dataset, self.task, self.metric_name)

    @property
    def is_clean(self) -> bool:
        return self.perturbation_id == CLEAN


RECORD_FIELDS = [f.name for f in fields(MetricRecord)]


def drop(clean: MetricRecord, perturbed: MetricRecord) -> float:
    """Absolute drop ``clean.value - perturbed.value`` (negative when the perturbation helps)."""
    if clean.group != perturbed.group:
        raise ValueError(f"mismatched grouping keys: {clean.group} vs {perturbed.group}")
    if clean.level != 0:
        raise ValueError("first argument must be the clean record (level 0)")
    return clean.value - perturbed.value


def _baselines(records) -> dict:
    base = {}
    for r in records:
        if r.is_clean:
            if r.group in base:
                raise ValueError(f"duplicate clean baseline for {r.group}")
            base[r.group] = r
    return base


def paired_drops(records, include_unconverged: bool = True) -> list[tuple[MetricRecord, float]]:
    """Every perturbed record paired with its drop from the matching clean baseline."""
    records = list(records)
    base = _baselines(records)
    out = []
    for r in records:
        if r.is_clean or (not include_unconverged and not r.converged):
            continue
        if r.group not in base:
            raise ValueError(f"missing clean baseline for {r.group}")
        out.append((r, drop(base[r.group], r)))
    return out


def _mean(xs) -> float:
    xs = list(xs)
    return math.fsum(xs) / len(xs)  # exactly rounded sum: independent of record order


def mean_drop(records, category: str | None = None, level: int | None = None,
              include_unconverged: bool = True) -> float:
    """Mean drop over the perturbed records of ``category`` at ``level``.

    ``None`` marginalizes: ``level=None`` gives the category mean over all
    severities, ``category=None`` the severity mean over both categories.
    """
    ds = [d for r, d in paired_drops(records, include_unconverged)
          if (category is None or r.category == category) and (level is None or r.level == level)]
    if not ds:
        raise ValueError(f"empty perturbation set for category={category!r} level={level!r}")
    return _mean(ds)


@dataclass(frozen=True)
class RankedItem:
    id: str
    mean_drop: float
    category: str | None = None


def _rank(items: dict) -> list:
    return sorted(items.items(), key=lambda kv: (-kv[1][0], kv[0]))


def rank_perturbations(records, k: int = 15, include_unconverged: bool = True) -> list[RankedItem]:
    """Top ``k`` perturbations by mean drop across severities and datasets."""
    acc = defaultdict(list)
    cat = {}
    for r, d in paired_drops(records, include_unconverged):
        acc[r.perturbation_id].append(d)
        cat[r.perturbation_id] = r.category
    means = {p: (_mean(v), cat[p]) for p, v in acc.items()}
    if k > len(means):
        log.warning("requested top %d but only %d perturbations present", k, len(means))
    return [RankedItem(p, m, c) for p, (m, c) in _rank(means)[:k]]


def med_specific_share(ranked) -> str:
    n = sum(1 for r in ranked if r.category == MED_SPECIFIC)
    return f"{n}/{len(ranked)} med-specific"


def rank_strategies(records, include_unconverged: bool = True) -> list[RankedItem]:
    """(model, strategy) pairs by mean drop over all perturbed records, worst first."""
    acc = defaultdict(list)
    for r, d in paired_drops(records, include_unconverged):
        acc[f"{r.model}/{r.strategy}"].append(d)
    return [RankedItem(s, m) for s, (m, _) in _rank({s: (_mean(v), None) for s, v in acc.items()})]


def severity_curve(records, grouping=("model", "strategy"), include_unconverged: bool = True) -> dict:
    """Mean drop per level for each grouping key; absent levels map to ``None``."""
    acc = defaultdict(lambda: defaultdict(list))
    for r, d in paired_drops(records, include_unconverged):
        key = tuple(getattr(r, g) for g in grouping)
        acc[key][r.level].append(d)
    return {key: {s: (_mean(by[s]) if by.get(s) else None) for s in LEVELS}
            for key, by in sorted(acc.items())}


@dataclass
class DatasetSummary:
    model: str
    strategy: str
    dataset: str
    task: str
    metric_name: str
    clean: float
    delta_b: float | None
    delta_m: float | None


@dataclass
class RobustnessReport:
    metric_names: list
    grid: dict = field(default_factory=dict)
    per_perturbation: dict = field(default_factory=dict)
    per_dataset: list = field(default_factory=list)
    table: list = field(default_factory=list)
    datasets: list = field(default_factory=list)
    ranked_perturbations: list = field(default_factory=list)
    top_k_summary: str = ""
    ranked_strategies: list = field(default_factory=list)
    severity_curves: dict = field(default_factory=dict)
    notices: list = field(default_factory=list)


def _select(records, metric_name):
    if metric_name is not None:
        return [r for r in records if r.metric_name == metric_name]
    return [r for r in records if PRIMARY_METRIC.get(r.task) == r.metric_name]


def build_report(records, metric_name: str | None = None, k: int = 15,
                 include_unconverged: bool = True) -> RobustnessReport:
    """Drop grid, dataset summaries, summary-table rows, rankings and severity curves.

    Table rows are one per (model, strategy, task, metric); ``avg_delta_b`` is the mean
    of the per-dataset base drops.

    Without ``metric_name`` each task's primary metric is used (IoU, accuracy,
    Acc@IoU0.5, BLEU).
    """
    recs = _select(list(records), metric_name)
    report = RobustnessReport(metric_names=sorted({r.metric_name for r in recs}))
    pairs = paired_drops(recs, include_unconverged)
    if not pairs:
        report.notices.append("no perturbed records: drop sections are empty")

    by_group = defaultdict(list)
    for r, d in pairs:
        by_group[r.group].append((r, d))

    for group, items in sorted(by_group.items()):
        cell = {}
        for c in CATEGORIES:
            row = {}
            for s in LEVELS:
                ds = [d for r, d in items if r.category == c and r.level == s]
                row[s] = _mean(ds) if ds else None
            ds = [d for r, d in items if r.category == c]
            row["all"] = _mean(ds) if ds else None
            cell[c] = row
        report.grid["|".join(group)] = cell

    acc = defaultdict(list)
    for r, d in pairs:
        acc[r.perturbation_id].append((d, r.category))
    report.per_perturbation = {p: {"category": v[0][1], "mean_drop": _mean([d for d, _ in v])}
                               for p, v in sorted(acc.items())}

    base = _baselines(recs)
    for group, clean in sorted(base.items()):
        model, strategy, dataset, task, metric = group
        items = by_group.get(group, [])
        b = [d for r, d in items if r.category == BASE]
        m = [d for r, d in items if r.category == MED_SPECIFIC]
        report.per_dataset.append(DatasetSummary(model, strategy, dataset, task, metric, clean.value,
                                                 _mean(b) if b else None, _mean(m) if m else None))

    report.datasets = sorted({s.dataset for s in report.per_dataset})
    rows = defaultdict(dict)
    for s in report.per_dataset:
        rows[(s.model, s.strategy, s.task, s.metric_name)][s.dataset] = s
    for (model, strategy, task, metric), by_ds in sorted(rows.items()):
        bs = [s.delta_b for s in by_ds.values() if s.delta_b is not None]
        report.table.append({
            "model": model,
            "strategy": strategy,
            "task": task,
            "metric_name": metric,
            "avg_delta_b": _mean(bs) if bs else None,
            "datasets": {d: {"clean": s.clean, "delta_b": s.delta_b, "delta_m": s.delta_m}
                         for d, s in sorted(by_ds.items())},
        })

    if pairs:
        report.ranked_perturbations = rank_perturbations(recs, k, include_unconverged)
        report.top_k_summary = med_specific_share(report.ranked_perturbations)
        report.ranked_strategies = rank_strategies(recs, include_unconverged)
        report.severity_curves = {"/".join(key): curve for key, curve in
                                  severity_curve(recs, ("model", "strategy"), include_unconverged).items()}
        for key, curve in report.severity_curves.items():
            gaps = [s for s, v in curve.items() if v is None]
            if gaps:
                report.notices.append(f"{key}: severity levels {gaps} absent")
    return report


# -- emitted files ----------------------------------------------------------

def round3(x) -> str:
    if x is None:
        return ""
    return str(Decimal(repr(float(x))).quantize(Decimal("0.001"), rounding=ROUND_HALF_EVEN))


def table_rows(report: RobustnessReport) -> list[list[str]]:
    header = ["model", "strategy", "task", "metric_name", "avg_delta_b"]
    for d in report.datasets:
        header += [f"{d}/clean", f"{d}/delta_b", f"{d}/delta_m"]
    rows = [header]
    for row in report.table:
        out = [row["model"], row["strategy"], row["task"], row["metric_name"], round3(row["avg_delta_b"])]
        for d in report.datasets:
            cell = row["datasets"].get(d)
            if cell is None:
                out += ["", "", ""]
            else:
                out += [round3(cell["clean"]), round3(cell["delta_b"]), round3(cell["delta_m"])]
        rows.append(out)
    return rows


def write_table(report: RobustnessReport, path, delimiter: str = ",") -> None:
    with open(path, "w", newline="") as fh:
        csv.writer(fh, delimiter=delimiter, lineterminator="\n").writerows(table_rows(report))


def report_document(report: RobustnessReport) -> dict:
    doc = asdict(report)
    doc["ranked_perturbations"] = [asdict(r) for r in report.ranked_perturbations]
    doc["ranked_strategies"] = [{"id": r.id, "mean_drop": r.mean_drop} for r in report.ranked_strategies]
    doc["severity_curves"] = {k: {str(s): v for s, v in c.items()} for k, c in report.severity_curves.items()}
    doc["grid"] = {g: {c: {str(s): v for s, v in row.items()} for c, row in cell.items()}
                   for g, cell in report.grid.items()}
    return doc


def write_report_json(report: RobustnessReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report_document(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([r.model, r.strategy, r.dataset, r.task, r.perturbation_id, r.category,
                        r.level, repr(float(r.value)), r.metric_name, int(r.converged)])


def read_records(path) -> list[MetricRecord]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(MetricRecord(
                model=row["model"], strategy=row["strategy"], dataset=row["dataset"],
                task=row["task"], perturbation_id=row["perturbation_id"], category=row["category"],
                level=int(row["level"]), value=float(row["value"]), metric_name=row["metric_name"],
                converged=row.get("converged", "1") not in ("0", "false", "False"),
            ))
    return out
