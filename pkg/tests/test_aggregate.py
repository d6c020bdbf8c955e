import logging
import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from medrobust.aggregate import (MetricRecord, build_report, drop, mean_drop, med_specific_share,
                                 rank_perturbations, rank_strategies, read_records, report_document,
                                 round3, severity_curve, table_rows, write_records)

from factories import REFERENCE_ROW, ranking_records, record, severity_records, table_row_records


def test_drop_examples():
    assert drop(record("clean", 0, 0.953), record("gaussian_noise", 1, 0.933)) == pytest.approx(0.020, abs=1e-12)
    assert drop(record("clean", 0, 0.5), record("gaussian_noise", 1, 0.5)) == 0.0
    assert drop(record("clean", 0, 0.90), record("gaussian_noise", 1, 0.95)) == pytest.approx(-0.05)


def test_drop_errors():
    with pytest.raises(ValueError, match="mismatched"):
        drop(record("clean", 0, 0.9), record("gaussian_noise", 1, 0.8, dataset="other"))
    with pytest.raises(ValueError, match="clean"):
        drop(record("gaussian_noise", 2, 0.9), record("gaussian_noise", 1, 0.8))


def test_record_invariants():
    with pytest.raises(ValueError):
        record("clean", 1, 0.9)
    with pytest.raises(ValueError):
        record("gaussian_noise", 0, 0.9)
    with pytest.raises(ValueError):
        record("gaussian_noise", 6, 0.9)
    with pytest.raises(ValueError):
        record("gaussian_noise", 1, 0.9, category="clean")


def test_mean_drop_examples():
    recs = [record("clean", 0, 0.9), record("gaussian_noise", 3, 0.88), record("speckle", 3, 0.86)]
    assert mean_drop(recs, "base", 3) == pytest.approx(0.03)
    assert mean_drop(recs[:2], "base", 3) == pytest.approx(0.02)
    with pytest.raises(ValueError, match="empty"):
        mean_drop(recs, "med_specific", 3)
    with pytest.raises(ValueError, match="missing clean baseline"):
        mean_drop(recs[1:], "base", 3)
    with pytest.raises(ValueError, match="duplicate"):
        mean_drop(recs + [record("clean", 0, 0.8)])


def test_mean_drop_marginals():
    recs = severity_records({1: 0.01, 2: 0.03, 3: 0.05})
    assert mean_drop(recs, "base") == pytest.approx(0.03)
    assert mean_drop(recs, None, 2) == pytest.approx(0.03)
    assert mean_drop(recs) == pytest.approx(0.03)


def test_negative_drops_preserved():
    recs = [record("clean", 0, 0.5), record("contrast", 1, 0.6), record("speckle", 1, 0.5)]
    assert mean_drop(recs, "base", 1) == pytest.approx(-0.05)


def test_table_row_replication():
    report = build_report(table_row_records())
    by_ds = {s.dataset: s for s in report.per_dataset}
    for ds, clean, db, dm in REFERENCE_ROW:
        assert by_ds[ds].clean == clean
        assert by_ds[ds].delta_b == pytest.approx(db, abs=1e-12)
        assert by_ds[ds].delta_m == pytest.approx(dm, abs=1e-12)
    avg = report.table[0]["avg_delta_b"]
    assert avg == pytest.approx(0.0212, abs=1e-12)
    assert abs(avg - 0.021) <= 0.0005
    header, row = table_rows(report)
    assert header[:5] == ["model", "strategy", "task", "metric_name", "avg_delta_b"]
    assert row[4] == "0.021"
    i = header.index("ds_a/clean")
    assert row[i:i + 3] == ["0.953", "0.020", "0.034"]


def test_round3_half_even():
    assert [round3(x) for x in (0.0125, 0.0135, 0.0212, -0.0005, None)] == ["0.012", "0.014", "0.021", "-0.000", ""]


def test_severity_curve_endpoints():
    curve = severity_curve(severity_records({1: 0.028, 2: 0.028, 3: 0.045, 4: 0.065, 5: 0.065}))
    c = curve[("segmenter", "low_rank")]
    assert c[1] == pytest.approx(0.028, abs=1e-12) and c[5] == pytest.approx(0.065, abs=1e-12)
    assert all(c[s] <= c[s + 1] for s in range(1, 5))


def test_severity_curve_flat_and_gaps():
    flat = severity_curve(severity_records({s: 0.04 for s in range(1, 6)}))[("segmenter", "low_rank")]
    assert len(set(round(v, 12) for v in flat.values())) == 1
    gap = severity_curve(severity_records({s: 0.04 for s in range(1, 5)}))[("segmenter", "low_rank")]
    assert gap[5] is None and sum(v is not None for v in gap.values()) == 4
    report = build_report(severity_records({s: 0.04 for s in range(1, 5)}))
    assert any("[5]" in n for n in report.notices)


def test_ranking_and_share():
    ranked = rank_perturbations(ranking_records(), k=15)
    assert len(ranked) == 15
    assert [r.mean_drop for r in ranked] == sorted((r.mean_drop for r in ranked), reverse=True)
    assert med_specific_share(ranked) == "9/15 med-specific"
    assert build_report(ranking_records()).top_k_summary == "9/15 med-specific"


def test_ranking_ties_and_k(caplog):
    recs = [record("clean", 0, 0.9), record("zeta", 1, 0.85), record("alpha", 1, 0.85), record("mid", 1, 0.89)]
    assert [r.id for r in rank_perturbations(recs, k=2)] == ["alpha", "zeta"]
    assert [r.id for r in rank_perturbations([recs[0], record("a", 1, 0.85), record("b", 1, 0.89)], k=1)] == ["a"]
    with caplog.at_level(logging.WARNING):
        assert len(rank_perturbations(recs, k=10)) == 3
    assert "only 3" in caplog.text


def test_strategy_ranking():
    recs = table_row_records() + table_row_records(strategy="low_rank", rows=[
        (ds, c, 2 * db, 2 * dm) for ds, c, db, dm in REFERENCE_ROW])
    assert [r.id for r in rank_strategies(recs)] == ["segmenter/low_rank", "segmenter/full"]


def test_unconverged_flag():
    recs = [record("clean", 0, 0.9), record("speckle", 5, 0.8), record("rotation", 5, 0.4, converged=False)]
    assert mean_drop(recs, "base", 5) == pytest.approx(0.3)
    assert mean_drop(recs, "base", 5, include_unconverged=False) == pytest.approx(0.1)


def test_clean_only_report():
    report = build_report([record("clean", 0, 0.9)])
    assert report.ranked_perturbations == [] and report.grid == {}
    assert report.notices
    assert report.per_dataset[0].delta_b is None


def test_report_totals():
    report = build_report(ranking_records())
    cats = [v["category"] for v in report.per_perturbation.values()]
    assert cats.count("base") + cats.count("med_specific") == 20


def _random_records(rng):
    recs = []
    for ds in ("a", "b"):
        recs.append(record("clean", 0, rng.random(), dataset=ds))
        for pid in ("gaussian_noise", "speckle", "med_x", "med_y"):
            for lvl in range(1, 6):
                recs.append(record(pid, lvl, rng.random(), dataset=ds))
    return recs


def test_permutation_invariance():
    rng = random.Random(5)
    recs = _random_records(rng)
    doc = report_document(build_report(recs))
    for _ in range(5):
        rng.shuffle(recs)
        assert report_document(build_report(recs)) == doc


def test_grid_entries_are_member_means():
    recs = _random_records(random.Random(9))
    report = build_report(recs)
    cell = report.grid["segmenter|full|a|segmentation|iou"]
    clean = next(r.value for r in recs if r.is_clean and r.dataset == "a")
    members = [clean - r.value for r in recs if r.dataset == "a" and r.category == "base" and r.level == 2]
    assert abs(cell["base"][2] - sum(members) / len(members)) <= 1e-12


@settings(max_examples=60, deadline=None)
@given(st.floats(0, 1), st.lists(st.floats(0, 1), min_size=1, max_size=12))
def test_linearity(clean, values):
    recs = [record("clean", 0, clean)] + [record(f"p{i}", 2, v) for i, v in enumerate(values)]
    assert abs(mean_drop(recs, "base", 2) - (clean - sum(values) / len(values))) <= 1e-12


def test_report_recomputes_from_records_csv(tmp_path):
    recs = _random_records(random.Random(3)) + [
        record("clean", 0, 0.7, task="vqa", metric="accuracy"),
        record("speckle", 1, 0.6, task="vqa", metric="accuracy", converged=False)]
    path = tmp_path / "records.csv"
    write_records(recs, path)
    back = read_records(path)
    assert back == recs
    assert report_document(build_report(back)) == report_document(build_report(recs))


def test_metric_selection():
    recs = [record("clean", 0, 0.9), record("speckle", 1, 0.8),
            record("clean", 0, 0.95, metric="dice"), record("speckle", 1, 0.7, metric="dice")]
    assert build_report(recs).metric_names == ["iou"]
    assert build_report(recs, metric_name="dice").per_perturbation["speckle"]["mean_drop"] == pytest.approx(0.25)


def test_metric_record_field_names():
    assert [f for f in MetricRecord.__dataclass_fields__][:9] == [
        "model", "strategy", "dataset", "task", "perturbation_id", "category", "level", "value", "metric_name"]
