import csv
import json
import logging
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from medrobust import pipeline
from medrobust.aggregate import read_records
from medrobust.calibrate import CalibrationCache
from medrobust.imagekit import ImageBuffer, load_image, save_image
from medrobust.manifest import DatasetManifest, Modality, Sample, load_manifest
from medrobust.metrics import mask_iou
from medrobust.perturb_base import geometric_matrix
from medrobust.pipeline import RunConfig, cmd_calibrate, cmd_perturb, cmd_report, cmd_score
from medrobust.seeding import application_seed


def _disk_dataset(root, modality="Dermoscopy", n=1, size=48):
    """Bright disks on a dim textured background, with exact masks and boxes."""
    rng = np.random.default_rng(4)
    os.makedirs(os.path.join(root, "img"), exist_ok=True)
    samples = []
    for i in range(n):
        yy, xx = np.mgrid[0:size, 0:size]
        cy, cx, r = 20 + 3 * i, 26 - 2 * i, 9
        mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img = 0.15 + 0.05 * rng.random((size, size)) + 0.7 * mask
        if modality in ("Dermoscopy", "Pathology", "Endoscopy"):
            img = np.stack([img, 0.8 * img, 0.6 * img], axis=2)
        sid = f"s{i}"
        save_image(ImageBuffer(img), os.path.join(root, "img", f"{sid}.png"))
        save_image(ImageBuffer(mask.astype(float)), os.path.join(root, "img", f"{sid}_m.png"))
        ys, xs = np.nonzero(mask)
        samples.append({"sample_id": sid, "image_path": f"img/{sid}.png", "mask_path": f"img/{sid}_m.png",
                        "box": [int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1],
                        "answer": "yes", "answer_letter": "A", "caption": "a bright round lesion"})
    path = os.path.join(root, "manifest.json")
    with open(path, "w") as fh:
        json.dump({"dataset_id": "disks", "modality": modality, "samples": samples}, fh)
    return load_manifest(path)


def _tree(root):
    out = {}
    for d, _, files in os.walk(root):
        for f in files:
            p = os.path.join(d, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


@pytest.fixture(scope="module")
def disks(tmp_path_factory):
    root = tmp_path_factory.mktemp("disks")
    m = _disk_dataset(str(root))
    out = root / "out"
    cfg = RunConfig(cache_path=str(root / "cache.json"), output_root=str(out))
    cmd_perturb(m, cfg)
    return m, cfg, out


def test_sixty_five_outputs(disks):
    m, cfg, out = disks
    rows = pipeline.read_ledger(out / "disks" / "ledger.csv")
    assert len(rows) == 13 * 5 == 65
    pngs = [p for p in _tree(out / "disks") if p.endswith(".png") and not p.startswith("gt")]
    assert len(pngs) == 65
    assert {r["perturbation_id"] for r in rows} >= {"derm_light_reflection", "rotation"}


def test_ledger_format(disks):
    m, cfg, out = disks
    with open(out / "disks" / "ledger.csv", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    assert header == ["dataset_id", "sample_id", "perturbation_id", "category", "level", "t",
                      "achieved_ssim", "converged", "seed", "output_path"]
    keys = [(r[0], r[1], r[2], int(r[4])) for r in rows]
    assert keys == sorted(keys)
    for r in rows:
        assert os.path.isfile(out / r[9])
        assert int(r[8]) == application_seed(0, "disks", r[1], r[2], int(r[4]))
        assert 0.0 <= float(r[5]) <= 1.0


def test_outputs_reproduce_ledger_ssim(disks):
    from medrobust import registry
    from medrobust.imagekit import ssim
    m, cfg, out = disks
    img = load_image(m.samples[0].image_path)
    for r in pipeline.read_ledger(out / "disks" / "ledger.csv")[::7]:
        again = ssim(img, registry.apply(r["perturbation_id"], img, float(r["t"]), int(r["seed"])))
        assert again == pytest.approx(float(r["achieved_ssim"]), abs=1e-9)


def test_two_runs_byte_identical(tmp_path, disks):
    m, cfg, out = disks
    cfg2 = RunConfig(cache_path=str(tmp_path / "fresh_cache.json"), output_root=str(tmp_path / "out2"))
    cmd_perturb(m, cfg2)
    assert _tree(out) == _tree(tmp_path / "out2")


def test_parallel_run_identical(tmp_path, demo_manifests):
    m = load_manifest(demo_manifests[1])
    base = dict(perturbations=("rotation", "oct_blink", "jpeg_compression"), levels=(1, 4))
    a = RunConfig(cache_path=str(tmp_path / "a.json"), output_root=str(tmp_path / "a"), **base)
    b = RunConfig(cache_path=str(tmp_path / "b.json"), output_root=str(tmp_path / "b"), workers=3, **base)
    cmd_perturb(m, a)
    cmd_perturb(m, b)
    assert _tree(tmp_path / "a") == _tree(tmp_path / "b")


def test_rotation_cotransform(disks):
    m, cfg, out = disks
    s = m.samples[0]
    mask = pipeline.load_mask(s.mask_path)
    for r in pipeline.read_ledger(out / "disks" / "ledger.csv"):
        if r["perturbation_id"] not in ("rotation", "scaling", "translation"):
            continue
        t, seed = float(r["t"]), int(r["seed"])
        emitted = pipeline.load_mask(out / "disks" / "gt" / r["perturbation_id"] / r["level"] / "s0.png")
        assert mask_iou(emitted, pipeline.transform_mask(mask, r["perturbation_id"], t, seed)) == 1.0
        image = load_image(out / r["output_path"]).data.mean(axis=2)
        assert mask_iou(image > 0.5, emitted) > 0.85


def test_ground_truth_file(disks):
    m, cfg, out = disks
    gts = pipeline.read_jsonl(out / "disks" / "ground_truth.jsonl")
    clean = [g for g in gts if g["perturbation_id"] == "clean"]
    assert sorted(g["task"] for g in clean) == ["captioning", "grounding", "segmentation", "vqa"]
    geo = [g for g in gts if g["perturbation_id"] != "clean"]
    assert {g["perturbation_id"] for g in geo} == {"rotation", "scaling", "translation"}
    assert len(geo) == 3 * 5 * 2


def test_transform_box_translation():
    m = geometric_matrix("translation", 0.4, 3, 40, 40)
    dy, dx = m[0, 2], m[1, 2]
    box = pipeline.transform_box((10, 12, 20, 22), m, 40, 40)
    assert box == pytest.approx([10 + dx, 12 + dy, 20 + dx, 22 + dy])


def test_transform_box_rotation_matches_mask():
    size = 41
    yy, xx = np.mgrid[0:size, 0:size]
    mask = (np.abs(yy - 20) <= 6) & (np.abs(xx - 14) <= 3)
    t, seed = 1.0, 2
    m = geometric_matrix("rotation", t, seed, size, size)
    box = pipeline.transform_box((11, 14, 18, 27), m, size, size)
    rot = pipeline.transform_mask(mask, "rotation", t, seed)
    ys, xs = np.nonzero(rot)
    # pixel centres of the resampled mask fall inside the re-boxed corners
    # (half a pixel of slack for nearest-neighbour rounding)
    assert box[0] - 0.5 <= xs.min() + 0.5 and xs.max() + 0.5 <= box[2] + 0.5
    assert box[1] - 0.5 <= ys.min() + 0.5 and ys.max() + 0.5 <= box[3] + 0.5
    tight = (xs.max() + 1 - xs.min()) * (ys.max() + 1 - ys.min())
    assert (box[2] - box[0]) * (box[3] - box[1]) <= 1.3 * tight
    assert pipeline.transform_box((0, 0, 2, 2), geometric_matrix("translation", 1.0, 0, 40, 40), 8, 8) is None


def test_new_samples_do_not_change_existing_outputs(tmp_path):
    small = _disk_dataset(str(tmp_path / "a"), n=1)
    big = _disk_dataset(str(tmp_path / "b"), n=2)
    cfg = dict(perturbations=("gaussian_noise", "rotation"), levels=(2,))
    cmd_perturb(small, RunConfig(cache_path=str(tmp_path / "c1"), output_root=str(tmp_path / "o1"), **cfg))
    cmd_perturb(big, RunConfig(cache_path=str(tmp_path / "c2"), output_root=str(tmp_path / "o2"), **cfg))
    for pid in ("gaussian_noise", "rotation"):
        a = (tmp_path / "o1" / "disks" / pid / "2" / "s0.png").read_bytes()
        assert a == (tmp_path / "o2" / "disks" / pid / "2" / "s0.png").read_bytes()


def test_perturb_fills_cache_on_the_fly(tmp_path):
    m = _disk_dataset(str(tmp_path))
    cfg = RunConfig(cache_path=str(tmp_path / "c.json"), output_root=str(tmp_path / "o"),
                    perturbations=("speckle",), levels=(1, 2))
    cmd_perturb(m, cfg)
    assert len(CalibrationCache.load(cfg.cache_path)) == 2


def test_calibrate_summary(tmp_path, demo_manifests):
    m = load_manifest(demo_manifests[0])
    cfg = RunConfig(cache_path=str(tmp_path / "c.json"), perturbations=("contrast", "mri_ghosting"))
    _, first = cmd_calibrate(m, cfg)
    assert first.computed == 3 * 2 * 5
    _, second = cmd_calibrate(m, cfg)
    assert str(second).startswith(f"0 computed, {3 * 2 * 5} reused")
    assert "level 3" in str(second)


def test_unknown_perturbation_filter(tmp_path, demo_manifests):
    m = load_manifest(demo_manifests[0])
    with pytest.raises(ValueError, match="unknown"):
        pipeline.applicable(m, RunConfig(perturbations=("bogus",)))
    with pytest.raises(ValueError, match="does not apply"):
        pipeline.check_perturbation_modality(m, "oct_blink")


def _write_jsonl(path, recs):
    with open(path, "w") as fh:
        for r in recs:
            fh.write(json.dumps(r) + "\n")


def test_score_perfect_segmentation(disks):
    m, cfg, out = disks
    gt = out / "disks" / "ground_truth.jsonl"
    recs = cmd_score(gt, gt, "segmentation")
    assert recs and all(r.value == 1.0 for r in recs)
    assert {r.metric_name for r in recs} == {"iou", "dice"}
    assert {(r.perturbation_id, r.level) for r in recs} == {("clean", 0)} | {
        (p, s) for p in ("rotation", "scaling", "translation") for s in range(1, 6)}


def test_score_grounding_threshold_inclusive(tmp_path):
    _write_jsonl(tmp_path / "gt.jsonl", [{"sample_id": "a", "task": "grounding", "box": [0, 0, 1, 1]}])
    _write_jsonl(tmp_path / "p.jsonl", [{"sample_id": "a", "task": "grounding", "box": [0, 0, 2, 1]}])
    (rec,) = cmd_score(tmp_path / "p.jsonl", tmp_path / "gt.jsonl", "grounding")
    assert (rec.metric_name, rec.value) == ("acc_iou50", 1.0)


def test_score_vqa_missing_predictions(tmp_path, caplog):
    _write_jsonl(tmp_path / "gt.jsonl", [{"sample_id": f"q{i}", "task": "vqa", "answer": "yes"} for i in range(10)])
    _write_jsonl(tmp_path / "p.jsonl", [{"sample_id": f"q{i}", "task": "vqa", "answer": "Yes."} for i in range(9)]
                 + [{"sample_id": "stray", "task": "vqa", "answer": "yes"}])
    with caplog.at_level(logging.WARNING):
        (rec,) = cmd_score(tmp_path / "p.jsonl", tmp_path / "gt.jsonl", "vqa")
    assert rec.value == pytest.approx(0.9)
    assert "1 predictions have no ground truth" in caplog.text
    assert "1 of 10 samples have no prediction" in caplog.text


def test_score_uses_ledger_convergence(disks, tmp_path):
    m, cfg, out = disks
    gt = out / "disks" / "ground_truth.jsonl"
    ledger = out / "disks" / "ledger.csv"
    rows = pipeline.read_ledger(ledger)
    for r in rows:
        if r["perturbation_id"] == "rotation" and r["level"] == "1":
            r["converged"] = "0"
    with open(tmp_path / "ledger.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=pipeline.LEDGER_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    recs = cmd_score(gt, gt, "grounding", ledger_path=tmp_path / "ledger.csv")
    flags = {(r.perturbation_id, r.level): r.converged for r in recs}
    assert flags[("rotation", 1)] is False and flags[("rotation", 2)] is True


def test_report_files(tmp_path, disks):
    m, cfg, out = disks
    gt = out / "disks" / "ground_truth.jsonl"
    pipeline.synthetic_predictions(gt, tmp_path / "pred.jsonl", "segmentation")
    recs = cmd_score(tmp_path / "pred.jsonl", gt, "segmentation")
    report = cmd_report(recs, tmp_path / "rep")
    assert sorted(os.listdir(tmp_path / "rep")) == ["records.csv", "report.json", "table.csv"]
    assert read_records(tmp_path / "rep" / "records.csv") == recs
    doc = json.loads((tmp_path / "rep" / "report.json").read_text())
    assert doc["grid"] and doc["ranked_perturbations"]
    assert report.table[0]["datasets"]["disks"]["delta_b"] is not None


def _ids_manifest(n):
    return DatasetManifest("ds", Modality.CT, tuple(Sample(f"s{i:03d}", f"{i}.png") for i in range(n)))


@settings(max_examples=40, deadline=None)
@given(n=st.integers(1, 60), k=st.integers(1, 60), seed=st.integers(0, 2 ** 32))
def test_subsample_size_order_and_growth(n, k, seed):
    m = _ids_manifest(n)
    sub = pipeline.subsample(m, k, seed)
    ids = [s.sample_id for s in sub.samples]
    assert len(ids) == min(n, k)
    assert ids == sorted(ids)
    assert sub == pipeline.subsample(m, k, seed)
    # growing the manifest keeps every earlier pick that still ranks in the top k
    grown = {s.sample_id for s in pipeline.subsample(_ids_manifest(n + 5), k, seed).samples}
    assert len(set(ids) - grown) <= 5


def test_subsample_is_roughly_uniform():
    m = _ids_manifest(20)
    hits = np.zeros(20)
    for seed in range(400):
        for s in pipeline.subsample(m, 5, seed).samples:
            hits[int(s.sample_id[1:])] += 1
    # each sample is expected 100 times; a binomial sd is about 8.7
    assert hits.min() > 60 and hits.max() < 140


def test_perturb_max_samples(tmp_path):
    m = _disk_dataset(str(tmp_path), n=3)
    cfg = RunConfig(cache_path=str(tmp_path / "c.json"), output_root=str(tmp_path / "o"),
                    perturbations=("contrast",), levels=(1,), max_samples=2)
    res = cmd_perturb(m, cfg)
    assert res["rows"] == 2
    with pytest.raises(ValueError):
        pipeline.subsample(m, 0)
