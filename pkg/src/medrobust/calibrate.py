"""SSIM-guided severity calibration.

For each (image, perturbation, level) a bisection on the intensity ``t`` looks
for a value whose SSIM against the clean image falls inside the level's band.
Results are stored in a JSON cache keyed by image content hash, perturbation,
level and seed.
"""

from __future__ import annotations

import json
import logging
import os
import statistics
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

from filelock import FileLock

from . import registry
from .imagekit import ImageBuffer, load_image, ssim
from .manifest import DatasetManifest
from .seeding import application_seed, stable_hash64

log = logging.getLogger(__name__)

DEFAULT_MAX_ITERATIONS = 30
DATASET_SAMPLE_SIZE = 32


@dataclass(frozen=True)
class SeverityLevel:
    level: int
    band_low: float
    band_high: float

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.band_low + self.band_high)

    def contains(self, value: float) -> bool:
        return self.band_low <= value <= self.band_high


SEVERITY_LEVELS = {
    1: SeverityLevel(1, 0.90, 0.98),
    2: SeverityLevel(2, 0.80, 0.89),
    3: SeverityLevel(3, 0.70, 0.79),
    4: SeverityLevel(4, 0.60, 0.69),
    5: SeverityLevel(5, 0.50, 0.59),
}


def severity(level) -> SeverityLevel:
    if isinstance(level, SeverityLevel):
        return level
    try:
        return SEVERITY_LEVELS[int(level)]
    except (KeyError, TypeError, ValueError):
        raise ValueError(f"invalid severity level {level!r}; expected 1..5") from None


@dataclass
class CalibrationEntry:
    image_key: str
    perturbation_id: str
    level: int
    t: float
    achieved_ssim: float
    converged: bool
    iterations: int
    seed: int
    error: str | None = None
    mode: str = "per_image"

    @property
    def key(self) -> str:
        return cache_key(self.image_key, self.perturbation_id, self.level, self.seed, self.mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["error"] is None:
            del d["error"]
        if d["mode"] == "per_image":
            del d["mode"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationEntry":
        return cls(
            image_key=d["image_key"], perturbation_id=d["perturbation_id"],
            level=int(d["level"]), t=float(d["t"]), achieved_ssim=float(d["achieved_ssim"]),
            converged=bool(d["converged"]), iterations=int(d["iterations"]),
            seed=int(d["seed"]), error=d.get("error"), mode=d.get("mode", "per_image"),
        )


def cache_key(image_key: str, perturbation_id: str, level: int, seed: int,
              mode: str = "per_image") -> str:
    key = f"{image_key}|{perturbation_id}|{int(level)}|{int(seed)}"
    return key if mode == "per_image" else f"{key}|{mode}"


def calibrate(img: ImageBuffer, perturbation_id: str, level, seed: int,
              max_iterations: int = DEFAULT_MAX_ITERATIONS) -> CalibrationEntry:
    """Bisection on ``t`` in [0, 1] for an SSIM inside the band of ``level``.

    Assumes SSIM is non-increasing in ``t``.  The first evaluation is at
    ``t = 1``; if even that stays above the band the level is unreachable and
    ``t = 1`` is returned unconverged.  When the cap is hit without landing in
    the band, the probed ``t`` whose SSIM was closest to the band midpoint is
    returned unconverged.
    """
    spec = registry.get(perturbation_id)
    band = severity(level)
    if int(max_iterations) < 1:
        raise ValueError("max_iterations must be >= 1")

    def entry(t, s, ok, n):
        return CalibrationEntry(img.content_key, spec.id, band.level, float(t), float(s),
                                bool(ok), n, int(seed))

    def score(t):
        return ssim(img, spec.apply(img, t, seed))

    iterations = 1
    s = score(1.0)
    if s > band.band_high or band.contains(s):
        return entry(1.0, s, band.contains(s), iterations)

    best_t, best_s = 1.0, s
    lo, hi = 0.0, 1.0
    while iterations < max_iterations:
        mid = 0.5 * (lo + hi)
        s = score(mid)
        iterations += 1
        if band.contains(s):
            return entry(mid, s, True, iterations)
        if abs(s - band.midpoint) < abs(best_s - band.midpoint):
            best_t, best_s = mid, s
        if s > band.band_high:
            lo = mid
        else:
            hi = mid
    return entry(best_t, best_s, False, iterations)


class CalibrationCache:
    """Mapping of cache key -> :class:`CalibrationEntry`, persisted as one JSON document."""

    def __init__(self, entries=None):
        self.entries: dict[str, CalibrationEntry] = dict(entries or {})
        self.computed = 0
        self.reused = 0
        self.iterations = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return key in self.entries

    def __iter__(self):
        return iter(self.entries.values())

    def get(self, image_key, perturbation_id, level, seed, mode="per_image") -> CalibrationEntry | None:
        e = self.entries.get(cache_key(image_key, perturbation_id, level, seed, mode))
        if e is None or e.error is not None:
            return None
        return e

    def add(self, entry: CalibrationEntry) -> None:
        self.entries[entry.key] = entry

    def to_json(self) -> str:
        doc = {k: self.entries[k].to_dict() for k in sorted(self.entries)}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def load(cls, path) -> "CalibrationCache":
        path = os.fspath(path)
        if not os.path.exists(path):
            return cls()
        with open(path) as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ValueError(f"corrupt calibration cache {path}: {exc}") from None
        try:
            return cls({k: CalibrationEntry.from_dict(v) for k, v in doc.items()})
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ValueError(f"corrupt calibration cache {path}: {exc}") from None

    def save(self, path) -> None:
        """Merge into any cache already on disk and replace it atomically.

        Entries are deterministic, so last-writer-wins on equal keys is safe.
        """
        path = os.path.abspath(os.fspath(path))
        parent = os.path.dirname(path)
        os.makedirs(parent, exist_ok=True)
        with FileLock(path + ".lock"):
            on_disk = CalibrationCache.load(path)
            on_disk.entries.update(self.entries)
            self.entries = on_disk.entries
            fd, tmp = tempfile.mkstemp(prefix=".calib-", dir=parent)
            try:
                with os.fdopen(fd, "w") as fh:
                    fh.write(self.to_json())
                os.replace(tmp, path)
            except BaseException:
                if os.path.exists(tmp):
                    os.unlink(tmp)
                raise


def _applicable(manifest: DatasetManifest, perturbations=None) -> list[str]:
    ids = [pid for pid, _ in registry.registered_for(manifest.modality)]
    if perturbations is not None:
        wanted = set(perturbations)
        ids = [p for p in ids if p in wanted]
    return ids


def _calibrate_sample(job):
    """Worker: calibrate every missing (perturbation, level) for one sample."""
    dataset_id, sample_id, image_path, todo, master_seed, max_iterations = job
    try:
        img = load_image(image_path)
    except (OSError, ValueError) as exc:
        key = f"unreadable:{dataset_id}/{sample_id}"
        return [CalibrationEntry(key, pid, lvl, 0.0, 0.0, False, 0,
                                 application_seed(master_seed, dataset_id, sample_id, pid, lvl),
                                 error=str(exc)) for pid, lvl in todo]
    out = []
    for pid, lvl in todo:
        seed = application_seed(master_seed, dataset_id, sample_id, pid, lvl)
        out.append(calibrate(img, pid, lvl, seed, max_iterations))
    return out


def _run_jobs(jobs, workers):
    if workers and workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_calibrate_sample, jobs))
    return [_calibrate_sample(j) for j in jobs]


def calibrate_dataset(manifest: DatasetManifest, levels, cache_path, *,
                      master_seed: int = 0, max_iterations: int = DEFAULT_MAX_ITERATIONS,
                      perturbations=None, workers: int = 1,
                      dataset_level: bool = False) -> CalibrationCache:
    """Ensure a cache entry exists for every (sample, applicable perturbation, level).

    Entries already in the cache at ``cache_path`` are reused.  With
    ``dataset_level=True`` a fixed subset of up to 32 samples is calibrated
    per image and the median ``t`` of each (perturbation, level) is applied to
    every sample (faster, no per-sample band guarantee).
    """
    levels = [severity(l).level for l in levels]
    cache = CalibrationCache.load(cache_path)
    pids = _applicable(manifest, perturbations)

    keys = {}
    for s in manifest.samples:
        try:
            keys[s.sample_id] = load_image(s.image_path).content_key
        except (OSError, ValueError):
            keys[s.sample_id] = None

    def missing(sample, subset_pids):
        k = keys[sample.sample_id]
        todo = []
        for pid in subset_pids:
            for lvl in levels:
                seed = application_seed(master_seed, manifest.dataset_id, sample.sample_id, pid, lvl)
                if k is not None and cache.get(k, pid, lvl, seed) is not None:
                    cache.reused += 1
                else:
                    todo.append((pid, lvl))
        return todo

    if dataset_level:
        subset = sorted(manifest.samples, key=lambda s: stable_hash64(master_seed, s.sample_id))
        subset = sorted(subset[:DATASET_SAMPLE_SIZE], key=lambda s: s.sample_id)
    else:
        subset = list(manifest.samples)

    jobs = []
    for s in subset:
        todo = missing(s, pids)
        if todo:
            jobs.append((manifest.dataset_id, s.sample_id, s.image_path, todo,
                         master_seed, max_iterations))
    for result in _run_jobs(jobs, workers):
        for e in result:
            cache.add(e)
            cache.computed += 1
            cache.iterations += e.iterations
            if e.error:
                log.warning("calibration failed for %s: %s", e.image_key, e.error)

    if dataset_level:
        _spread_median(cache, manifest, subset, pids, levels, keys, master_seed)

    cache.save(cache_path)
    return cache


def _spread_median(cache, manifest, subset, pids, levels, keys, master_seed):
    in_subset = {s.sample_id for s in subset}
    for pid in pids:
        for lvl in levels:
            ts = []
            for s in subset:
                seed = application_seed(master_seed, manifest.dataset_id, s.sample_id, pid, lvl)
                e = keys[s.sample_id] and cache.get(keys[s.sample_id], pid, lvl, seed)
                if e:
                    ts.append((e.converged, e.t))
            if not ts:
                continue
            good = [t for ok, t in ts if ok]
            t_med = statistics.median(good or [t for _, t in ts])
            band = severity(lvl)
            for s in manifest.samples:
                if s.sample_id in in_subset or keys[s.sample_id] is None:
                    continue
                seed = application_seed(master_seed, manifest.dataset_id, s.sample_id, pid, lvl)
                if cache.get(keys[s.sample_id], pid, lvl, seed, "dataset") is not None:
                    cache.reused += 1
                    continue
                img = load_image(s.image_path)
                val = ssim(img, registry.apply(pid, img, t_med, seed))
                cache.add(CalibrationEntry(keys[s.sample_id], pid, lvl, float(t_med), float(val),
                                           band.contains(val), 1, seed, mode="dataset"))
                cache.computed += 1
                cache.iterations += 1
