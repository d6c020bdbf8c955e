"""Dataset manifests: which images belong to a dataset, its modality, and ground truth."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

from .perturb_medical import Modality


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class Sample:
    sample_id: str
    image_path: str
    mask_path: str | None = None
    box: tuple | None = None
    question: str | None = None
    answer: str | None = None
    answer_letter: str | None = None
    caption: str | None = None
    references: tuple = ()

    def caption_references(self) -> list[str]:
        refs = list(self.references)
        if not refs and self.caption is not None:
            refs = [self.caption]
        return refs


@dataclass(frozen=True)
class DatasetManifest:
    dataset_id: str
    modality: Modality
    samples: tuple = ()
    path: str | None = field(default=None, compare=False)

    def __len__(self):
        return len(self.samples)

    def sample(self, sample_id: str) -> Sample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise KeyError(sample_id)


def _resolve(base, p):
    if p is None or os.path.isabs(p):
        return p
    return os.path.normpath(os.path.join(base, p))


def parse_manifest(doc: dict, base_dir: str = ".", path: str | None = None) -> DatasetManifest:
    try:
        dataset_id = str(doc["dataset_id"])
        modality = Modality(doc["modality"])
    except KeyError as exc:
        raise ManifestError(f"manifest missing field {exc.args[0]!r}") from None
    except ValueError:
        raise ManifestError(f"unknown modality {doc.get('modality')!r}") from None

    samples = []
    seen = set()
    for i, rec in enumerate(doc.get("samples", [])):
        if "sample_id" not in rec or "image_path" not in rec:
            raise ManifestError(f"sample #{i} needs sample_id and image_path")
        sid = str(rec["sample_id"])
        if sid in seen:
            raise ManifestError(f"duplicate sample_id {sid!r}")
        seen.add(sid)
        box = rec.get("box")
        if box is not None:
            if len(box) != 4:
                raise ManifestError(f"sample {sid!r}: box needs four numbers")
            box = tuple(float(v) for v in box)
        refs = rec.get("references") or ()
        samples.append(Sample(
            sample_id=sid,
            image_path=_resolve(base_dir, rec["image_path"]),
            mask_path=_resolve(base_dir, rec.get("mask_path")),
            box=box,
            question=rec.get("question"),
            answer=rec.get("answer"),
            answer_letter=rec.get("answer_letter"),
            caption=rec.get("caption"),
            references=tuple(refs),
        ))
    return DatasetManifest(dataset_id, modality, tuple(samples), path=path)


def load_manifest(path) -> DatasetManifest:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise ManifestError(f"file not found: {path}")
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: {exc}") from None
    return parse_manifest(doc, base_dir=os.path.dirname(os.path.abspath(path)), path=path)


def validate_manifest(manifest: DatasetManifest) -> list[str]:
    """Return a list of problems; empty when every referenced file exists."""
    problems = []
    for s in manifest.samples:
        if not os.path.isfile(s.image_path):
            problems.append(f"{s.sample_id}: image not found: {s.image_path}")
        if s.mask_path is not None and not os.path.isfile(s.mask_path):
            problems.append(f"{s.sample_id}: mask not found: {s.mask_path}")
        if s.box is not None and not (s.box[0] < s.box[2] and s.box[1] < s.box[3]):
            problems.append(f"{s.sample_id}: degenerate box {s.box}")
    return problems
