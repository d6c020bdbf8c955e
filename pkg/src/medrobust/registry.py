"""Registry of every perturbation the toolkit can apply, keyed by canonical id."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

from .imagekit import ImageBuffer
from .perturb_base import BaseKind, apply_base, base_group
from .perturb_medical import PRIMARY_MODALITY, MedicalKind, Modality, apply_medical

BASE = "base"
MED_SPECIFIC = "med_specific"
CLEAN = "clean"

Apply = Callable[[ImageBuffer, float, int], ImageBuffer]


@dataclass(frozen=True)
class PerturbationSpec:
    id: str
    category: str
    modalities: frozenset
    apply: Apply
    group: str = ""

    def applies_to(self, modality) -> bool:
        return Modality(modality) in self.modalities


_REGISTRY: dict[str, PerturbationSpec] = {}


def register(spec: PerturbationSpec, *, replace: bool = False) -> PerturbationSpec:
    if spec.category not in (BASE, MED_SPECIFIC):
        raise ValueError(f"unknown category {spec.category!r}")
    if spec.id in _REGISTRY and not replace:
        raise ValueError(f"perturbation {spec.id!r} already registered")
    _REGISTRY[spec.id] = spec
    return spec


def unregister(perturbation_id: str) -> None:
    _REGISTRY.pop(perturbation_id, None)


def get(perturbation_id) -> PerturbationSpec:
    try:
        return _REGISTRY[str(perturbation_id)]
    except KeyError:
        raise KeyError(f"unregistered perturbation {perturbation_id!r}") from None


def is_registered(perturbation_id) -> bool:
    return str(perturbation_id) in _REGISTRY


def apply(perturbation_id, img: ImageBuffer, t, seed: int) -> ImageBuffer:
    return get(perturbation_id).apply(img, t, seed)


def category_of(perturbation_id) -> str:
    if perturbation_id == CLEAN:
        return CLEAN
    return get(perturbation_id).category


def all_ids() -> list[str]:
    return list(_REGISTRY)


def registered_for(modality: Modality) -> list[tuple[str, str]]:
    specs = [s for s in _REGISTRY.values() if modality in s.modalities]
    ordered = [s for s in specs if s.category == BASE] + [s for s in specs if s.category == MED_SPECIFIC]
    return [(s.id, s.category) for s in ordered]


def _bind_base(kind):
    return lambda img, t, seed: apply_base(kind, img, t, seed)


def _bind_medical(kind):
    return lambda img, t, seed: apply_medical(kind, img, t, seed)


for _k in BaseKind:
    register(PerturbationSpec(_k.value, BASE, frozenset(Modality), _bind_base(_k), base_group(_k)))
for _k in MedicalKind:
    register(PerturbationSpec(_k.value, MED_SPECIFIC, frozenset({PRIMARY_MODALITY[_k]}),
                              _bind_medical(_k), PRIMARY_MODALITY[_k].value))
