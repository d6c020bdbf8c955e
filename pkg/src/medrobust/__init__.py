"""Calibrated image perturbations and robustness scoring for medical vision models."""

from .aggregate import MetricRecord, build_report, mean_drop, rank_perturbations
from .calibrate import SEVERITY_LEVELS, CalibrationCache, CalibrationEntry, calibrate_dataset
from .imagekit import ImageBuffer, load_image, save_image, ssim
from .manifest import DatasetManifest, load_manifest
from .perturb_base import BaseKind, apply_base
from .perturb_medical import MedicalKind, Modality, apply_medical, perturbations_for
from .registry import PerturbationSpec, register

__version__ = "0.1.0"

__all__ = [
    "BaseKind", "CalibrationCache", "CalibrationEntry", "DatasetManifest", "ImageBuffer",
    "MedicalKind", "MetricRecord", "Modality", "PerturbationSpec", "SEVERITY_LEVELS",
    "apply_base", "apply_medical", "build_report", "calibrate_dataset",
    "load_image", "load_manifest", "mean_drop", "perturbations_for", "rank_perturbations",
    "register", "save_image", "ssim",
]
