"""Shared data model: volumes, paired cases, predictions, and run configuration.

All spatial grids use depth-major (D, H, W) axis order throughout the package.
Intensities are dimensionless; the synthetic generator emits values in [0, 1]
and :func:`minmax_normalize` brings external data into the same range.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np


class Phase(str, Enum):
    """Acquisition phase of a CT volume; also identifies the pathway that consumes it."""

    NCT = "nct"
    CTPA = "ctpa"


@dataclass(frozen=True)
class Volume3D:
    """A 3D scalar intensity grid with voxel spacing in mm and a phase tag.

    Attributes:
        data: float32 array of shape (D, H, W).
        spacing: voxel spacing (mm) per axis, depth-major.
        phase: which acquisition phase the volume belongs to.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    phase: Phase = Phase.NCT

    def __post_init__(self) -> None:
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise ValueError(f"volume data must be 3D (D, H, W), got shape {data.shape}")
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3:
            raise ValueError(f"spacing must have 3 entries, got {len(spacing)}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "phase", Phase(self.phase))

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(self.data.shape)


@dataclass(frozen=True)
class SegMask:
    """Voxel-wise label grid: 0 background, 1 embolism."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.ndim != 3:
            raise ValueError(f"mask labels must be 3D (D, H, W), got shape {labels.shape}")
        object.__setattr__(self, "labels", labels)

    @property
    def extent(self) -> tuple[int, int, int]:
        return tuple(self.labels.shape)

    def foreground_count(self) -> int:
        return int(np.count_nonzero(self.labels))


@dataclass(frozen=True)
class PairedCase:
    """A registered NCT+CTPA pair with its voxel mask and patient-level label.

    label is 0 for a normal subject and 1 for an embolism-positive patient.
    Construction is permissive; use :func:`validate_case` to check invariants.
    """

    nct: Volume3D
    ctpa: Volume3D
    mask: SegMask
    label: int
    case_id: str


@dataclass(frozen=True)
class Prediction:
    """Whole-volume model output for one case."""

    pe_probability: float
    seg_probmap: np.ndarray
    cam: np.ndarray | None = None


@dataclass(frozen=True)
class CPMNConfig:
    """Hyperparameters for training and inference.

    patch_size is depth-major (D, H, W); the recipe-scale value 224x224x96
    (H, W, D) is stored as (96, 224, 224) and can be reduced freely for
    desk-scale runs. alpha/beta parameterize the inter-feature affinity graph
    (connection range and node granularity); beta must be a perfect cube.
    """

    patch_size: tuple[int, int, int] = (96, 224, 224)
    lambda1: float = 0.25
    lambda2: float = 10.0
    lambda3: float = 0.1
    alpha: int = 8
    beta: int = 1
    center_lr: float = 0.5
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    lr: float = 1e-3
    lr_min: float = 1e-5
    batch_size: int = 6
    epochs: int = 20
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self) -> None:
        patch = tuple(int(p) for p in self.patch_size)
        if len(patch) != 3 or any(p < 1 for p in patch):
            raise ValueError(f"patch_size must be 3 positive integers, got {self.patch_size}")
        object.__setattr__(self, "patch_size", patch)
        for name in ("lambda1", "lambda2", "lambda3"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.alpha < 1:
            raise ValueError("alpha (connection range) must be a positive integer")
        if self.beta < 1 or round(self.beta ** (1 / 3)) ** 3 != self.beta:
            raise ValueError(f"beta (granularity) must be a perfect cube, got {self.beta}")
        if not 0.0 < self.center_lr <= 1.0:
            raise ValueError("center_lr must lie in (0, 1]")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be nonnegative")
        if not 0.0 < self.focal_alpha < 1.0:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.lr <= 0 or self.lr_min <= 0:
            raise ValueError("lr and lr_min must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive integers")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError("threshold must lie in (0, 1)")

    def with_lambdas(self, lambda1: float, lambda2: float, lambda3: float) -> "CPMNConfig":
        return replace(self, lambda1=lambda1, lambda2=lambda2, lambda3=lambda3)


def _volume_violations(volume: Volume3D, name: str) -> list[str]:
    out = []
    if any(e < 1 for e in volume.extent):
        out.append(f"empty extent: {name} has extent {volume.extent}")
    if any(s <= 0 for s in volume.spacing):
        out.append(f"non-positive spacing: {name} has spacing {volume.spacing}")
    if not np.all(np.isfinite(volume.data)):
        out.append(f"non-finite intensities: {name} contains NaN or Inf")
    return out


def validate_case(case: PairedCase) -> list[str]:
    """Check every PairedCase invariant; returns one description per violation.

    Pure and non-throwing: a well-formed case yields an empty list.
    """
    violations: list[str] = []
    violations += _volume_violations(case.nct, "nct")
    violations += _volume_violations(case.ctpa, "ctpa")
    if case.nct.extent != case.ctpa.extent:
        violations.append(f"extent mismatch: nct {case.nct.extent} vs ctpa {case.ctpa.extent}")
    if case.mask.extent != case.nct.extent:
        violations.append(f"extent mismatch: mask {case.mask.extent} vs nct {case.nct.extent}")
    if case.nct.phase is not Phase.NCT:
        violations.append(f"phase tag mismatch: nct volume tagged {case.nct.phase.value}")
    if case.ctpa.phase is not Phase.CTPA:
        violations.append(f"phase tag mismatch: ctpa volume tagged {case.ctpa.phase.value}")
    values = np.unique(case.mask.labels)
    if not np.all(np.isin(values, (0, 1))):
        violations.append(f"mask value set not in {{0, 1}}: found {values.tolist()}")
    if case.label not in (0, 1):
        violations.append(f"label not in {{0, 1}}: {case.label}")
    else:
        has_fg = case.mask.foreground_count() > 0
        if case.label == 1 and not has_fg:
            violations.append("label/mask mismatch: label 1 but mask has no foreground")
        if case.label == 0 and has_fg:
            violations.append("label/mask mismatch: label 0 but mask has foreground")
    return violations


def minmax_normalize(volume: Volume3D) -> Volume3D:
    """Rescale intensities to [0, 1]; a constant volume maps to all zeros."""
    lo = float(volume.data.min())
    hi = float(volume.data.max())
    if hi - lo <= 0:
        data = np.zeros_like(volume.data)
    else:
        data = (volume.data - lo) / (hi - lo)
    return Volume3D(data=data, spacing=volume.spacing, phase=volume.phase)
