"""Synthetic dual-phase phantom generator.

Produces registered NCT/CTPA pairs sharing identical tube-and-sphere geometry:
vessels are random-walk tubes, embolisms are spheres centered on vessel
centerlines. The CTPA rendering gives embolisms a strong filling-defect
contrast against vessels while the NCT rendering leaves only a faint texture
difference near the noise floor, which is the asymmetry the cross-phase
training is meant to exploit.
"""

from __future__ import annotations

import math
import zlib
from dataclasses import dataclass, replace

import numpy as np

from .core_types import PairedCase, Phase, SegMask, Volume3D

BACKGROUND_INTENSITY = 0.1


class PhantomGenerationError(ValueError):
    """Raised when a spec cannot be rendered (e.g. extent too small for any vessel)."""


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry and rendering parameters for one synthetic case.

    The default values give a desk-scale phantom: the NCT vessel/embolism
    contrast (0.07) sits near the noise floor while the CTPA contrast (0.6)
    is far above it.
    """

    extent: tuple[int, int, int] = (64, 64, 64)
    vessel_count: int = 6
    vessel_radius_range: tuple[float, float] = (2.0, 4.0)
    embolism_count: int = 3
    embolism_radius_range: tuple[float, float] = (2.0, 3.0)
    ctpa_vessel_intensity: float = 0.9
    ctpa_embolism_intensity: float = 0.3
    nct_vessel_intensity: float = 0.45
    nct_embolism_intensity: float = 0.38
    noise_sigma: float = 0.03
    seed: int = 0

    def __post_init__(self) -> None:
        extent = tuple(int(e) for e in self.extent)
        if len(extent) != 3 or any(e < 1 for e in extent):
            raise ValueError(f"extent must be 3 positive integers, got {self.extent}")
        object.__setattr__(self, "extent", extent)
        if self.vessel_count < 1:
            raise ValueError("vessel_count must be at least 1")
        if self.embolism_count < 0:
            raise ValueError("embolism_count must be nonnegative")
        for name in ("vessel_radius_range", "embolism_radius_range"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must satisfy 0 < min <= max, got ({lo}, {hi})")
        for name in (
            "ctpa_vessel_intensity",
            "ctpa_embolism_intensity",
            "nct_vessel_intensity",
            "nct_embolism_intensity",
        ):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {v}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        ctpa_gap = abs(self.ctpa_vessel_intensity - self.ctpa_embolism_intensity)
        nct_gap = abs(self.nct_vessel_intensity - self.nct_embolism_intensity)
        if not ctpa_gap > nct_gap:
            raise ValueError(
                "dual-phase asymmetry violated: CTPA vessel/embolism contrast "
                f"({ctpa_gap:.3f}) must exceed the NCT contrast ({nct_gap:.3f})"
            )


def _case_rng(spec: PhantomSpec, case_id: str) -> np.random.Generator:
    return np.random.default_rng([spec.seed & 0xFFFFFFFF, zlib.crc32(case_id.encode("utf-8"))])


def _stamp_sphere(grid: np.ndarray, center: np.ndarray, radius: float) -> None:
    """Mark all voxels within ``radius`` of ``center`` (local bounding box only)."""
    lo = np.maximum(np.floor(center - radius).astype(int), 0)
    hi = np.minimum(np.ceil(center + radius).astype(int) + 1, grid.shape)
    if np.any(lo >= hi):
        return
    zz, yy, xx = np.ogrid[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]]
    dist2 = (zz - center[0]) ** 2 + (yy - center[1]) ** 2 + (xx - center[2]) ** 2
    grid[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] |= dist2 <= radius**2


def _walk_centerline(
    rng: np.random.Generator, extent: np.ndarray, radius: float, n_steps: int
) -> np.ndarray:
    """Random-walk polyline kept ``radius`` away from the volume faces."""
    margin = radius
    low = np.full(3, margin)
    high = extent - 1 - margin
    pos = rng.uniform(low, high)
    direction = rng.normal(size=3)
    direction /= np.linalg.norm(direction) + 1e-12
    points = [pos.copy()]
    for _ in range(n_steps):
        direction = direction + rng.normal(scale=0.25, size=3)
        direction /= np.linalg.norm(direction) + 1e-12
        pos = pos + direction
        # reflect off the walls so tubes stay inside the padded box
        for axis in range(3):
            if pos[axis] < low[axis]:
                pos[axis] = 2 * low[axis] - pos[axis]
                direction[axis] = abs(direction[axis])
            elif pos[axis] > high[axis]:
                pos[axis] = 2 * high[axis] - pos[axis]
                direction[axis] = -abs(direction[axis])
        pos = np.clip(pos, low, high)
        points.append(pos.copy())
    return np.asarray(points)


def generate_case(spec: PhantomSpec, case_id: str) -> PairedCase:
    """Render one paired case; pure function of (spec, case_id)."""
    extent = np.asarray(spec.extent)
    max_radius = max(spec.vessel_radius_range[1], spec.embolism_radius_range[1])
    if int(extent.min()) < 2 * math.ceil(max_radius) + 2:
        raise PhantomGenerationError(
            f"extent {spec.extent} too small to fit structures of radius {max_radius}"
        )
    rng = _case_rng(spec, case_id)

    vessel_mask = np.zeros(spec.extent, dtype=bool)
    centerlines: list[tuple[np.ndarray, float]] = []
    n_steps = int(extent.max() * 1.5)
    for _ in range(spec.vessel_count):
        radius = rng.uniform(*spec.vessel_radius_range)
        line = _walk_centerline(rng, extent, radius, n_steps)
        for point in line:
            _stamp_sphere(vessel_mask, point, radius)
        centerlines.append((line, radius))

    embolism_mask = np.zeros(spec.extent, dtype=bool)
    placed: list[tuple[np.ndarray, float]] = []
    emb_lo, emb_hi = spec.embolism_radius_range
    attempts = 0
    while len(placed) < spec.embolism_count and attempts < 200 * max(spec.embolism_count, 1):
        attempts += 1
        line, vessel_radius = centerlines[int(rng.integers(len(centerlines)))]
        center = line[int(rng.integers(len(line)))]
        radius = rng.uniform(emb_lo, min(emb_hi, max(emb_lo, vessel_radius)))
        if any(np.linalg.norm(center - c) < radius + r + 1.0 for c, r in placed):
            continue
        _stamp_sphere(embolism_mask, center, radius)
        placed.append((center, radius))
    if spec.embolism_count > 0 and not placed:
        raise PhantomGenerationError(
            f"could not place any embolism in extent {spec.extent} after {attempts} attempts"
        )

    def render(vessel_value: float, embolism_value: float) -> np.ndarray:
        img = np.full(spec.extent, BACKGROUND_INTENSITY, dtype=np.float32)
        img[vessel_mask] = vessel_value
        img[embolism_mask] = embolism_value
        if spec.noise_sigma > 0:
            img = img + rng.normal(0.0, spec.noise_sigma, size=spec.extent).astype(np.float32)
        return np.clip(img, 0.0, 1.0)

    ctpa = render(spec.ctpa_vessel_intensity, spec.ctpa_embolism_intensity)
    nct = render(spec.nct_vessel_intensity, spec.nct_embolism_intensity)
    mask = embolism_mask.astype(np.uint8)
    return PairedCase(
        nct=Volume3D(nct, phase=Phase.NCT),
        ctpa=Volume3D(ctpa, phase=Phase.CTPA),
        mask=SegMask(mask),
        label=int(mask.any()),
        case_id=case_id,
    )


def generate_dataset(
    spec_template: PhantomSpec, n_pe: int, n_normal: int, seed: int
) -> list[PairedCase]:
    """Generate ``n_pe`` embolism cases followed by ``n_normal`` normals.

    Per-case structure counts are sampled from the template: vessels between
    half the template count and the template count, embolisms between 1 and
    the template count (normals always get 0). Deterministic under ``seed``.
    """
    if n_pe < 0 or n_normal < 0:
        raise ValueError("case counts must be nonnegative")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x9E3779B9])
    vessels_lo = max(1, math.ceil(spec_template.vessel_count / 2))
    cases: list[PairedCase] = []
    for kind_code, count, prefix in ((1, n_pe, "pe"), (0, n_normal, "normal")):
        for i in range(count):
            case_id = f"{prefix}_{i:04d}"
            case_seed = int(
                np.random.SeedSequence([seed & 0xFFFFFFFF, kind_code, i]).generate_state(1)[0]
            )
            vessel_count = int(rng.integers(vessels_lo, spec_template.vessel_count + 1))
            if kind_code == 1:
                embolism_count = int(rng.integers(1, max(spec_template.embolism_count, 1) + 1))
            else:
                embolism_count = 0
            case_spec = replace(
                spec_template,
                vessel_count=vessel_count,
                embolism_count=embolism_count,
                seed=case_seed,
            )
            cases.append(generate_case(case_spec, case_id))
    return cases
