"""Shared fixtures: a small desk-scale configuration and synthetic cases."""

from __future__ import annotations

import numpy as np
import pytest

from cpmn.core_types import CPMNConfig, PairedCase, Phase, SegMask, Volume3D
from cpmn.synth_phantom import PhantomSpec, generate_case


@pytest.fixture
def desk_config() -> CPMNConfig:
    return CPMNConfig(
        patch_size=(32, 32, 32), alpha=1, beta=1, batch_size=2, epochs=2, seed=0
    )


@pytest.fixture
def desk_spec() -> PhantomSpec:
    return PhantomSpec(extent=(32, 32, 32), vessel_count=4, embolism_count=2, seed=7)


@pytest.fixture
def pe_case(desk_spec) -> PairedCase:
    return generate_case(desk_spec, "pe_fixture")


def random_case(rng: np.random.Generator, extent=(8, 8, 8), label=1, case_id="case") -> PairedCase:
    """A structurally valid random case for IO/metric tests (no phantom geometry)."""
    mask = np.zeros(extent, dtype=np.uint8)
    if label == 1:
        mask[tuple(e // 2 for e in extent)] = 1
    return PairedCase(
        nct=Volume3D(rng.random(extent, dtype=np.float32), phase=Phase.NCT),
        ctpa=Volume3D(rng.random(extent, dtype=np.float32), phase=Phase.CTPA),
        mask=SegMask(mask),
        label=label,
        case_id=case_id,
    )
