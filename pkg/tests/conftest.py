from typing import Callable, List, Sequence

import numpy as np
import pytest

from gestaltclosure.config.settings import NetConfig, StimulusConfig
from gestaltclosure.core.closure import ClosureRecord
from gestaltclosure.core.stimuli import EDGE_LENGTH_LEVELS

TRIPLES_PER_EDGE = 8


@pytest.fixture
def small_stimulus() -> StimulusConfig:
    """A 32 px stimulus geometry, fast enough to render all 992 specs in tests."""
    return StimulusConfig(
        image_size=32, vertex_distance=20.0, stroke_width=1.5, antialias_samples=2, offset=-2.0
    )


@pytest.fixture
def tiny_conv() -> NetConfig:
    return NetConfig(
        kind="conv",
        n_layers=3,
        n_classes=3,
        base_width=4,
        width_step=2,
        input_shape=(16, 16, 3),
    )


@pytest.fixture
def stimulus_conv() -> NetConfig:
    """Conv net whose input matches `small_stimulus`."""
    return NetConfig(
        kind="conv", n_layers=3, n_classes=2, base_width=4, width_step=2, input_shape=(32, 32, 3)
    )


def edge_pattern(slope: float, offset: float = 0.0, noise: float = 0.01) -> Callable[[int, int], float]:
    """C values linear in edge length plus a zero-mean alternating offset per triple."""

    def value(edge: int, k: int) -> float:
        return offset + slope * edge + (noise if k % 2 == 0 else -noise)

    return value


def make_records(
    model_id: str,
    pattern: Callable[[int, int], float],
    layer: str = "fc_finale",
    edges: Sequence[int] = EDGE_LENGTH_LEVELS,
    per_edge: int = TRIPLES_PER_EDGE,
) -> List[ClosureRecord]:
    records = []
    for e_idx, edge in enumerate(edges):
        for k in range(per_edge):
            c = pattern(edge, k)
            records.append(
                ClosureRecord(
                    triple_index=e_idx * per_edge + k,
                    edge_length=edge,
                    c=c,
                    s_ac=0.5 + c / 2,
                    s_dc=0.5 - c / 2,
                    layer_name=layer,
                    model_id=model_id,
                )
            )
    return records


@pytest.fixture
def records_factory():
    return make_records


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)
