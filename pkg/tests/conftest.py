"""Shared fixtures: one moderately sized simulation reused across test modules."""

import numpy as np
import pytest

from pnrtiming import (
    JitterParams,
    PulseModelParams,
    SourceSpec,
    calibrate_events,
    pair_edges,
    simulate_stream,
)


@pytest.fixture(scope="session")
def default_params():
    return PulseModelParams(), JitterParams(), SourceSpec()


@pytest.fixture(scope="session")
def sim_50k(default_params):
    pulse, jitter, spec = default_params
    tags, truth = simulate_stream(spec, pulse, jitter, 50_000, seed=2024)
    return tags, truth


@pytest.fixture(scope="session")
def events_a(sim_50k):
    tags, _ = sim_50k
    return pair_edges(tags, window_ps=8000.0, detector="A")


@pytest.fixture(scope="session")
def optimal_model(events_a):
    return calibrate_events(events_a, mode="optimal")


@pytest.fixture(scope="session")
def rising_model(events_a):
    return calibrate_events(events_a, mode="rising_only")


@pytest.fixture()
def rng():
    return np.random.default_rng(99)
