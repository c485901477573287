import os
import time

import numpy as np
import pytest

from acerase.checkpoint import load_params, save_params

from acerase.denoiser import Architecture, Denoiser, init_adapter, init_denoiser, train_base
from acerase.diffusion import build_schedule
from acerase.universe import canonical_universe

BASE_TRAIN_SECONDS: list[float] = []


@pytest.fixture(scope="session")
def sched():
    return build_schedule()


@pytest.fixture(scope="session")
def universe():
    return canonical_universe()


@pytest.fixture(scope="session")
def base(universe, sched):
    """Base denoiser trained with library defaults; shared by every slow test.

    Set ACERASE_BASE_CACHE to a file path to reuse one trained model across sessions.
    """
    cache = os.environ.get("ACERASE_BASE_CACHE")
    if cache and os.path.exists(cache):
        return load_params(cache)
    start = time.perf_counter()
    params = train_base(universe, sched, seed=0)
    BASE_TRAIN_SECONDS.append(time.perf_counter() - start)
    if cache:
        save_params(params, cache)
    return params


@pytest.fixture(scope="session")
def base_model(base):
    return Denoiser(base)


@pytest.fixture
def small_net():
    """Width-16 network with a non-trivial adapter, for finite-difference checks."""
    arch = Architecture(num_concepts=3, hidden=16, time_dim=4, concept_dim=3, num_steps=10)
    params = init_denoiser(arch, seed=11)
    adapter = init_adapter(params, rank=2, scale=2.0, seed=5)
    rng = np.random.default_rng(3)
    for name in adapter.B:
        adapter.B[name] = rng.normal(scale=0.3, size=adapter.B[name].shape)
    return params, adapter


@pytest.fixture(scope="session")
def small_adapter(base, universe, sched):
    """A briefly trained erasure adapter (target 0) for tests that need a non-trivial one."""
    from acerase.trainer import ErasureRunConfig, erase_concept

    adapter, _, _ = erase_concept(base, ErasureRunConfig(target=0, steps=30, seed=2), universe, sched)
    return adapter


ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[name]
        terminalreporter.write_line(f"{name} {'PASS' if ok else 'FAIL'}  {detail}")
