import sys
from functools import lru_cache
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from vaptr_sim.harness.corpus import CorpusParams, gen_corpus  # noqa: E402
from vaptr_sim.rewriter import instrument  # noqa: E402

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@lru_cache(maxsize=None)
def corpus(n: int = 100, seed: int = 1):
    return tuple(gen_corpus(CorpusParams(n_programs=n, seed=seed)))


@lru_cache(maxsize=None)
def instrumented(n: int = 100, seed: int = 1):
    """(program, rsb, units, stats) for every corpus program, default options."""
    return tuple((p, *instrument(p.image)) for p in corpus(n, seed))


@pytest.fixture(scope="session")
def default_corpus():
    return corpus()


@pytest.fixture(scope="session")
def default_builds():
    return instrumented()
