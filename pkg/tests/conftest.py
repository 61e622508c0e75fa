import numpy as np
import pytest

from capembed.capability import MinHasher, cluster_assign
from capembed.dataio import GeneratorConfig, generate_synthetic

_CRITERIA = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, text): acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when != "call":
        return
    number, text = marker.args
    _CRITERIA.append((number, text, item.name, call.excinfo is None))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    by_number = {}
    for number, text, name, ok in _CRITERIA:
        entry = by_number.setdefault(number, [text, True, []])
        entry[1] &= ok
        entry[2].append(f"{name}:{'ok' if ok else 'FAILED'}")
    for number in sorted(by_number):
        text, ok, parts = by_number[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {text} ({', '.join(parts)})")


@pytest.fixture(scope="session")
def small_synthetic():
    cfg = GeneratorConfig(n_archetypes=6, samples_per_archetype=20, d=16, n_capabilities=24,
                          caps_per_archetype=6, flip_prob=0.02)
    return generate_synthetic(cfg, seed=3)


@pytest.fixture(scope="session")
def small_clusters(small_synthetic):
    train, _ = small_synthetic
    return cluster_assign(MinHasher(), train)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
