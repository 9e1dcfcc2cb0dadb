import sys

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from atlasground.atlas import Atlas, ShapeSpec, benchmark_atlas_spec, generate_synthetic_atlas

settings.register_profile("default", max_examples=60, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def ball_atlas():
    """40^3 volume, 1 mm voxels, one radius-5 ball at (20, 20, 20) (515 voxels)."""
    labels = ShapeSpec("ball", center=(20.0, 20.0, 20.0), radius=5.0).mask((40, 40, 40)).astype(np.uint16)
    return Atlas.from_labels(labels, 1.0, {1: ("ball", ("sphere",), "round")})


@pytest.fixture(scope="session")
def bench_atlas():
    return generate_synthetic_atlas(benchmark_atlas_spec(), 0)


@pytest.fixture
def two_box_atlas():
    """Two disjoint 3x3x3 boxes in a 10^3 volume at 2 mm."""
    labels = np.zeros((10, 10, 10), dtype=np.uint16)
    labels[0:3, 0:3, 0:3] = 1
    labels[6:9, 6:9, 6:9] = 2
    return Atlas.from_labels(labels, 2.0, {1: ("alpha", ("first",), "g"), 2: ("beta", ("second",), "g")})


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, 10):
        parts = sorted(k for k in results if k.split("-")[0].rstrip("abcdef") == str(n))
        if not parts:
            terminalreporter.write_line(f"CRITERION {n}: NOT RUN")
        elif parts == [str(n)]:
            terminalreporter.write_line(results[parts[0]])
        else:
            failed = [k for k in parts if ": FAIL" in results[k]]
            verdict = f"FAIL ({', '.join(failed)})" if failed else "PASS"
            terminalreporter.write_line(f"CRITERION {n}: {verdict}")
            for k in parts:
                terminalreporter.write_line("    " + results[k])
