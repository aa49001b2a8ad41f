import numpy as np
import pytest

from cpprl.gridworld import FINE_RESOLUTION, GridSpec, WorldMap, add_border


def box_world(side_m=4.8, res=FINE_RESOLUTION):
    return WorldMap.empty(side_m, res)


def random_world(rng, n=64, density=0.15, res=FINE_RESOLUTION):
    grid = (rng.random((n, n)) < density).astype(np.uint8)
    add_border(grid)
    return WorldMap(GridSpec(res, n, n), grid)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion (recorded via ``record_property``)."""
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            if getattr(rep, "when", "call") != "call":
                continue
            props = dict(rep.user_properties)
            if "criterion" in props:
                lines.append((props["criterion"], "PASS" if rep.passed else "FAIL", props.get("detail", "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for num, verdict, detail in sorted(lines, key=lambda t: int(t[0].split()[0])):
            terminalreporter.write_line(f"{verdict} criterion {num}: {detail}")
