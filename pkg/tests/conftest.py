import numpy as np
import pytest

from sbfwi.coefficients import group_elements
from sbfwi.mesh import MeshError, build_mesh

_REPORT = pytest.StashKey[list]()


def random_polygon(rng, m, scale=1e-2):
    """Vertices of a random polygon that is star-convex about its vertex centroid."""
    while True:
        gaps = rng.uniform(0.4, 1.0, m)
        ang = np.cumsum(gaps) / gaps.sum() * 2 * np.pi + rng.uniform(0, 2 * np.pi)
        r = rng.uniform(0.55, 1.0, m)
        pts = scale * np.column_stack([r * np.cos(ang), r * np.sin(ang)]) + rng.uniform(-1, 1, 2) * scale
        try:
            return build_mesh(pts, [list(range(m))])
        except MeshError:
            continue


def random_group(rng, m, scale=1e-2):
    mesh = random_polygon(rng, m, scale)
    return mesh, group_elements(mesh)[0]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def report(request):
    """Record one acceptance line; printed in the terminal summary."""
    lines = request.config.stash.setdefault(_REPORT, [])

    def add(criterion, passed, detail):
        line = f"criterion {criterion:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        lines.append((criterion, line))
        print(line)

    return add


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_REPORT, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
