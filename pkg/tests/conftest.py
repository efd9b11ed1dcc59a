import numpy as np
import pytest


def random_homography(rng):
    """Well-conditioned image->world homography for a ~1000 px image."""
    while True:
        a = rng.uniform(-0.05, 0.05, size=(2, 2)) + np.diag(rng.uniform(0.01, 0.04, 2))
        t = rng.uniform(-20, 20, size=2)
        g = rng.uniform(-2e-4, 2e-4, size=2)
        h = np.array([[a[0, 0], a[0, 1], t[0]],
                      [a[1, 0], a[1, 1], t[1]],
                      [g[0], g[1], 1.0]])
        pts = rng.uniform(0, 1000, size=(50, 2))
        w = np.column_stack([pts, np.ones(50)]) @ h[2]
        if abs(np.linalg.det(h)) > 1e-6 and np.all(w > 0.3):
            return h


def apply_h(h, pts):
    pts = np.asarray(pts, dtype=float)
    ph = np.column_stack([pts, np.ones(len(pts))]) @ h.T
    return ph[:, :2] / ph[:, 2:]


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture(scope="session")
def builtin_run():
    """Run each built-in scenario at most once per session."""
    from edgecloud import scenario as sc
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = sc.run(sc.load(sc.builtin_path(name)))
        return cache[name]
    return get


_ACCEPTANCE: list[str] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion."""
    lines = []

    def record(name, ok, detail=""):
        lines.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        return ok
    yield record
    if not lines:
        lines.append(f"FAIL  {request.node.name}: errored before its check ran")
    _ACCEPTANCE.extend(lines)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
