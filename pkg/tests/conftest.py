import numpy as np
import pytest

from tractkit.geometry import Streamline
from tractkit.tracts import Tractogram

_CRITERIA = {}
_MEASURED = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by a test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None:
        return
    number, title = mark.args
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        entry = _CRITERIA.setdefault(number, [title, True])
        entry[1] = entry[1] and rep.outcome == "passed"


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        title, ok = _CRITERIA[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {title}")
        for key, value in _MEASURED.get(number, []):
            terminalreporter.write_line(f"              {key} = {value}")


@pytest.fixture
def measure():
    """``measure(criterion, key, value)`` records a number for the acceptance summary."""

    def record(number, key, value):
        _MEASURED.setdefault(number, []).append((key, f"{value:.6g}" if isinstance(value, float) else value))

    return record


def random_walk(rng, n_points, start=None, step=1.0, turn=0.3):
    """Smooth random polyline with roughly ``step`` spacing."""
    p = np.zeros(3) if start is None else np.asarray(start, float)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    pts = [p]
    for _ in range(n_points - 1):
        d = d + turn * rng.normal(size=3)
        d /= np.linalg.norm(d)
        pts.append(pts[-1] + step * d)
    return np.array(pts)


def random_tractogram(rng, n, box=20.0, n_points=(5, 40), step=1.0, random_seeds=True):
    out = []
    for _ in range(n):
        k = int(rng.integers(n_points[0], n_points[1] + 1))
        pts = random_walk(rng, k, rng.uniform(0, box, 3), step)
        seed = int(rng.integers(k)) if random_seeds else 0
        out.append(Streamline(pts, seed))
    return Tractogram(out)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
