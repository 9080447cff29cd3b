import numpy as np
import pytest
from hypothesis import HealthCheck, settings
from hypothesis import strategies as st

from fi3det.geometry import Box3

settings.register_profile("fi3det", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("fi3det")

coord = st.floats(-3, 3, allow_nan=False, allow_infinity=False)
extent = st.floats(0.1, 2.5, allow_nan=False, allow_infinity=False)
angle = st.floats(-np.pi, np.pi, allow_nan=False, allow_infinity=False)


@st.composite
def boxes(draw, yawed=True):
    c = [draw(coord), draw(coord), draw(st.floats(-1, 1))]
    s = [draw(extent), draw(extent), draw(extent)]
    return Box3(c, s, draw(angle) if yawed else 0.0)


def random_box(rng, spread=1.0, yawed=True):
    return Box3(rng.uniform(-spread, spread, 3), rng.uniform(0.2, 2.0, 3),
                rng.uniform(-np.pi, np.pi) if yawed else 0.0)


def mc_iou(a, b, rng, n=1_000_000):
    """Volumetric Monte-Carlo IoU: sample uniformly inside ``a`` and
    count how many land in ``b`` (rotate-then-compare, no shared code)."""
    u = rng.uniform(-0.5, 0.5, (n, 3)) * a.size
    ca, sa = np.cos(a.yaw), np.sin(a.yaw)
    world = np.column_stack([ca * u[:, 0] - sa * u[:, 1], sa * u[:, 0] + ca * u[:, 1], u[:, 2]]) + a.center
    rel = world - b.center
    cb, sb = np.cos(-b.yaw), np.sin(-b.yaw)
    local = np.column_stack([cb * rel[:, 0] - sb * rel[:, 1], sb * rel[:, 0] + cb * rel[:, 1], rel[:, 2]])
    inside = np.all(np.abs(local) <= b.size / 2, axis=1)
    inter = inside.mean() * a.volume
    return inter / (a.volume + b.volume - inter)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_CRITERIA: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one acceptance verdict, print it, then assert it."""
    def check(n: int, ok: bool, detail: str):
        line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
        _CRITERIA[n] = line
        print(line)
        assert ok, line
    return check


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(_CRITERIA[n])
