from __future__ import annotations

from datetime import datetime, timedelta, timezone
from pathlib import Path

import pytest

from vistrends.corpus import ImageRef, ImageSequence
from vistrends.gateway import AnalystGateway, PlantedChange, SyntheticOracle

FIXTURES = Path(__file__).parent / "fixtures"
T0 = datetime(2015, 1, 1, tzinfo=timezone.utc)


def make_sequence(loc: str, n: int = 10, lat: float = 40.0, lon: float = -74.0, day0: int = 0) -> ImageSequence:
    images = [
        ImageRef(f"{loc}-{i:02d}", f"synth://{loc}/{i:02d}.jpg", T0 + timedelta(days=day0 + 30 * i), lat, lon, 90.0)
        for i in range(n)
    ]
    return ImageSequence(loc, lat, lon, images)


def plant(oracle: SyntheticOracle, seq: ImageSequence, after_index: int, before: str, after: str, **kw) -> PlantedChange:
    """Plant a change between 1-based images ``after_index`` and ``after_index + 1``."""
    a, b = seq.images[after_index - 1].image_uri, seq.images[after_index].image_uri
    pc = PlantedChange(a, b, before, after, **kw)
    oracle.plant_change(pc)
    return pc


def make_gateway(backend, **kw) -> AnalystGateway:
    kw.setdefault("sleep", lambda s: None)
    return AnalystGateway(backend, **kw)


@pytest.fixture
def oracle():
    return SyntheticOracle(dim=32, seed=0)


@pytest.fixture
def fixture_text():
    return lambda name: (FIXTURES / name).read_text(encoding="utf-8")


# acceptance reporting: tests marked ``acceptance(number, title)`` get one
# PASS/FAIL line each in the terminal summary

ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): numbered acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None or not (rep.when == "call" or rep.failed):
        return
    number, title = marker.args
    detail = dict(item.user_properties).get("detail", "")
    if rep.failed and not detail:
        detail = str(call.excinfo.value).splitlines()[0] if call.excinfo else "error"
    ACCEPTANCE[number] = (title, rep.passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} {number:>2}. {title}: {detail}")
