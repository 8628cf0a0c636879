import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from psselect.stack import InterferogramStack

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_stack(n=3, h=12, w=10, seed=0) -> InterferogramStack:
    rng = np.random.default_rng(seed)
    return InterferogramStack(
        phase=rng.uniform(-3.1, 3.1, size=(n, h, w)),
        amplitude=rng.uniform(0.0, 3.0, size=(n, h, w)),
        perp_baseline=rng.uniform(100, 400, size=(n, h, w)),
        k_factor=np.full((h, w), 4e-4),
        acquisition_days=tuple(12.0 * (i + 1) for i in range(n)),
    )


@pytest.fixture
def stack():
    return random_stack()


# ---------------------------------------------------------------- acceptance report

_ACCEPTANCE = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None or rep.when not in ("setup", "call"):
        return
    num, title = mark.args
    if rep.when == "setup" and rep.passed:
        return
    measured = dict(item.user_properties).get("measured", "")
    _ACCEPTANCE[num] = (title, rep.passed, measured)


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_ACCEPTANCE):
        title, ok, measured = _ACCEPTANCE[num]
        line = f"{'PASS' if ok else 'FAIL'} {num:2d} {title}"
        terminalreporter.write_line(f"{line}: {measured}" if measured else line)
