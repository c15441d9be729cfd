import numpy as np
import pytest
from hypothesis import settings

from hsidiff.patches import Patch3D, PatchSet

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def unit_patch():
    """A 7x7x20 patch with values in [0, 1]."""
    values = np.random.default_rng(7).uniform(0.0, 1.0, (7, 7, 20)).astype(np.float32)
    return Patch3D(values, 1)


@pytest.fixture
def unit_patches():
    values = np.random.default_rng(11).uniform(0.0, 1.0, (6, 7, 7, 20)).astype(np.float32)
    return PatchSet.from_array(values, [0, 1, 2, 0, 1, 2], "unit")


@pytest.fixture
def fixtures_dir():
    from pathlib import Path

    return Path(__file__).parent / "fixtures"


ACCEPTANCE = []


@pytest.fixture
def criterion(request):
    """Context manager recording one PASS/FAIL line per acceptance criterion."""
    import contextlib
    import time

    @contextlib.contextmanager
    def record(number, title, budget=None):
        start = time.perf_counter()

        def report(ok, note=""):
            elapsed = time.perf_counter() - start
            line = (f"criterion {number}: {'PASS' if ok else 'FAIL'}  {title}{note}  "
                    f"[{elapsed:.2f} s]")
            ACCEPTANCE.append(line)
            print(line)
            return line

        try:
            yield
        except BaseException:
            report(False)
            raise
        elapsed = time.perf_counter() - start
        if budget is not None and elapsed >= budget:
            pytest.fail(report(False, f" (over the {budget:g} s budget)"))
        report(True)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
