import numpy as np
import pytest

from vitalgate.synthgen import GeneratorConfig, generate
from vitalgate.timeseries import AnnotationInterval, ChannelKind, PatientRecord


def make_record(pid="A", n=400, seed=0, annotations=()):
    rng = np.random.default_rng(seed)
    chans = {
        ChannelKind.HR: 80 + rng.normal(0, 3, n),
        ChannelKind.SysABP: 120 + rng.normal(0, 4, n),
        ChannelKind.DiaABP: 70 + rng.normal(0, 3, n),
        ChannelKind.SysICP: 12 + rng.normal(0, 1, n),
    }
    return PatientRecord(pid, chans, tuple(AnnotationInterval(*a) for a in annotations))


@pytest.fixture(scope="session")
def small_cohort():
    """Six short synthetic patients, shared by the slower integration tests."""
    return generate(GeneratorConfig(seed=7, n_patients=6, record_length=4000))


_ACCEPTANCE: list[tuple[int, str, bool, str]] = []


@pytest.fixture
def verdict():
    """Record one acceptance line and hand back the boolean for the assert."""

    def record(number, title, ok, detail):
        _ACCEPTANCE.append((number, title, bool(ok), detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, ok, detail in sorted(_ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} [{number:2d}] {title}: {detail}")
