import numpy as np
import pytest

from sfdecomp.dataset import TableSchema, load_table
from sfdecomp.synthetic import DgpConfig, generate

SCHEMA = TableSchema(unit="unit", cluster="branch", period="period")


def csv_table(text, schema=SCHEMA, **kw):
    return load_table(text.encode("utf-8"), schema, **kw)


@pytest.fixture(scope="session")
def small_cfg():
    return DgpConfig(n=800, n_clusters=20, seed=11)


@pytest.fixture(scope="session")
def small_table(small_cfg):
    return generate(small_cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the session summary."""

    def record(number: int, title: str, passed: bool, detail: str):
        ACCEPTANCE_LINES[number] = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
        print(ACCEPTANCE_LINES[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
