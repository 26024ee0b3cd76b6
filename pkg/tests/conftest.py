from __future__ import annotations

import numpy as np
import pytest

from erasure_fl.data import FederatedDataset, gen_linear, gen_linear_devices, partition_noniid_intervals
from erasure_fl.model import LossSpec

_ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")


@pytest.fixture
def criterion():
    """Record one acceptance line, then assert it."""

    def record(name: str, ok: bool, detail: str) -> None:
        _ACCEPTANCE.append((name, bool(ok), detail))
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, f"{name}: {detail}"

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def linear_fed(rng) -> FederatedDataset:
    return gen_linear_devices(3, 60, [1.0, 2.0, 3.0], [0.0, 1.0, -1.0], 0.5, (-3.0, 3.0), rng)


@pytest.fixture
def quad_fed(rng) -> FederatedDataset:
    return partition_noniid_intervals((-2.0, 2.0), 6, 40, 0.3, rng)


@pytest.fixture
def mse_spec() -> LossSpec:
    return LossSpec()


@pytest.fixture
def line_ds(rng):
    return gen_linear(50, 2.0, 1.0, 0.3, (-1.0, 1.0), rng)
