from __future__ import annotations

import numpy as np
import pytest

from fedzsl.data import AttributeTable, SyntheticSpec, generate_synthetic


@pytest.fixture(scope="session")
def small_ds():
    return generate_synthetic(
        SyntheticSpec(n_classes=12, n_seen=9, d_a=6, d_v=10, train_per_class=12, test_per_class=6, block_size=3, seed=3)
    )


@pytest.fixture
def tiny_table():
    rng = np.random.default_rng(11)
    return AttributeTable(np.arange(6), rng.normal(size=(6, 4)))


def pytest_terminal_summary(terminalreporter):
    from tests.test_acceptance import VERDICTS

    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
