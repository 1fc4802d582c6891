from __future__ import annotations

import sys
import time
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

SESSION_START = time.monotonic()
# criterion number -> (passed, detail); filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_collection_modifyitems(config, items):
    # the suite-runtime criterion must run after everything else
    last = [it for it in items if it.name == "test_criterion_12_suite_runtime"]
    items[:] = [it for it in items if it not in last] + last


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
    total = time.monotonic() - SESSION_START
    terminalreporter.write_line(f"session wall time {total:.1f} s")


@pytest.fixture(scope="session")
def trained_shapes16():
    """Default-config MLP trained once per session on shapes16."""
    from snredit.flow import MlpFlowModel, TrainConfig, train
    from snredit.scenarios import get_scenario

    sc = get_scenario("shapes16")
    data = sc.generate(0)
    model, losses, _ = train(MlpFlowModel(sc.latent_shape, sc.num_classes, seed=0), data, TrainConfig())
    return sc, model, data, losses
