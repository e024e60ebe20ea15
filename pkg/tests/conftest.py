import time

import pytest

from sagan_ct.sharpness import DistillConfig, distill_sharpness_net, make_distillation_set

# desk-scale distillation shared by the sharpness and end-to-end checks
DESK_DISTILL_IMAGES = 512
DESK_DISTILL = DistillConfig(epochs=16, lr=1e-4, seed=0)

ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""
    return ACCEPTANCE_LINES


@pytest.fixture(scope="session")
def desk_sharpness_net():
    t0 = time.perf_counter()
    data = make_distillation_set(DESK_DISTILL_IMAGES, n=64, seed=0)
    net = distill_sharpness_net(data, DESK_DISTILL)
    net.distill_seconds = time.perf_counter() - t0
    return net


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
