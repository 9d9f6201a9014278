import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("aef", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("aef")


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def toy32():
    """The default asymmetric ensemble at 32x32, pretrained 500 steps (shared by slow tests)."""
    from aef.experiments import toy_config
    from aef.harness import build_ensemble

    cfg = toy_config(size=32)
    t0 = time.time()
    ensemble, info = build_ensemble(cfg)
    info["build_seconds"] = time.time() - t0
    return cfg, ensemble, info


@pytest.fixture(scope="session")
def toy16():
    """A cheaper 16x16 variant for the sweep-style acceptance checks."""
    from aef.experiments import toy_config
    from aef.harness import build_ensemble

    cfg = toy_config(size=16, n_train=32, pretrain_steps=300)
    ensemble, info = build_ensemble(cfg)
    return cfg, ensemble, info


ACCEPTANCE = []


@pytest.fixture(scope="session")
def accept(pytestconfig):
    """Record one pass/fail line per acceptance criterion; echoed again in the terminal summary."""
    reporter = pytestconfig.pluginmanager.get_plugin("terminalreporter")

    def record(num: int, name: str, ok: bool, detail: str = ""):
        line = f"[criterion {num}] {'PASS' if ok else 'FAIL'}  {name}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE.append((num, line))
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
