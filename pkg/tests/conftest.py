import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from radpos.classifier import TrainConfig
from radpos.cohort import SignificanceRule
from radpos.phantom import PhantomConfig, simulate_cohort
from radpos.pipeline import fit_model, infer

GOLDEN = Path(__file__).parent / "golden"
FAST_TRAIN = TrainConfig(epochs=150, background_per_patient=1000)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def rule():
    return SignificanceRule(2)


@pytest.fixture(scope="session")
def small_cohort():
    """40 patients, half train / half test, seed 7."""
    return simulate_cohort(PhantomConfig(seed=7, n_patients=40))


@pytest.fixture(scope="session")
def small_model(small_cohort, rule):
    train = [r for r in small_cohort.records if r.split == "train"]
    return fit_model(train, small_cohort.bundles, "bpmr", rule, 3, FAST_TRAIN)


@pytest.fixture(scope="session")
def small_prob_maps(small_cohort, small_model):
    return infer(small_model, small_cohort.records, small_cohort.bundles, 3)


# ---------------------------------------------------------------------------
# one PASS/FAIL line per acceptance criterion in the terminal summary
# ---------------------------------------------------------------------------

_criteria: dict[str, list] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(name): test backs the named acceptance criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("acceptance")
    if mark is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        details = [v for k, v in item.user_properties if k == "detail"]
        _criteria.setdefault(mark.args[0], []).append((rep.passed, item.name, details))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, results in _criteria.items():
        ok = all(passed for passed, _, _ in results)
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  [{len(results)} test(s)]")
        for passed, test, details in results:
            if not passed:
                terminalreporter.write_line(f"        failed: {test}")
            for d in details:
                terminalreporter.write_line(f"        {d}")
