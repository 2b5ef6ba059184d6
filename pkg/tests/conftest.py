import numpy as np
import pytest

from nirs_speech.epoching import LABELS, LabeledDataset
from nirs_speech.study import StudyConfig, run_study


def random_dataset(rng, d, per_class, shift=1.0, classes=LABELS):
    X, y = [], []
    for k, lab in enumerate(classes):
        mu = shift * rng.standard_normal(d)
        X.append(mu + rng.standard_normal((per_class[k] if hasattr(per_class, "__len__") else per_class, d)))
        y += [lab] * len(X[-1])
    return LabeledDataset(np.vstack(X), tuple(y))


@pytest.fixture(scope="session")
def high_snr_report():
    return run_study(StudyConfig(scenario="high-snr", seed=0))


@pytest.fixture(scope="session")
def realistic_report():
    return run_study(StudyConfig(scenario="realistic", seed=1))


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
