"""Shared fixtures plus a per-criterion summary for the acceptance tests."""

import pytest

from bpr.synth import SynthConfig, generate_synthetic_dataset

ACCEPTANCE_CRITERIA = {
    "test_gradient_correctness": "gradient correctness",
    "test_loss_identities": "loss identities",
    "test_metric_oracle": "metric oracle",
    "test_ict_laws": "ICT laws",
    "test_end_to_end_retrieval": "end-to-end synthetic retrieval",
    "test_ablation_directionality": "ablation directionality",
    "test_protocol_mechanics": "protocol mechanics",
    "test_determinism": "determinism",
}

_acceptance_results: dict[str, str] = {}


@pytest.fixture(scope="session")
def small_dataset():
    config = SynthConfig(n_passages=40, n_subjects=2, seed=1)
    return generate_synthetic_dataset(config)


def pytest_runtest_logreport(report):
    if report.when != "call" or "test_acceptance" not in report.nodeid:
        return
    name = report.nodeid.rsplit("::", 1)[-1]
    if name in ACCEPTANCE_CRITERIA:
        _acceptance_results[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance_results:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for name, label in ACCEPTANCE_CRITERIA.items():
        outcome = _acceptance_results.get(name, "NOT RUN")
        terminalreporter.write_line(f"ACCEPTANCE {label}: {outcome}")
