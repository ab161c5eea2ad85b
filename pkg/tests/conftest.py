from __future__ import annotations

import numpy as np
import pytest

from actguard import cli, io
from actguard.conformal import ConformalCalibration
from actguard.quantile import QuantileModel
from actguard.smd import Detector

# Filled by tests/test_acceptance.py; printed once at the end of the session.
ACCEPTANCE_RESULTS: dict = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[key]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def default_config():
    return io.ExperimentConfig()


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory, default_config):
    """Default synthetic dataset plus trained artifacts, built once per session."""
    root = tmp_path_factory.mktemp("pipeline")
    data, art = root / "data", root / "artifacts"
    assert cli.cmd_generate(default_config, data) == 0
    assert cli.cmd_train_calibrate(default_config, data, art) == 0
    model, calibration, detector = cli.load_artifacts(art)
    return {
        "root": root, "data": data, "artifacts": art, "config": default_config,
        "model": model, "calibration": calibration, "detector": detector,
        "train_report": io.read_json(art / "train_report.json"),
    }


__all__ = ["ACCEPTANCE_RESULTS", "ConformalCalibration", "Detector", "QuantileModel"]
