import time

import numpy as np
import pytest

from madopt.dataset import split, subspace_filter
from madopt.scenarios import PlantContext
from madopt.surrogate import TrainConfig, fit_surrogates
from madopt.synthetic import synth_plant_generate


@pytest.fixture(scope="session")
def plant():
    return synth_plant_generate(n=5000, seed=7)


@pytest.fixture(scope="session")
def plant_splits(plant):
    train, test = split(plant, 0.8, 0)
    calib, report = split(test, 0.5, 1)
    return train, calib, report


@pytest.fixture(scope="session")
def surrogates(plant_splits):
    """Default-configuration surrogates; ``elapsed`` records wall time including data generation."""
    t0 = time.perf_counter()
    data = synth_plant_generate(n=5000, seed=7)
    train, test = split(data, 0.8, 0)
    calib, _ = split(test, 0.5, 1)
    models = fit_surrogates(train, TrainConfig(), calib=calib)
    models.elapsed = time.perf_counter() - t0
    return models


@pytest.fixture(scope="session")
def ctx(surrogates, plant_splits):
    return PlantContext.build(surrogates, plant_splits[0])


@pytest.fixture(scope="session")
def subspace_models(plant):
    sub, holdout = subspace_filter(plant, 380.0)
    return fit_surrogates(sub, TrainConfig()), sub, holdout


@pytest.fixture(scope="session")
def quick_models():
    """Small, fast surrogates for plumbing tests."""
    data = synth_plant_generate(n=800, seed=3)
    train, test = split(data, 0.8, 0)
    calib, report = split(test, 0.5, 1)
    models = fit_surrogates(train, TrainConfig(epochs=300, learning_rate=1e-2), calib=calib)
    return models, train, report


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


SMALL_CONFIG = {
    "output_dir": "out",
    "seeds": {"data": 7, "split": 0, "train": 0, "solver": 0, "mc": 0, "shap": 0},
    "data": {"n": 1500},
    "train": {"epochs": 300},
    "ramp": {"ambient_cases": [26.0], "start": 250, "end": 300, "step": 50},
    "extrapolation": {"tau_grid": [2.0, 3.0]},
    "montecarlo": {"rounds": 5, "n_samples": 200},
    "explain": {"m": 50, "rows": 50, "global_m": 10},
    "optimize": {"setpoint": 300.0, "tau": 1.5},
    "n_starts": 4,
}

PIPELINE = ("gen-data", "stats", "train", "fit-envelope", "optimize", "ramp", "extrapolate",
            "montecarlo", "explain")


def run_pipeline(workdir):
    """Run every CLI stage on the small config; returns ``(run_dir, {command: exit_code})``."""
    import json

    from madopt.cli import main

    cfg = workdir / "config.json"
    cfg.write_text(json.dumps(SMALL_CONFIG))
    codes = {cmd: main([cmd, "--config", str(cfg)]) for cmd in PIPELINE}
    return workdir / "out", codes


@pytest.fixture(scope="session")
def cli_run(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run_a"))


CRITERIA_LINES = []


@pytest.fixture
def record_criterion():
    """Record one acceptance line; the lines are printed in the terminal summary."""

    def record(number, passed, detail):
        CRITERIA_LINES.append(f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
        print(CRITERIA_LINES[-1])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split(":")[0].split()[1])):
            terminalreporter.write_line(line)
