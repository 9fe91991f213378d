import os
from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=400)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ROOT = Path(__file__).resolve().parents[1]
DESK_WEIGHTS = ROOT / "artifacts" / "desk_n9.pnpw"


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def desk_model():
    """Trained (params, lm, meta) from the desk run; trains it if the file is missing."""
    from pnpnet.io import load_weights, save_state
    from pnpnet.synthgen import ScenarioConfig
    from pnpnet.trainer import TrainConfig, train

    if not DESK_WEIGHTS.exists():
        tc, sc = TrainConfig(), ScenarioConfig()
        DESK_WEIGHTS.parent.mkdir(parents=True, exist_ok=True)
        train(tc, sc, checkpoint=lambda st: save_state(DESK_WEIGHTS, st, tc, sc))
    params, lm, meta, _ = load_weights(DESK_WEIGHTS)
    return params, lm, meta


def pytest_terminal_summary(terminalreporter):
    lines = []
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            lines += [v for k, v in getattr(rep, "user_properties", []) if k == "criterion"]
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
