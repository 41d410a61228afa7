import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from taskmod.harness.data import DataSettings
from taskmod.model import ModelConfig

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_config():
    return ModelConfig(n_layers=4, d_model=16, n_heads=4, d_ffn=24, text_vocab=8, image_vocab=12, max_seq=24)


@pytest.fixture
def small_data():
    return DataSettings(n_image=8, n_text=4, batch_size=3)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion (tagged via record_property)."""
    lines = {}
    for key in ("passed", "failed"):
        for rep in terminalreporter.stats.get(key, []):
            props = dict(getattr(rep, "user_properties", ()))
            if rep.when == "call" and "criterion" in props:
                lines[props["criterion"]] = f"{'PASS' if rep.passed else 'FAIL'}  [{props['criterion']:>2}] {props['title']}"
    if lines:
        terminalreporter.section("acceptance criteria")
        for k in sorted(lines):
            terminalreporter.write_line(lines[k])
