import numpy as np
import pytest

from alibi_surgeon.model import ModelConfig, init_model


@pytest.fixture
def tiny_config():
    return ModelConfig(n_layers=2, n_heads=4, d_model=16, max_seq_len=32)


@pytest.fixture
def tiny_model(tiny_config):
    return init_model(tiny_config, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: int(k[1:])):
        ok, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{key} {'PASS' if ok else 'FAIL'}: {detail}")
