import pytest
import torch

from vptoken.model import ModelConfig, ToyMLLM
from vptoken.vocab import extend_vocabulary

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def vocab():
    return extend_vocabulary(256, 8)


@pytest.fixture(scope="session")
def small_config():
    return ModelConfig(d_h=32, d_v=32, d_z=24, lm_layers=2, lm_heads=2, enc_layers=1, enc_heads=2)


@pytest.fixture()
def small_model(small_config):
    m = ToyMLLM(small_config)
    m.eval()
    return m


_ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def acceptance():
    """``acceptance(n, ok, detail)`` records the verdict for criterion ``n``."""

    def record(n: int, ok: bool, detail: str) -> None:
        _ACCEPTANCE[n] = (bool(ok), detail)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
