import numpy as np
import pytest

from planfl.config import load_config
from planfl.dataset import DomainDataset, generate_domain, random_domain_specs
from planfl.encoder import init_backbone, init_prompts


@pytest.fixture(scope="session")
def tiny_cfg():
    # L=2, d_text=8, d_vis=12, m=2, C=3, 8x8 images in 4x4 patches
    return load_config("tiny")


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return tiny_cfg.model


@pytest.fixture()
def backbone(tiny_model):
    return init_backbone(tiny_model, seed=0)


@pytest.fixture()
def prompts(tiny_model):
    return init_prompts(tiny_model, seed=1, std=0.3)


@pytest.fixture(scope="session")
def tiny_domain(tiny_model) -> DomainDataset:
    spec = random_domain_specs(1, seed=5, samples_per_class=6, channels=tiny_model.channels)[0]
    return generate_domain(spec, 0, tiny_model)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


_CRITERIA: list[str] = []


@pytest.fixture()
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"{'PASS' if ok else 'FAIL'} criterion {number}: {title}" + (f" ({detail})" if detail else "")
        _CRITERIA.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in _CRITERIA:
            terminalreporter.write_line(line)
