from dataclasses import replace

import numpy as np
import pytest

from wmmoe.corpus import SynthConfig, generate_synthetic
from wmmoe.model import ModelConfig
from wmmoe.runtime.data import prepare_scenes

TINY = ModelConfig(d_emb=8, heads=2, n_modes=2, n_experts=2, n_blocks=2, expert_hidden=8, history=5,
                   backbone_width=8, d_state=2)


@pytest.fixture(scope="session")
def raw_scenes():
    return generate_synthetic(SynthConfig(), 24, 7)


@pytest.fixture(scope="session")
def scenes(raw_scenes):
    return prepare_scenes(raw_scenes)


@pytest.fixture(scope="session")
def small_bev_scenes(raw_scenes):
    return prepare_scenes(raw_scenes[:6], bev_shape=(3, 16, 16))


@pytest.fixture
def gen():
    return np.random.default_rng(1234)


def tiny_config(**kw) -> ModelConfig:
    return replace(TINY, **kw)


# acceptance criterion number -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, str]] = {}
N_CRITERIA = 11


def pytest_terminal_summary(terminalreporter):
    if not getattr(terminalreporter.config, "_acceptance_items", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, N_CRITERIA + 1):
        ok, detail = ACCEPTANCE.get(n, (False, "no result recorded"))
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")


def pytest_collection_modifyitems(config, items):
    config._acceptance_items = [i for i in items if "test_acceptance.py" in i.nodeid]
