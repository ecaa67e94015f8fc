import numpy as np
import pytest
import torch

from otfseg.data import synth_sample
from otfseg.dpg import DPGConfig, build_dpg
from otfseg.inference import TestInstance
from otfseg.model import ArchConfig, build_model

torch.set_num_threads(1)

TINY_DPG = DPGConfig(base_channels=4)


def tiny_samples(n, size=(32, 32), k=2, seed=0):
    rng = np.random.default_rng(seed)
    pairs = [synth_sample(size, k, rng) for _ in range(n)]
    return np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])


@pytest.fixture
def tiny_dpg():
    return build_dpg(TINY_DPG, seed=0)


@pytest.fixture
def tiny_adaptive():
    return build_model(ArchConfig(2, 1, 2, 4, "adabn", TINY_DPG.code_channels), seed=0)


@pytest.fixture
def tiny_plain():
    return build_model(ArchConfig(2, 1, 2, 4, "bn"), seed=0)


@pytest.fixture
def tiny_test_set():
    images, masks = tiny_samples(12, seed=5)
    return [TestInstance(im, f"t{i:03d}", m) for i, (im, m) in enumerate(zip(images, masks))]


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
