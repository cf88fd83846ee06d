import numpy as np
import pytest

from tvt.model import TVTModel
from tvt.vit import ModelConfig

SMALL = ModelConfig(image_size=8, channels=1, patch_size=4, embed_dim=8, heads=2, depth=2, classes=3, mlp_ratio=2)


@pytest.fixture
def small_cfg():
    return SMALL


@pytest.fixture
def small_model():
    return TVTModel(SMALL, seed=0)


@pytest.fixture
def images():
    return np.random.default_rng(7).uniform(size=(4, 8, 8, 1))


def randomize(model, scale=0.5, seed=1):
    """Replace every parameter with O(scale) noise so that no path is degenerate."""
    rng = np.random.default_rng(seed)
    for name, p in model.parameters().items():
        if name.endswith(".g"):
            p.values = 1.0 + scale * rng.normal(size=p.shape)
        else:
            p.values = scale * rng.normal(size=p.shape)
    return model


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is not None and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS, key=lambda s: int(s.split("] ")[1].split(".")[0])):
            terminalreporter.write_line(line)
