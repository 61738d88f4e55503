import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from vtonflow.backbone import ModelConfig, TryOnDiT
from vtonflow.sprite_world import DatasetConfig, gen_assets, generate_dataset

settings.register_profile(
    "repo", max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow],
    derandomize=True,
)
settings.load_profile("repo")

TINY_DATA = DatasetConfig(seed=3, avatars=2, garments_per_type=2, motions=4, test_motions=1,
                          sets_per_avatar=3, test_scenes_per_avatar=1, frames=3)


@pytest.fixture(scope="session")
def corpus():
    return gen_assets(7, (2, 2, 3))


@pytest.fixture(scope="session")
def tiny_dataset():
    return generate_dataset(TINY_DATA)


@pytest.fixture(scope="session")
def tiny_highfps():
    from dataclasses import replace
    return generate_dataset(replace(TINY_DATA, fps_factor=3))


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return TryOnDiT(ModelConfig.tiny())


def perturb(model: torch.nn.Module, scale: float = 0.05, seed: int = 1):
    """Randomise every parameter so zero-initialised paths carry signal."""
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=g, dtype=p.dtype) * scale)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured value."""
    lines = []
    for outcome in ("passed", "failed"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", ()))
            if rep.when == "call" and "criterion" in props:
                lines.append((props["criterion"], "PASS" if rep.passed else "FAIL", props["detail"]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, verdict, detail in sorted(lines):
            terminalreporter.write_line(f"{verdict}  {name}: {detail}")
