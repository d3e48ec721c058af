import numpy as np
import pytest
import torch

from accident_anticipation.dataset import ClipPack
from accident_anticipation.model import AccidentModel, ModelConfig

ACCEPTANCE_LINES: list[str] = []


def random_clip(rng: np.random.Generator, T=None, N=None, d_v=None, d_o=None, positive=None, clip_id="c") -> ClipPack:
    """A valid clip with random contents; any unspecified size is drawn small."""
    T = T or int(rng.integers(1, 12))
    N = N or int(rng.integers(1, 6))
    d_v = d_v or int(rng.integers(1, 5))
    d_o = d_o or int(rng.integers(1, 5))
    positive = bool(rng.integers(0, 2)) if positive is None else positive
    mask = rng.random((T, N)) < 0.7
    lo = rng.random((T, N, 2)) * 0.5
    hi = lo + rng.random((T, N, 2)) * 0.5
    boxes = np.concatenate([lo, hi], axis=-1)
    involvement = (rng.random((T, N)) < 0.3) & mask if positive else np.zeros((T, N), bool)
    return ClipPack(
        clip_id=clip_id,
        fps=int(rng.integers(1, 31)),
        frame_features=rng.normal(size=(T, d_v)),
        object_features=rng.normal(size=(T, N, d_o)),
        boxes=boxes,
        object_mask=mask,
        label="positive" if positive else "negative",
        accident_frame=int(rng.integers(1, T + 1)) if positive else None,
        involvement=involvement,
    )


def tiny_config(**overrides) -> ModelConfig:
    base = dict(d_v=4, d_o=4, d_r=4, d_c=4, hidden=4, d_k=4, down_factor=2,
                n_iter_train=2, n_iter_test=2, noise_mode="none", dropout=0.0,
                branch_kernels=[3, 4, 5], k=2)
    base.update(overrides)
    return ModelConfig(**base)


def tiny_model(seed=0, dtype=torch.float64, **overrides) -> AccidentModel:
    torch.manual_seed(seed)
    return AccidentModel(tiny_config(**overrides)).to(dtype)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
