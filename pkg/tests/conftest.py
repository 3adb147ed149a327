"""Shared fixtures: reduced-width configs, seeded models, oracle helpers."""

from __future__ import annotations

import numpy as np
import pytest
import torch

from siamtrack.config import RunConfig, tiny_config
from siamtrack.model import SiamTrackNet


@pytest.fixture()
def cfg() -> RunConfig:
    return tiny_config(0)


@pytest.fixture(scope="session")
def session_model() -> SiamTrackNet:
    """One reduced-width model shared by read-only tests."""
    torch.manual_seed(0)
    model = SiamTrackNet(tiny_config(0))
    model.eval()
    return model


@pytest.fixture()
def rng() -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(1234))


def softmax_np(x: np.ndarray, axis: int) -> np.ndarray:
    """Reference softmax, float64."""
    x = np.asarray(x, dtype=np.float64)
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def bilinear_np(feat: np.ndarray, x: float, y: float) -> np.ndarray:
    """Scalar bilinear lookup on (C, H, W) with zero padding, float64."""
    c, h, w = feat.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0
    out = np.zeros(c, dtype=np.float64)
    for dx, dy, wt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                       (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
        xi, yi = x0 + dx, y0 + dy
        if 0 <= xi <= w - 1 and 0 <= yi <= h - 1:
            out += wt * feat[:, yi, xi]
    return out


def max_abs_diff(a: torch.Tensor | np.ndarray,
                 b: torch.Tensor | np.ndarray) -> float:
    a = a.detach().cpu().numpy() if isinstance(a, torch.Tensor) else np.asarray(a)
    b = b.detach().cpu().numpy() if isinstance(b, torch.Tensor) else np.asarray(b)
    return float(np.max(np.abs(a - b)))
