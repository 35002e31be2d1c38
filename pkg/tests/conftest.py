"""Shared fixtures and helpers for the test suite."""

import numpy as np
import pytest

from mvar.model import ModelConfig, init_model
from mvar.scenegen import make_scene, pose_ring
from mvar.tokenizer import palette_codebook
from mvar.trainer import make_sample


def finite_difference(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at array x (64-bit)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b):
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return np.max(np.abs(a - b)) / denom


TINY = ModelConfig(d_model=16, n_layers=2, n_heads=2, codebook_size=512,
                   n_views=2, h=2, w=2)


@pytest.fixture(scope="session")
def tiny_state():
    return init_model(TINY, seed=0)


@pytest.fixture(scope="session")
def codebook():
    return palette_codebook()


@pytest.fixture(scope="session")
def tiny_samples(codebook):
    poses = pose_ring(TINY.n_views)
    return [make_sample(make_scene(s), poses, codebook, TINY.h, TINY.w)
            for s in range(3)]
