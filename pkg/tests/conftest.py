import numpy as np
import pytest

from eksft import model as mdl


@pytest.fixture
def tiny_config():
    return mdl.ModelConfig(vocab_size=11, d_model=16, n_layers=2, n_heads=2, context_len=8, seed=3)


def random_log_probs(rng: np.random.Generator, v: int, scale: float = 2.0) -> np.ndarray:
    z = rng.normal(0.0, scale, size=v)
    z -= z.max()
    return z - np.log(np.exp(z).sum())


def random_batch(rng: np.random.Generator, cfg: mdl.ModelConfig, batch: int = 2, length: int = 6):
    ids = rng.integers(0, cfg.vocab_size, size=(batch, length))
    ids[:, 0] = 1
    targets = rng.integers(0, cfg.vocab_size, size=(batch, length))
    valid = rng.random((batch, length)) < 0.8
    valid[:, 1] = True  # at least one valid token per sequence
    return ids, targets, valid


def conditioned_point(cfg: mdl.ModelConfig, seed: int) -> mdl.ParameterSet:
    """Random weights at a scale where finite differences are well behaved."""
    params = mdl.init(cfg)
    for name in params.tensors:
        if params.tensors[name].ndim == 2:
            params.tensors[name] *= 10.0
    return params
