import numpy as np
import pytest

from vlfuse import tensor as T
from vlfuse.data import WorldSpec, build_world
from vlfuse.encoders import EncoderConfig
from vlfuse.model import ModelConfig
from vlfuse.trainer import RunConfig, TrainConfig


@pytest.fixture
def rng():
    return T.make_rng(1234)


@pytest.fixture
def small_cfg():
    return EncoderConfig(d=16, heads=2, layers=2, ffn_mult=2)


@pytest.fixture(scope="session")
def world():
    return build_world(WorldSpec())


def tiny_run(**train) -> RunConfig:
    """A small, fast configuration for loop-level tests."""
    model = ModelConfig(d=16, heads=2, video_layers=2, text_layers=2, fusion_layers=2, fusion_heads=2,
                        num_queries=4, ffn_mult=2, d_in=16)
    spec = WorldSpec(n_frames=2, n_patches=4, d_in=16)
    defaults = dict(batch_size=8, steps=10, eval_size=20, mcm_eval_size=20, corpus_size=64)
    defaults.update(train)
    return RunConfig(spec, model, TrainConfig(**defaults))


def rel_close(a, b, tol):
    a, b = np.asarray(a), np.asarray(b)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)
    return bool(np.all(np.abs(a - b) / scale <= tol))
