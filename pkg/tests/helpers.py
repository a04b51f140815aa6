"""Small model/data builders shared by the test modules."""
import numpy as np

from btnet.check import generic_so2_point, randomize_output_layer
from btnet.datagen import GenConfig, generate_dataset
from btnet.models import Batch, ModelConfig, build_model

LADDER_FLAGS = [("vector", False, False), ("vector", True, False), ("vector", True, True),
                ("tensor", False, False), ("tensor", True, False), ("tensor", True, True)]


def small_model(model_class="tensor", bilinear=True, so2=True, seed=0, generic=True, **kw):
    """A narrow model; ``generic`` gives the zero logit layer and SO(2) maps random O(1) values."""
    cfg = dict(model_class=model_class, enable_bilinear=bilinear, enable_so2=so2, rep_width=8, latent_dim=8,
               hidden_width=16, seed=seed)
    cfg.update(kw)
    model = build_model(ModelConfig(**cfg))
    if generic:
        rng = np.random.default_rng(seed + 100)
        randomize_output_layer(model.store, rng)
        generic_so2_point(model.store, rng)
    return model


def events(n=20, seed=0, stream=3, **gen):
    return generate_dataset(GenConfig(seed=seed, **gen), n, stream=stream)


def batch_of(n=20, seed=0, **gen):
    return Batch.from_dataset(events(n, seed, **gen))
