"""Shared fixtures. Trained models are session-scoped because training is
the expensive part of the suite; everything downstream reuses them."""

import numpy as np
import pytest

from spikerecon import dataset as ds
from spikerecon import diffusion as df
from spikerecon import hvae as hv
from spikerecon import pipeline as pl


REGION_INFO = {"VISp": 0.6, "VISl": 1.0, "VISpm": 0.4, "VISam": 0.3,
               "VISal": 0.5, "VISrl": 0.0}


def make_movie(F=120, n_classes=4, seed=0):
    return ds.synth_movie(F, 32, 32, 1, n_classes, seed=seed)


def make_responses(movie, seed=1, units=8, base_rate=5.0):
    cfg = ds.EncodingModelConfig(base_rate=base_rate,
                                 region_information=REGION_INFO,
                                 filter_scale=40.0, seed=seed)
    rec = ds.synth_spikes(movie, cfg, n_units_per_region=units,
                          session_id=f"s{seed}")
    return ds.bin_spikes(rec, movie, 0.03)


@pytest.fixture(scope="session")
def toy_movie():
    return make_movie()


@pytest.fixture(scope="session")
def toy_responses(toy_movie):
    return make_responses(toy_movie)


@pytest.fixture(scope="session")
def micro_hvae_config():
    # 2x2 image, two tiny layers: big enough to exercise every code path,
    # small enough for finite differences
    return hv.HvaeConfig(image_shape=(2, 2, 1), layer_widths=(2, 3),
                         enc_hidden=4, state_dim=4)


@pytest.fixture(scope="session")
def trained_hvae(toy_movie):
    model = hv.init_hvae(hv.HvaeConfig(), seed=0)
    hv.train_hvae(model, toy_movie.frames[:96], lr=5e-3, steps=3000,
                  batch=16, seed=0)
    return model


@pytest.fixture(scope="session")
def trained_ae(toy_movie):
    model = df.init_latent_ae(df.LatentAeConfig(hidden=256), seed=0)
    df.train_latent_ae(model, toy_movie.frames[:96], lr=2e-3, steps=6000,
                       batch=32, seed=0)
    return model


@pytest.fixture(scope="session")
def trained_semantic(toy_movie):
    return pl.fit_semantic_model(toy_movie, pl.SemanticConfig(seed=0))


@pytest.fixture(scope="session")
def diffusion_bundle(toy_movie, trained_semantic):
    split = pl.frame_split(toy_movie.frame_count)
    return pl.train_diffusion_models(toy_movie, trained_semantic, split,
                                     pl.DiffusionTrainConfig(seed=0))
