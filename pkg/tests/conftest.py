"""Shared fixtures: the procedural desk corpus and the desk-scale training
runs (session-scoped; the overfit checkpoints feed several test modules)."""

from __future__ import annotations

import numpy as np
import pytest

from partgen import training
from partgen.corpus import desk_spec, make_procedural_corpus
from partgen.pipeline import PipelineBundle, assemble_bundle

# model/config choices for the 8-sample desk runs (pinned seeds throughout)
BOX_OVERRIDES = {"gcn_widths": (64, 128), "decoder_widths": (128, 128)}
GAN_OVERRIDES = {"base_channels": 12}

BOX_STEPS = 2000


def box_desk_config(epochs: int = BOX_STEPS) -> training.TrainingConfig:
    return training.TrainingConfig(
        stage="box", learning_rate=3e-3, epochs=epochs, batch_size=8, lambda_max=1e-3, seed=0
    )


def mask_desk_config(epochs: int = 900) -> training.TrainingConfig:
    return training.TrainingConfig(
        stage="labelmap", learning_rate=2e-3, epochs=epochs, batch_size=8, lambda_max=1e-3, seed=0
    )


def gan_desk_config(epochs: int = 120, decay_epochs: int = 40) -> training.TrainingConfig:
    return training.TrainingConfig(
        stage="label2obj",
        learning_rate=1e-3,
        epochs=epochs,
        decay_epochs=decay_epochs,
        batch_size=8,
        seed=0,
    )


@pytest.fixture(scope="session")
def desk_corpus():
    spec = desk_spec(n_categories=1, n_parts=4, samples_per_category=8)
    samples, schemas = make_procedural_corpus(spec, np.random.default_rng(7))
    return samples, schemas, 4


@pytest.fixture(scope="session")
def trained_box(desk_corpus, tmp_path_factory):
    samples, schemas, p = desk_corpus
    out = tmp_path_factory.mktemp("stage_box")
    result = training.train_stage(
        "box", samples, samples, schemas, p, box_desk_config(), out, BOX_OVERRIDES
    )
    return result


@pytest.fixture(scope="session")
def trained_mask(desk_corpus, tmp_path_factory):
    samples, schemas, p = desk_corpus
    out = tmp_path_factory.mktemp("stage_labelmap")
    result = training.train_stage(
        "labelmap", samples, samples, schemas, p, mask_desk_config(), out
    )
    return result


@pytest.fixture(scope="session")
def trained_gan(desk_corpus, tmp_path_factory):
    samples, schemas, p = desk_corpus
    out = tmp_path_factory.mktemp("stage_label2obj")
    result = training.train_stage(
        "label2obj", samples, samples, schemas, p, gan_desk_config(), out, GAN_OVERRIDES
    )
    return result


@pytest.fixture(scope="session")
def trained_bundle_dir(desk_corpus, trained_box, trained_mask, trained_gan, tmp_path_factory):
    samples, schemas, _p = desk_corpus
    bundle = tmp_path_factory.mktemp("bundle_trained")
    assemble_bundle(
        bundle,
        trained_box.checkpoint_dir,
        trained_mask.checkpoint_dir,
        trained_gan.checkpoint_dir,
        schemas,
        samples,
    )
    return bundle


@pytest.fixture(scope="session")
def trained_bundle(trained_bundle_dir):
    return PipelineBundle.load(trained_bundle_dir)


@pytest.fixture(scope="session")
def untrained_bundle_dir(desk_corpus, tmp_path_factory):
    """Zero-epoch checkpoints: deterministic initialization, no training."""
    samples, schemas, p = desk_corpus
    root = tmp_path_factory.mktemp("stages_init")
    box = training.train_stage(
        "box", samples, samples, schemas, p, box_desk_config(epochs=0), root / "box", BOX_OVERRIDES
    )
    mask = training.train_stage(
        "labelmap", samples, samples, schemas, p, mask_desk_config(epochs=0), root / "labelmap"
    )
    gan = training.train_stage(
        "label2obj",
        samples,
        samples,
        schemas,
        p,
        gan_desk_config(epochs=0, decay_epochs=0),
        root / "label2obj",
        GAN_OVERRIDES,
    )
    bundle = tmp_path_factory.mktemp("bundle_init")
    assemble_bundle(
        bundle, box.checkpoint_dir, mask.checkpoint_dir, gan.checkpoint_dir, schemas, samples
    )
    return bundle


@pytest.fixture(scope="session")
def untrained_bundle(untrained_bundle_dir):
    return PipelineBundle.load(untrained_bundle_dir)
