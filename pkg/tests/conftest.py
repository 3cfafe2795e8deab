"""Session fixtures: synthetic datasets and disk-cached trained checkpoints.

The acceptance suite needs four trained variants (full model plus three
ablations). Training them takes minutes, so checkpoints are cached under
.cache/ keyed by a digest of the full recipe; editing any config in this
file invalidates the cache automatically.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
import pytest
import torch

torch.set_num_threads(1)

from clickloop.checkpoint import load_checkpoint, save_checkpoint
from clickloop.model import ModelConfig
from clickloop.synth import SynthConfig, generate_synthetic_dataset
from clickloop.train import TrainConfig, train

CACHE_DIR = Path(__file__).resolve().parent.parent / ".cache"

ACC_MODEL = ModelConfig(
    channel_dim=64,
    n_heads=4,
    n_human_queries=10,
    n_encoder_layers=2,
    n_human_layers=2,
    n_h2k_layers=3,
    patch_size=8,
)
ACC_TRAIN = TrainConfig(
    seed=0,
    epochs=90,
    batch_size=8,
    lr=2e-3,
    warmup_steps=200,
    lr_schedule="cosine",
    lr_final_ratio=0.05,
    error_sets=4,
)
ACC_GEOMETRY = dict(
    canvas=(128, 128), persons_max=2, figure_scale=(0.6, 0.85), occlude_prob=0.0
)
ACC_SYNTH_TRAIN = SynthConfig(seed=11, n_images=500, **ACC_GEOMETRY)
ACC_SYNTH_VAL = SynthConfig(seed=12, n_images=100, **ACC_GEOMETRY)


def _recipe_digest(train_cfg: TrainConfig) -> str:
    payload = json.dumps(
        [asdict(ACC_MODEL), asdict(train_cfg), asdict(ACC_SYNTH_TRAIN)],
        sort_keys=True,
        default=str,
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@pytest.fixture(scope="session")
def acc_train_dataset():
    return generate_synthetic_dataset(ACC_SYNTH_TRAIN)


@pytest.fixture(scope="session")
def acc_val_dataset():
    return generate_synthetic_dataset(ACC_SYNTH_VAL)


_TRAIN_META: dict[str, dict] = {}


def _trained_variant(name: str, dataset, use_error_model: bool, use_loop: bool):
    import dataclasses

    cfg = dataclasses.replace(ACC_TRAIN, use_error_model=use_error_model, use_loop=use_loop)
    CACHE_DIR.mkdir(exist_ok=True)
    path = CACHE_DIR / f"acc-{name}-{_recipe_digest(cfg)}.pt"
    if path.exists():
        model, _, meta = load_checkpoint(path)
        _TRAIN_META[name] = meta
        return model
    t0 = time.perf_counter()
    result = train(dataset, cfg, model_cfg=ACC_MODEL)
    meta = {"variant": name, "train_seconds": time.perf_counter() - t0}
    save_checkpoint(path, result.model, dataset.skeleton, meta=meta)
    _TRAIN_META[name] = meta
    return result.model


@pytest.fixture(scope="session")
def model_full(acc_train_dataset):
    return _trained_variant("full", acc_train_dataset, True, True)


@pytest.fixture(scope="session")
def model_no_error(acc_train_dataset):
    return _trained_variant("no-error", acc_train_dataset, False, True)


@pytest.fixture(scope="session")
def model_no_loop(acc_train_dataset):
    return _trained_variant("no-loop", acc_train_dataset, True, False)


@pytest.fixture(scope="session")
def model_neither(acc_train_dataset):
    return _trained_variant("neither", acc_train_dataset, False, False)


@pytest.fixture(scope="session")
def train_seconds():
    """Accessor for the wall time a cached variant took to train."""

    def get(name: str) -> float:
        return float(_TRAIN_META[name]["train_seconds"])

    return get
