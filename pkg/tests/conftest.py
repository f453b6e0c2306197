import hashlib
import os
from pathlib import Path

import numpy as np
import pytest
import torch

from soundpatch.config import RunConfig
from soundpatch.scenes import build_dataset, generate_scene, load_split

torch.set_num_threads(int(os.environ.get("SOUNDPATCH_THREADS", "2")))

CACHE_DIR = Path(__file__).parent / "_cache"


def cache_path(tag: str, cfg: RunConfig) -> Path:
    CACHE_DIR.mkdir(exist_ok=True)
    key = hashlib.sha256(f"{tag}-{cfg.config_hash()}".encode()).hexdigest()[:12]
    return CACHE_DIR / f"{tag}-{key}.ckpt"


def micro_config() -> RunConfig:
    cfg = RunConfig()
    cfg.data.n_train = 16
    cfg.data.n_test = 4
    cfg.vae.epochs = 2
    cfg.encoder.epochs = 2
    cfg.diffusion.train_steps = 10
    cfg.diffusion.ddim_steps = 50
    return cfg


def tiny_config() -> RunConfig:
    """The acceptance-scale config: 4 classes, 512 train scenes."""
    cfg = RunConfig()
    cfg.data.n_train = 512
    cfg.data.n_test = 48
    return cfg


def make_scenes(cfg: RunConfig, split: str, n: int, seed0: int) -> list:
    return [generate_scene(seed0 + i, cfg.data, scene_id=f"{split}-{i:05d}")
            for i in range(n)]


def train_pipeline(cfg: RunConfig, tag: str):
    """Train (or load the disk-cached) pipeline for the given config."""
    from soundpatch.pipeline import (Pipeline, train_diffusion_stage,
                                     train_encoders_stage, train_vae_stage)
    path = cache_path(tag, cfg)
    if path.exists():
        return Pipeline.load(path)
    pipe = Pipeline(cfg)
    train = make_scenes(cfg, "train", cfg.data.n_train, 1000)
    train_vae_stage(pipe, train)
    train_encoders_stage(pipe, train)
    train_diffusion_stage(pipe, train)
    pipe.save(path, stage="full")
    return pipe


@pytest.fixture(scope="session")
def micro_pipeline():
    return train_pipeline(micro_config(), "micro")


@pytest.fixture(scope="session")
def micro_scenes():
    cfg = micro_config()
    return make_scenes(cfg, "test", cfg.data.n_test, 900000)


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("dataset")
    cfg = RunConfig()
    cfg.data.n_train = 8
    cfg.data.n_test = 2
    build_dataset(cfg.data, 8, 2, root, seed=7)
    return root, cfg


@pytest.fixture()
def rng():
    return np.random.default_rng(0)
