import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

from depthseg.data import SyntheticSpec, gen_synthetic, load_dataset  # noqa: E402
from depthseg.model import NetConfig  # noqa: E402


def tiny_net_config(**kw) -> NetConfig:
    """32x32 input, two stages, narrow widths: fast enough for finite differences."""
    base = dict(
        num_classes=3,
        img_size=(32, 32),
        patch_size=4,
        window_size=4,
        embed_dim=8,
        depths=(2, 2),
        num_heads=(2, 2),
        mlp_ratio=2.0,
        decoder_channels=8,
        fine_channels=4,
        stem_channels=4,
        head_hidden=8,
        critic_channels=2,
    )
    base.update(kw)
    return NetConfig(**base)


@pytest.fixture
def tiny_cfg() -> NetConfig:
    return tiny_net_config()


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """24 train / 6 val scenes at 32x32 with 3 classes."""
    root = tmp_path_factory.mktemp("small_ds")
    spec = SyntheticSpec(height=32, width=32, num_classes=3)
    manifest = gen_synthetic(root, seed=7, counts={"train": 24, "val": 6}, spec=spec)
    train = list(load_dataset(root, "train", manifest))
    val = list(load_dataset(root, "val", manifest))
    return root, manifest, train, val
