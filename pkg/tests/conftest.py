from pathlib import Path

import numpy as np
import pytest

from mugcp.backbone import BackboneConfig, build_backbone
from mugcp.config import load_config
from mugcp.tensor import set_precision

ROOT = Path(__file__).resolve().parents[1]
TOY_CONFIG = ROOT / "configs" / "toy.toml"
DEFAULT_CONFIG = ROOT / "configs" / "default.toml"

TOY_BACKBONE = BackboneConfig(d_text=8, d_img=12, d_mllms=16, d_embed=8, heads=2, depth=2,
                              n_patches=4, name_len=2, caption_len=3, d_feature=4, n_classes=6,
                              caption_vocab=16, hash_buckets=32)


@pytest.fixture(autouse=True)
def _f64():
    set_precision("f64")
    yield
    set_precision("f64")


@pytest.fixture(scope="session")
def toy_backbone():
    return build_backbone(TOY_BACKBONE)


@pytest.fixture(scope="session")
def default_backbone():
    return build_backbone(BackboneConfig())


@pytest.fixture(scope="session")
def toy_exp():
    return load_config(TOY_CONFIG)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
