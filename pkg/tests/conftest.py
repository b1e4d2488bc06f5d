from pathlib import Path

import numpy as np
import pytest

from dermhybrid.synthetic import write_blob_dataset

TINY_CONFIG = """\
[data]
data_root = data
split_dir = splits
image_size = 32

[model]
kind = {kind}
backbone_channels = 4, 8
d_model = 8
n_heads = 2
n_layers = 1
ffn_dim = 16
patch_size = 8
fusion = {fusion}
fusion_hidden = 8
fusion_out = 4

[train]
epochs = {epochs}
batch_size = 8
lr = 0.001
seed = 3
deterministic = true

[augment]
crop_scale = 0.8, 1.0
"""


def write_tiny_config(path: Path, kind="parallel", fusion="spline", epochs=2) -> Path:
    path.write_text(TINY_CONFIG.format(kind=kind, fusion=fusion, epochs=epochs))
    return path


@pytest.fixture(scope="session")
def blob_root(tmp_path_factory) -> Path:
    """40 tiny 32x32 blob images (30% malignant) with a manifest."""
    root = tmp_path_factory.mktemp("blobs")
    write_blob_dataset(root, 40, size=32, seed=0, malignant_fraction=0.3)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
