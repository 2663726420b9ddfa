import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from textvol.density import KdeConfig
from textvol.synth import NoiseModel, SynthSpec, block_atlas, make_vocabulary, planted_coefficients


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture(scope="session")
def toy_atlas():
    """2-region atlas over a 4-voxel column: labels [1,1,2,2], 1 mm voxels."""
    from textvol.volume_space import ATLAS, Partition

    region = np.array([1, 1, 2, 2], dtype=np.int32).reshape(4, 1, 1)
    return Partition(
        kind=ATLAS,
        region_of_voxel=region,
        affine=np.eye(4),
        volumes=np.array([2.0, 2.0]),
        labels=("amygdala", "insula"),
    )


@pytest.fixture(scope="session")
def planted_world():
    """Small planted corpus shared by the slower end-to-end tests."""
    vocab = make_vocabulary(8)
    partition = block_atlas([(0, 0, 0), (32, 32, 32)], 4.0, (2, 2, 2), vocab.phrases)
    spec = SynthSpec(
        partition=partition,
        vocabulary=vocab,
        beta_star=planted_coefficients(8, 8),
        n_docs=120,
        coords_per_doc=30,
        tokens_per_doc=(10, 20),
        terms_per_doc=(1, 2),
        noise=NoiseModel(),
        seed=7,
    )
    return spec
