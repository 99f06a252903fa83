import pytest
import torch

from focuscir.backbones import stub_backbones
from focuscir.data import HyperConfig
from focuscir.preprocess import SegmentationCache, preprocess_manifest
from focuscir.synthetic import gen_synthetic

torch.set_num_threads(1)


@pytest.fixture
def cfg():
    return HyperConfig.for_profile("stub")


def prepared(n, seed, root, reuse=0.0, fractions=(0.7, 0.15, 0.15), cfg=None):
    """Synthetic manifest plus a filled segmentation cache."""
    cfg = cfg or HyperConfig.for_profile("stub")
    manifest = gen_synthetic(n, seed=seed, reuse=reuse, fractions=fractions)
    cache = SegmentationCache(root)
    bb = stub_backbones(cfg)
    stats = preprocess_manifest(manifest, cache, bb.captioner, bb.segmenter)
    assert stats.failures == 0
    return manifest, cache


@pytest.fixture(scope="session")
def small_world(tmp_path_factory):
    return prepared(40, 3, tmp_path_factory.mktemp("cache"), reuse=0.5)
