"""
Shared fixtures: a small wheel geometry and a tiny end-to-end dataset
"""
import json

import pytest

from models import DomainTag, PatternFamily, SpokeSpec
from modules.config import RunConfig
from modules.datastore import DatasetStore
from modules.labelkit import label_dataset
from modules.stressoracle import solve_dataset
from modules.surrogate import pretrain_cae2d, pretrain_cvae3d, train_surrogate
from modules.wheelgen import build_dataset, canonical_rim_profiles, extrude_to_voxels, gen_spoke_raster

TINY_SEED = 7

# Small resolutions and networks; every sample is accepted so a 20-sample run never aborts
TINY_OVERRIDES = {
    'wheelgen': {'disk_resolution': 32, 'voxel_resolution': 32, 'max_rejection_rate': 1.0},
    'model': {'latent_2d': 8, 'latent_3d': 8, 'width': 0.25, 'head_hidden': [16, 8], 'decoder_channels': 8},
    'train': {'epochs': 2, 'pretrain_epochs': 1, 'batch_size': 8, 'transfer_epochs': 1,
              'learning_rate': 1e-3, 'seed': TINY_SEED},
}


@pytest.fixture(scope='session')
def tiny_config():
    return RunConfig.for_preset('desk', TINY_OVERRIDES)


@pytest.fixture(scope='session')
def tiny_config_file(tmp_path_factory):
    path = tmp_path_factory.mktemp('config') / 'tiny.json'
    path.write_text(json.dumps(TINY_OVERRIDES), encoding='utf-8')
    return path


@pytest.fixture
def seed7_spec():
    return SpokeSpec(
        n_pieces=5,
        pattern_family=PatternFamily.RADIAL_BAR,
        hub_radius_frac=0.15,
        spoke_inner_frac=0.33,
        spoke_outer_frac=0.78,
        hole_width_frac=0.5,
        seed=7,
    )


@pytest.fixture
def tiny_geometry(seed7_spec):
    raster = gen_spoke_raster(seed7_spec, 64)
    return extrude_to_voxels(raster, canonical_rim_profiles()[0], 32)


@pytest.fixture(scope='session')
def generated_store(tmp_path_factory, tiny_config):
    """Geometry only: no stress fields, no labels"""
    root = tmp_path_factory.mktemp('generated')
    build_dataset(20, TINY_SEED, tiny_config, str(root))
    return DatasetStore(str(root))


@pytest.fixture(scope='session')
def tiny_store(tmp_path_factory, tiny_config):
    """Generated, solved and labelled 20-sample dataset"""
    root = tmp_path_factory.mktemp('tiny')
    build_dataset(20, TINY_SEED, tiny_config, str(root))
    solve_dataset(DatasetStore(str(root)), tiny_config)
    label_dataset(DatasetStore(str(root)), tiny_config)
    return DatasetStore(str(root))


@pytest.fixture(scope='session')
def detailed_store(tmp_path_factory, tiny_config):
    """Small solved and labelled dataset of the detailed domain, for fine-tuning"""
    root = tmp_path_factory.mktemp('detailed')
    build_dataset(20, TINY_SEED + 1, tiny_config, str(root), domain=DomainTag.DETAILED)
    solve_dataset(DatasetStore(str(root)), tiny_config)
    label_dataset(DatasetStore(str(root)), tiny_config)
    return DatasetStore(str(root))


@pytest.fixture(scope='session')
def tiny_models(tiny_store, tiny_config):
    """Pretrained encoders and a proposed-variant surrogate, one epoch each"""
    cae = pretrain_cae2d(tiny_store, tiny_config, epochs=1)
    cvae = pretrain_cvae3d(tiny_store, tiny_config, epochs=1)
    surrogate = train_surrogate(tiny_store, cae, cvae, tiny_config, epochs=1)
    return {'cae': cae, 'cvae': cvae, 'surrogate': surrogate}

