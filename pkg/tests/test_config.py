import json

import pytest

from modules.config import RunConfig
from utils.exceptions import ConfigValidationError, DatasetError


def test_desk_defaults():
    config = RunConfig.for_preset('desk')

    assert config.wheelgen.disk_resolution == 64
    assert config.wheelgen.voxel_resolution == 32
    assert config.labels.top_n == 50
    assert config.model.freeze_encoders
    assert config.train.loss_weights == {'x': 1.0, 'y': 1.0, 'z': 1.0, 's': 1.0, 'I': 1.0}


def test_paper_preset():
    config = RunConfig.for_preset('paper')

    assert (config.wheelgen.disk_resolution, config.wheelgen.voxel_resolution) == (128, 64)
    assert (config.model.latent_2d, config.model.latent_3d) == (128, 512)
    assert config.labels.cluster_radius_mm == 10.0
    assert config.train.epochs == 1000


def test_overrides_merge_into_sections():
    config = RunConfig.for_preset('paper', {'wheelgen': {'voxel_resolution': 32}})

    assert config.wheelgen.voxel_resolution == 32
    assert config.wheelgen.disk_resolution == 128


def test_unknown_preset():
    with pytest.raises(ConfigValidationError):
        RunConfig.for_preset('cluster')


def test_every_invalid_field_is_reported():
    with pytest.raises(ConfigValidationError) as exc:
        RunConfig.for_preset('desk', {
            'wheelgen': {'disk_resolution': 100, 'voxel_resolution': 48},
            'train': {'batch_size': 0},
        })

    fields = {entry['field'] for entry in exc.value.details['fields']}
    assert {'wheelgen.disk_resolution', 'wheelgen.voxel_resolution', 'train.batch_size'} <= fields


def test_unknown_keys_are_rejected():
    with pytest.raises(ConfigValidationError):
        RunConfig.for_preset('desk', {'oracle': {'solver': 'direct'}})


def test_overlapping_radial_ranges_are_rejected():
    with pytest.raises(ConfigValidationError):
        RunConfig.for_preset('desk', {'wheelgen': {'hub_radius_range': (0.12, 0.32)}})


def test_flags_win_over_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text(json.dumps({'preset': 'paper', 'seed': 1, 'train': {'seed': 1, 'epochs': 3}}))

    config = RunConfig.load(str(path), overrides={'seed': 9, 'train': {'seed': 9}})

    assert config.preset == 'paper'
    assert config.seed == 9
    assert config.train.seed == 9
    assert config.train.epochs == 3


def test_missing_config_file(tmp_path):
    with pytest.raises(DatasetError):
        RunConfig.load(str(tmp_path / 'absent.json'))


def test_malformed_config_file(tmp_path):
    path = tmp_path / 'run.json'
    path.write_text('{"seed": ')

    with pytest.raises(ConfigValidationError):
        RunConfig.load(str(path))


def test_config_hash_is_stable():
    first = RunConfig.for_preset('desk', {'seed': 3})

    assert first.config_hash() == RunConfig.for_preset('desk', {'seed': 3}).config_hash()
    assert first.config_hash() != RunConfig.for_preset('desk', {'seed': 4}).config_hash()
