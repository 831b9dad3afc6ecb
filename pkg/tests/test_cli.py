import json

import pytest
from click.testing import CliRunner

from app import cli


@pytest.fixture
def runner():
    return CliRunner()


def test_gen_writes_manifest_and_run_record(runner, tmp_path, tiny_config_file):
    result = runner.invoke(cli, ['gen', '--n', '20', '--config', str(tiny_config_file),
                                 '--data', str(tmp_path), '--seed', '3'])

    assert result.exit_code == 0
    record = json.loads((tmp_path / 'run.json').read_text())
    assert record['command'] == 'gen'
    assert record['seed'] == 3
    assert record['outputs']['split_counts'] == {'train': 14, 'validation': 3, 'test': 3}
    assert (tmp_path / 'manifest.json').exists()


def test_solve_before_gen_is_a_domain_error(runner, tmp_path):
    result = runner.invoke(cli, ['solve', '--data', str(tmp_path)])

    assert result.exit_code == 2


def test_train_without_pretrained_encoders_is_a_domain_error(runner, tmp_path):
    result = runner.invoke(cli, ['train', '--data', str(tmp_path)])

    assert result.exit_code == 2


def test_invalid_config_is_a_domain_error(runner, tmp_path):
    config = tmp_path / 'bad.json'
    config.write_text(json.dumps({'wheelgen': {'disk_resolution': 100}}))

    result = runner.invoke(cli, ['gen', '--n', '20', '--config', str(config), '--data', str(tmp_path / 'data')])

    assert result.exit_code == 2


def test_predict_prints_json(runner, tiny_store, tiny_models, tiny_config_file):
    tiny_models['surrogate'].save(tiny_store.model_path('surrogate'))
    sample_id = tiny_store.sample_ids('test')[0]

    result = runner.invoke(cli, ['predict', '--sample-id', str(sample_id), '--config', str(tiny_config_file),
                                 '--data', str(tiny_store.root)])

    assert result.exit_code == 0
    payload = json.loads(result.stdout.strip().splitlines()[-1])
    assert payload['sample_id'] == sample_id
    assert len(payload['coords_mm']) == 3
