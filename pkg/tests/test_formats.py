from collections import OrderedDict

import numpy as np
import pytest

from models import StressField
from modules import formats
from utils.exceptions import CheckpointError, DatasetError


def test_voxel_bits_survive_a_file(tmp_path):
    voxels = np.random.default_rng(0).random((16, 16, 16)) > 0.7

    formats.write_voxels(tmp_path / 'voxels.bin', voxels)

    assert np.array_equal(formats.read_voxels(tmp_path / 'voxels.bin'), voxels)
    assert (tmp_path / 'voxels.bin').stat().st_size == 12 + 16 ** 3 // 8


def test_non_cubic_voxels_are_rejected():
    with pytest.raises(DatasetError):
        formats.encode_voxels(np.zeros((4, 4, 2), dtype=bool))


def test_wrong_magic_names_the_file(tmp_path):
    path = tmp_path / 'disk.bin'
    formats.write_heatmap(path, np.zeros((4, 4)))

    with pytest.raises(DatasetError) as exc:
        formats.read_disk(path)

    assert exc.value.details['path'] == str(path)


def test_stress_columns_keep_float32_precision(tmp_path):
    n = 5
    stress = StressField(
        element_ids=np.arange(n),
        centroid_mm=np.full((n, 3), 12.5),
        stress_tensor_mpa=np.arange(6 * n, dtype=np.float64).reshape(n, 6),
        von_mises_mpa=np.linspace(1.0, 2.0, n),
        principal_mpa=np.zeros((n, 3)),
    )
    formats.write_stress(tmp_path / 'stress.bin', stress)

    restored = formats.read_stress(tmp_path / 'stress.bin', np.arange(10, 10 + n))

    assert restored.element_ids.tolist() == list(range(10, 15))
    assert np.allclose(restored.stress_tensor_mpa, stress.stress_tensor_mpa)
    assert np.allclose(restored.von_mises_mpa, stress.von_mises_mpa, rtol=1e-7)


def test_stress_count_must_match_geometry(tmp_path):
    stress = StressField(np.arange(2), np.zeros((2, 3)), np.zeros((2, 6)), np.zeros(2), np.zeros((2, 3)))
    formats.write_stress(tmp_path / 'stress.bin', stress)

    with pytest.raises(DatasetError):
        formats.read_stress(tmp_path / 'stress.bin', np.arange(3))


def test_truncated_checkpoint():
    data = formats.encode_checkpoint({'kind': 'cae2d'}, OrderedDict(w=np.ones((3, 3), dtype=np.float32)))

    with pytest.raises(CheckpointError):
        formats.decode_checkpoint(data[:-8])


def test_checkpoint_with_trailing_bytes():
    data = formats.encode_checkpoint({'kind': 'cae2d'}, OrderedDict(w=np.ones(2, dtype=np.float32)))

    with pytest.raises(CheckpointError):
        formats.decode_checkpoint(data + b'\x00' * 4)
