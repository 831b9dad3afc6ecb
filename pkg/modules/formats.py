"""
Binary file codecs for WheelSurrogate artifacts

All multi-byte values are little-endian. Layouts:

    voxels.bin   "WVOX" u32 version, u32 D, bit-packed occupancy (C order, LSB first)
    disk.bin     "WIMG" u32 H, u32 W, one byte per pixel
    stress.bin   "WSTR" u32 version, u32 count, count x 13 f32
                 (centroid xyz, tensor xx yy zz xy yz xz, von Mises, principals 1 2 3)
    heatmap.bin  "WHMP" u32 H, u32 W, H*W f32 row-major
    *.whls       "WHLS" u32 version, u64 header length, UTF-8 JSON header,
                 float32 tensors in header directory order
"""
import json
import struct
from collections import OrderedDict
from pathlib import Path
from typing import Any, Dict, Tuple

import numpy as np

from config import Config
from models import StressField
from utils.exceptions import CheckpointError, DatasetError

VOXEL_MAGIC = b'WVOX'
IMAGE_MAGIC = b'WIMG'
STRESS_MAGIC = b'WSTR'
HEATMAP_MAGIC = b'WHMP'
CHECKPOINT_MAGIC = b'WHLS'

STRESS_COLUMNS = 13


def _write(path: Path, payload: bytes) -> None:
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_bytes(payload)
    except OSError as exc:
        raise DatasetError(f"Failed to write file: {exc}", path=str(path))


def _read(path: Path, magic: bytes) -> bytes:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise DatasetError(f"Failed to read file: {exc}", path=str(path))
    if data[:4] != magic:
        raise DatasetError(f"Bad magic {data[:4]!r}, expected {magic!r}", path=str(path))
    return data


def _check_version(version: int, path: Path) -> None:
    if version != Config.FORMAT_VERSION:
        raise DatasetError(f"Unsupported format version {version}", path=str(path))


# ============== Voxels ==============

def encode_voxels(voxels: np.ndarray) -> bytes:
    size = voxels.shape[0]
    if voxels.shape != (size, size, size):
        raise DatasetError(f"Voxel grid must be cubic, got shape {voxels.shape}")
    bits = np.packbits(voxels.astype(bool).ravel(), bitorder='little')
    return VOXEL_MAGIC + struct.pack('<II', Config.FORMAT_VERSION, size) + bits.tobytes()


def write_voxels(path: Path, voxels: np.ndarray) -> None:
    _write(path, encode_voxels(voxels))


def read_voxels(path: Path) -> np.ndarray:
    data = _read(path, VOXEL_MAGIC)
    version, size = struct.unpack_from('<II', data, 4)
    _check_version(version, path)
    bits = np.frombuffer(data, dtype=np.uint8, offset=12)
    flat = np.unpackbits(bits, count=size ** 3, bitorder='little')
    return flat.astype(bool).reshape(size, size, size)


# ============== Disk rasters ==============

def write_disk(path: Path, raster: np.ndarray) -> None:
    height, width = raster.shape
    payload = IMAGE_MAGIC + struct.pack('<II', height, width) + raster.astype(np.uint8).tobytes()
    _write(path, payload)


def read_disk(path: Path) -> np.ndarray:
    data = _read(path, IMAGE_MAGIC)
    height, width = struct.unpack_from('<II', data, 4)
    pixels = np.frombuffer(data, dtype=np.uint8, offset=12, count=height * width)
    return pixels.reshape(height, width).astype(bool)


# ============== Stress fields ==============

def write_stress(path: Path, stress: StressField) -> None:
    table = np.concatenate([
        stress.centroid_mm,
        stress.stress_tensor_mpa,
        stress.von_mises_mpa[:, None],
        stress.principal_mpa,
    ], axis=1).astype('<f4')
    header = STRESS_MAGIC + struct.pack('<II', Config.FORMAT_VERSION, table.shape[0])
    _write(path, header + table.tobytes())


def read_stress(path: Path, element_ids: np.ndarray = None) -> StressField:
    """Read a stress file; element ids come from the geometry (sorted occupied voxels)"""
    data = _read(path, STRESS_MAGIC)
    version, count = struct.unpack_from('<II', data, 4)
    _check_version(version, path)
    table = np.frombuffer(data, dtype='<f4', offset=12, count=count * STRESS_COLUMNS)
    table = table.reshape(count, STRESS_COLUMNS).astype(np.float64)
    if element_ids is None:
        element_ids = np.arange(count, dtype=np.int64)
    if len(element_ids) != count:
        raise DatasetError(f"Stress file has {count} elements, geometry has {len(element_ids)}", path=str(path))
    return StressField(
        element_ids=np.asarray(element_ids, dtype=np.int64),
        centroid_mm=table[:, 0:3],
        stress_tensor_mpa=table[:, 3:9],
        von_mises_mpa=table[:, 9],
        principal_mpa=table[:, 10:13],
    )


# ============== Heatmaps ==============

def write_heatmap(path: Path, heatmap: np.ndarray) -> None:
    height, width = heatmap.shape
    payload = HEATMAP_MAGIC + struct.pack('<II', height, width) + heatmap.astype('<f4').tobytes()
    _write(path, payload)


def read_heatmap(path: Path) -> np.ndarray:
    data = _read(path, HEATMAP_MAGIC)
    height, width = struct.unpack_from('<II', data, 4)
    values = np.frombuffer(data, dtype='<f4', offset=12, count=height * width)
    return values.reshape(height, width).copy()


# ============== Checkpoints ==============

def encode_checkpoint(header: Dict[str, Any], tensors: 'OrderedDict[str, np.ndarray]') -> bytes:
    directory = [{'name': name, 'shape': list(array.shape)} for name, array in tensors.items()]
    full_header = dict(header)
    full_header['tensors'] = directory
    header_bytes = json.dumps(full_header, sort_keys=True).encode('utf-8')
    chunks = [CHECKPOINT_MAGIC, struct.pack('<IQ', Config.FORMAT_VERSION, len(header_bytes)), header_bytes]
    for array in tensors.values():
        chunks.append(np.ascontiguousarray(array, dtype='<f4').tobytes())
    return b''.join(chunks)


def decode_checkpoint(data: bytes, path: str = None) -> Tuple[Dict[str, Any], 'OrderedDict[str, np.ndarray]']:
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"Bad magic {data[:4]!r}", path=path)
    version, header_length = struct.unpack_from('<IQ', data, 4)
    if version != Config.FORMAT_VERSION:
        raise CheckpointError(f"Unsupported checkpoint version {version}", path=path)
    offset = 16
    header = json.loads(data[offset:offset + header_length].decode('utf-8'))
    offset += header_length
    tensors: 'OrderedDict[str, np.ndarray]' = OrderedDict()
    for entry in header.pop('tensors'):
        count = int(np.prod(entry['shape'])) if entry['shape'] else 1
        if offset + count * 4 > len(data):
            raise CheckpointError(f"Checkpoint is truncated at tensor '{entry['name']}'", path=path)
        array = np.frombuffer(data, dtype='<f4', offset=offset, count=count)
        tensors[entry['name']] = array.reshape(entry['shape']).astype(np.float32)
        offset += count * 4
    if offset != len(data):
        raise CheckpointError("Checkpoint payload length does not match its directory", path=path)
    return header, tensors
