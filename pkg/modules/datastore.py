"""
Dataset directory management for WheelSurrogate

Layout of a dataset root:

    manifest.json                 index of samples and their splits
    scaler.json                   min-max scalers fitted on the training split
    samples/<id>/voxels.bin       WVOX occupancy
    samples/<id>/disk.bin         WIMG disk-view raster
    samples/<id>/geom.json        pitch, impact location, boundary-condition voxel ids
    samples/<id>/stress.bin       WSTR oracle output        (solve stage)
    samples/<id>/solve.json       solver metadata           (solve stage)
    samples/<id>/label.json       max-stress label          (labels stage)
    samples/<id>/heatmap.bin      WHMP normalized heatmap   (labels stage)
    models/*.whls                 checkpoints
    reports/                      evaluation outputs
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional

import numpy as np

from models import DomainTag, SpokeSpec, Split, StressField, WheelGeometry, WheelSample
from modules import formats
from utils.exceptions import DatasetError, StageDependencyError

MANIFEST_FILE = 'manifest.json'
SCALER_FILE = 'scaler.json'


def dump_json(path: Path, payload: Any) -> None:
    """Write JSON with sorted keys so reruns are byte-identical"""
    try:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, 'w', encoding='utf-8') as f:
            json.dump(payload, f, indent=2, sort_keys=True, ensure_ascii=False)
            f.write('\n')
    except OSError as exc:
        raise DatasetError(f"Failed to write JSON: {exc}", path=str(path))


def load_json(path: Path) -> Any:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise DatasetError("File not found", path=str(path))
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"Failed to read JSON: {exc}", path=str(path))


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 20), b''):
            digest.update(chunk)
    return digest.hexdigest()


class DatasetStore:
    """Read/write access to one dataset directory"""

    def __init__(self, root: str):
        self.root = Path(root)
        self.manifest_path = self.root / MANIFEST_FILE
        self.scaler_path = self.root / SCALER_FILE
        self.models_path = self.root / 'models'
        self.reports_path = self.root / 'reports'
        self._manifest: Optional[Dict[str, Any]] = None

    # ==================== MANIFEST ====================

    @property
    def manifest(self) -> Dict[str, Any]:
        if self._manifest is None:
            if not self.manifest_path.exists():
                raise StageDependencyError(
                    f"No dataset manifest at {self.manifest_path}; run the 'gen' command first",
                    prerequisite='gen'
                )
            self._manifest = load_json(self.manifest_path)
        return self._manifest

    def save_manifest(self, manifest: Dict[str, Any]) -> None:
        dump_json(self.manifest_path, manifest)
        self._manifest = manifest

    def manifest_hash(self) -> str:
        return file_sha256(self.manifest_path)

    def sample_ids(self, split: Optional[str] = None) -> List[int]:
        entries = self.manifest['samples']
        if split is not None:
            split = Split(split).value
            entries = [entry for entry in entries if entry['split'] == split]
        return [int(entry['id']) for entry in entries]

    def entry(self, sample_id: int) -> Dict[str, Any]:
        for entry in self.manifest['samples']:
            if int(entry['id']) == sample_id:
                return entry
        raise DatasetError(f"Sample {sample_id} not in manifest", path=str(self.manifest_path))

    # ==================== SAMPLES ====================

    def sample_dir(self, sample_id: int) -> Path:
        return self.root / 'samples' / f"{sample_id:06d}"

    def relative(self, path: Path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    def write_geometry(self, sample: WheelSample) -> Dict[str, str]:
        """Persist voxels, disk raster and geometry metadata of one sample"""
        directory = self.sample_dir(sample.sample_id)
        geometry = sample.geometry
        formats.write_voxels(directory / 'voxels.bin', geometry.voxels)
        formats.write_disk(directory / 'disk.bin', geometry.disk_raster)
        dump_json(directory / 'geom.json', {
            'pitch_mm': geometry.pitch_mm,
            'diameter_mm': geometry.diameter_mm,
            'disk_thickness_mm': geometry.disk_thickness_mm,
            'attachment_z_mm': geometry.attachment_z_mm,
            'impact_location_mm': [float(v) for v in geometry.impact_location_mm],
            'hub_voxel_ids': [int(v) for v in geometry.hub_voxel_ids],
            'impact_face_voxel_ids': [int(v) for v in geometry.impact_face_voxel_ids],
            'spoke_spec': sample.spoke_spec.to_dict() if sample.spoke_spec else None,
            'rim_profile_id': sample.rim_profile_id,
            'domain_tag': DomainTag(sample.domain_tag).value,
        })
        return {
            'voxels': self.relative(directory / 'voxels.bin'),
            'disk': self.relative(directory / 'disk.bin'),
            'geom': self.relative(directory / 'geom.json'),
        }

    def load_geometry(self, sample_id: int) -> WheelGeometry:
        directory = self.sample_dir(sample_id)
        meta = load_json(directory / 'geom.json')
        return WheelGeometry(
            disk_raster=formats.read_disk(directory / 'disk.bin'),
            voxels=formats.read_voxels(directory / 'voxels.bin'),
            pitch_mm=float(meta['pitch_mm']),
            disk_thickness_mm=float(meta['disk_thickness_mm']),
            impact_location_mm=tuple(meta['impact_location_mm']),
            hub_voxel_ids=np.asarray(meta['hub_voxel_ids'], dtype=np.int64),
            impact_face_voxel_ids=np.asarray(meta['impact_face_voxel_ids'], dtype=np.int64),
            diameter_mm=float(meta['diameter_mm']),
            attachment_z_mm=float(meta['attachment_z_mm']),
        )

    def load_sample(self, sample_id: int) -> WheelSample:
        entry = self.entry(sample_id)
        meta = load_json(self.sample_dir(sample_id) / 'geom.json')
        return WheelSample(
            sample_id=sample_id,
            geometry=self.load_geometry(sample_id),
            barrier_mass_kg=float(entry['barrier_mass_kg']),
            split=Split(entry['split']),
            domain_tag=DomainTag(entry.get('domain_tag', DomainTag.CONCEPT.value)),
            spoke_spec=SpokeSpec.from_dict(meta['spoke_spec']) if meta.get('spoke_spec') else None,
            rim_profile_id=meta.get('rim_profile_id'),
        )

    def iter_samples(self, split: Optional[str] = None) -> Iterable[WheelSample]:
        for sample_id in self.sample_ids(split):
            yield self.load_sample(sample_id)

    # ==================== STRESS ====================

    def stress_path(self, sample_id: int) -> Path:
        return self.sample_dir(sample_id) / 'stress.bin'

    def write_stress(self, sample_id: int, field: StressField, meta: Dict[str, Any]) -> None:
        formats.write_stress(self.stress_path(sample_id), field)
        dump_json(self.sample_dir(sample_id) / 'solve.json', meta)

    def load_stress(self, sample_id: int, geometry: Optional[WheelGeometry] = None) -> StressField:
        path = self.stress_path(sample_id)
        if not path.exists():
            raise StageDependencyError(
                f"Sample {sample_id} has no stress field; run the 'solve' command first",
                prerequisite='solve'
            )
        geometry = geometry or self.load_geometry(sample_id)
        element_ids = np.flatnonzero(geometry.voxels.ravel())
        field = formats.read_stress(path, element_ids)
        meta = load_json(self.sample_dir(sample_id) / 'solve.json')
        field.iterations = int(meta.get('iterations', 0))
        field.residual = float(meta.get('residual', 0.0))
        field.wall_time_s = float(meta.get('wall_time_s', 0.0))
        return field

    # ==================== LABELS ====================

    def write_label(self, sample_id: int, coords_mm, stress_mpa: float, heatmap: np.ndarray) -> None:
        directory = self.sample_dir(sample_id)
        formats.write_heatmap(directory / 'heatmap.bin', heatmap)
        dump_json(directory / 'label.json', {
            'x_mm': float(coords_mm[0]),
            'y_mm': float(coords_mm[1]),
            'z_mm': float(coords_mm[2]),
            'stress_mpa': float(stress_mpa),
            'heatmap_path': self.relative(directory / 'heatmap.bin'),
        })

    def has_label(self, sample_id: int) -> bool:
        return (self.sample_dir(sample_id) / 'label.json').exists()

    def load_label(self, sample_id: int) -> Dict[str, Any]:
        directory = self.sample_dir(sample_id)
        if not (directory / 'label.json').exists():
            raise StageDependencyError(
                f"Sample {sample_id} has no label; run the 'labels' command first",
                prerequisite='labels'
            )
        label = load_json(directory / 'label.json')
        label['heatmap'] = formats.read_heatmap(self.root / label['heatmap_path'])
        return label

    def missing_labels(self, sample_ids: Iterable[int]) -> List[int]:
        return [sample_id for sample_id in sample_ids if not self.has_label(sample_id)]

    # ==================== MODELS ====================

    def model_path(self, name: str) -> Path:
        return self.models_path / f"{name}.whls"

    def require_model(self, name: str, command: str) -> Path:
        path = self.model_path(name)
        if not path.exists():
            raise StageDependencyError(
                f"Missing checkpoint {path.name}; run the '{command}' command first",
                prerequisite=command
            )
        return path
