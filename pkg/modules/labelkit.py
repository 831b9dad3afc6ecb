"""
Label extraction for WheelSurrogate

Turns an oracle stress field into the training target of a sample: node
filtering, greedy clustering of the top-stress nodes, selection of the maximum
point of the dominant cluster, and the disk-view von Mises heatmap. Also holds
the min-max scalers fitted on the training split.
"""
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed

from config import Config
from models import ImpactLabel, NodeRecord, StressCluster, StressField, WheelGeometry
from modules.config import LabelConfig, RunConfig
from modules.datastore import DatasetStore, dump_json, load_json
from utils.exceptions import LabelError, ScalerError, StageDependencyError, ValidationError
from utils.logger import logger

NODE_COLUMNS = ['node_id', 'x_mm', 'y_mm', 'z_mm', 'von_mises_mpa', 'max_principal_mpa']
HEATMAP_RESOLUTIONS = (32, 64, 128)
PRINCIPAL_ZERO_TOLERANCE = 1e-9  # relative to the node's von Mises stress
FIXED_RANGES = {'mass': (Config.BARRIER_MASS_MIN_KG, Config.BARRIER_MASS_MAX_KG)}


# ============== Node tables ==============

def node_table(stress: StressField) -> pd.DataFrame:
    """One row per element centroid"""
    return pd.DataFrame({
        'node_id': np.asarray(stress.element_ids, dtype=np.int64),
        'x_mm': stress.centroid_mm[:, 0],
        'y_mm': stress.centroid_mm[:, 1],
        'z_mm': stress.centroid_mm[:, 2],
        'von_mises_mpa': stress.von_mises_mpa,
        'max_principal_mpa': stress.principal_mpa[:, 0],
    }, columns=NODE_COLUMNS)


def records_to_table(records: Iterable[NodeRecord]) -> pd.DataFrame:
    rows = [
        {'node_id': r.node_id, 'x_mm': r.coords_mm[0], 'y_mm': r.coords_mm[1], 'z_mm': r.coords_mm[2],
         'von_mises_mpa': r.von_mises_mpa, 'max_principal_mpa': r.max_principal_mpa}
        for r in records
    ]
    return pd.DataFrame(rows, columns=NODE_COLUMNS)


def sort_by_stress(nodes: pd.DataFrame) -> pd.DataFrame:
    """Descending von Mises, ties by ascending node id"""
    return nodes.sort_values(['von_mises_mpa', 'node_id'], ascending=[False, True], kind='mergesort') \
        .reset_index(drop=True)


def filter_nodes(nodes: pd.DataFrame, geometry: WheelGeometry, config: Optional[LabelConfig] = None,
                 sample_id: Optional[int] = None) -> pd.DataFrame:
    """
    Drop nodes next to the impact, on the lower rim and in compression

    Args:
        nodes: Node table
        geometry: Sample geometry (impact location, attachment plane)
        config: Exclusion settings

    Returns:
        Surviving nodes sorted by descending von Mises

    Raises:
        LabelError: nothing survives; the sample must be rejected
    """
    config = config or LabelConfig()
    if nodes.empty:
        raise LabelError("Node table is empty", sample_id=sample_id)
    coords = nodes[['x_mm', 'y_mm', 'z_mm']].to_numpy(dtype=np.float64)
    impact = np.asarray(geometry.impact_location_mm, dtype=np.float64)
    keep = np.linalg.norm(coords - impact, axis=1) >= config.impact_exclusion_radius_mm
    if config.exclude_rim_lower:
        keep &= coords[:, 2] >= geometry.attachment_z_mm
    if config.exclude_negative_principal:
        floor = -PRINCIPAL_ZERO_TOLERANCE * nodes['von_mises_mpa'].to_numpy(dtype=np.float64)
        keep &= nodes['max_principal_mpa'].to_numpy(dtype=np.float64) >= floor
    filtered = nodes.loc[keep]
    if filtered.empty:
        raise LabelError("No nodes survive filtering; reject this sample", sample_id=sample_id)
    return sort_by_stress(filtered)


# ============== Clustering ==============

def cluster_top_stress(nodes: pd.DataFrame, top_n: int = 50, radius_mm: float = 10.0) -> List[StressCluster]:
    """
    Seed-centred greedy clustering of the top_n highest-stress nodes

    The highest-stress unassigned node seeds a cluster that takes every unassigned
    top node closer than radius_mm to the seed; repeated until all are assigned.
    """
    if top_n < 1:
        raise ValidationError("top_n must be >= 1", field='top_n')
    if radius_mm <= 0:
        raise ValidationError("radius_mm must be > 0", field='radius_mm')
    top = sort_by_stress(nodes).head(top_n)
    ids = top['node_id'].to_numpy(dtype=np.int64)
    coords = top[['x_mm', 'y_mm', 'z_mm']].to_numpy(dtype=np.float64)
    stress = top['von_mises_mpa'].to_numpy(dtype=np.float64)

    unassigned = np.ones(len(top), dtype=bool)
    clusters: List[StressCluster] = []
    while unassigned.any():
        seed = int(np.flatnonzero(unassigned)[0])
        members = unassigned & (np.linalg.norm(coords - coords[seed], axis=1) < radius_mm)
        members[seed] = True
        unassigned &= ~members
        clusters.append(StressCluster(
            member_ids=tuple(int(i) for i in ids[members]),
            seed_id=int(ids[seed]),
            seed_coords_mm=tuple(float(c) for c in coords[seed]),
            max_stress_mpa=float(stress[seed]),
        ))
    return clusters


def select_max_point(clusters: Sequence[StressCluster]) -> Tuple[Tuple[float, float, float], float]:
    """Maximum point of the top cluster: largest, then highest stress, then lowest seed id"""
    if not clusters:
        raise LabelError("No clusters to select from")
    top = min(clusters, key=lambda c: (-c.size, -c.max_stress_mpa, c.seed_id))
    return top.seed_coords_mm, top.max_stress_mpa


# ============== Heatmaps ==============

def raw_heatmap(stress: StressField, geometry: WheelGeometry, resolution: int) -> np.ndarray:
    """Per-pixel maximum von Mises (MPa) over element (x, y) centroids, indexed [y, x]"""
    if resolution not in HEATMAP_RESOLUTIONS:
        raise ValidationError(f"resolution must be one of {HEATMAP_RESOLUTIONS}", field='resolution')
    heatmap = np.zeros((resolution, resolution))
    if len(stress) == 0:
        return heatmap
    scale = resolution / geometry.diameter_mm
    cols = np.clip(np.floor((stress.centroid_mm[:, 0] - geometry.origin_mm) * scale).astype(int), 0, resolution - 1)
    rows = np.clip(np.floor((stress.centroid_mm[:, 1] - geometry.origin_mm) * scale).astype(int), 0, resolution - 1)
    np.maximum.at(heatmap, (rows, cols), stress.von_mises_mpa)
    return heatmap


def project_heatmap(stress: StressField, geometry: WheelGeometry, resolution: int,
                    scaler: 'MinMaxScaler') -> np.ndarray:
    """Heatmap normalized by the training-split heatmap scaler, clipped to [0, 1]"""
    return normalize_heatmap(raw_heatmap(stress, geometry, resolution), scaler)


def normalize_heatmap(heatmap: np.ndarray, scaler: 'MinMaxScaler') -> np.ndarray:
    return np.clip(scaler.apply('heatmap', heatmap), 0.0, 1.0)


# ============== Scalers ==============

@dataclass
class MinMaxScaler:
    """Per-field min-max ranges fitted on the training split"""
    ranges: Dict[str, Tuple[float, float]] = field(default_factory=dict)
    manifest_hash: Optional[str] = None

    @classmethod
    def fit(cls, values: Dict[str, Iterable[float]], manifest_hash: Optional[str] = None,
            min_span: Optional[Dict[str, float]] = None) -> 'MinMaxScaler':
        """
        Fit per-field ranges

        Fields listed in min_span are widened symmetrically to at least that span;
        any other field with min = max raises ScalerError.
        """
        min_span = min_span or {}
        ranges: Dict[str, Tuple[float, float]] = dict(FIXED_RANGES)
        for name, data in values.items():
            if name in FIXED_RANGES:
                continue
            array = np.asarray(list(data) if not isinstance(data, np.ndarray) else data, dtype=np.float64)
            if array.size == 0:
                raise ScalerError(f"No training values for field '{name}'", field=name)
            low, high = float(np.min(array)), float(np.max(array))
            span = float(min_span.get(name, 0.0))
            if high - low < span:
                center = 0.5 * (low + high)
                low, high = center - span / 2.0, center + span / 2.0
                logger.warning(f"Field '{name}' range widened to {span:g}", extra={'stage': 'labels'})
            if not high > low:
                raise ScalerError(f"Field '{name}' is degenerate (min = max = {low})", field=name)
            ranges[name] = (low, high)
        return cls(ranges=ranges, manifest_hash=manifest_hash)

    def _range(self, name: str) -> Tuple[float, float]:
        if name not in self.ranges:
            raise ScalerError(f"Scaler has no field '{name}'", field=name)
        return self.ranges[name]

    def apply(self, name: str, values):
        low, high = self._range(name)
        return (np.asarray(values, dtype=np.float64) - low) / (high - low)

    def invert(self, name: str, values):
        low, high = self._range(name)
        return np.asarray(values, dtype=np.float64) * (high - low) + low

    def to_dict(self) -> Dict:
        return {
            'ranges': {name: {'min': low, 'max': high} for name, (low, high) in self.ranges.items()},
            'manifest_hash': self.manifest_hash,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> 'MinMaxScaler':
        ranges = {name: (float(r['min']), float(r['max'])) for name, r in data.get('ranges', {}).items()}
        return cls(ranges=ranges, manifest_hash=data.get('manifest_hash'))

    def save(self, path) -> None:
        dump_json(path, self.to_dict())

    @classmethod
    def load(cls, path) -> 'MinMaxScaler':
        return cls.from_dict(load_json(path))


def fit_scaler(labels: Sequence[ImpactLabel], manifest_hash: Optional[str] = None,
               coordinate_span_mm: Optional[float] = None) -> MinMaxScaler:
    """
    Fit coordinate, stress and heatmap ranges on training labels

    coordinate_span_mm, when given, is the smallest range kept for x, y and z
    (labels on a voxel lattice can all share one layer).
    """
    if not labels:
        raise ScalerError("Cannot fit a scaler on an empty training split")
    coords = np.array([label.coords_mm for label in labels], dtype=np.float64)
    return MinMaxScaler.fit({
        'x': coords[:, 0],
        'y': coords[:, 1],
        'z': coords[:, 2],
        'stress': [label.max_von_mises_mpa for label in labels],
        'heatmap': np.concatenate([np.ravel(label.heatmap) for label in labels]),
    }, manifest_hash=manifest_hash,
        min_span={axis: coordinate_span_mm for axis in 'xyz'} if coordinate_span_mm else None)


def load_scaler(store: DatasetStore) -> MinMaxScaler:
    if not store.scaler_path.exists():
        raise StageDependencyError(
            f"No scaler at {store.scaler_path}; run the 'labels' command first",
            prerequisite='labels'
        )
    return MinMaxScaler.load(store.scaler_path)


# ============== Per-sample and dataset stages ==============

def extract_label(stress: StressField, geometry: WheelGeometry, config: Optional[LabelConfig] = None,
                  resolution: int = 64, sample_id: Optional[int] = None) -> ImpactLabel:
    """Filter, cluster and select; the heatmap is left in MPa"""
    config = config or LabelConfig()
    nodes = filter_nodes(node_table(stress), geometry, config, sample_id=sample_id)
    clusters = cluster_top_stress(nodes, config.top_n, config.cluster_radius_mm)
    coords, max_stress = select_max_point(clusters)
    return ImpactLabel(
        coords_mm=coords,
        max_von_mises_mpa=max_stress,
        heatmap=raw_heatmap(stress, geometry, resolution),
    )


def _extract_one(root: str, sample_id: int, config: LabelConfig, resolution: int) -> Tuple[int, Optional[ImpactLabel], Optional[Dict]]:
    store = DatasetStore(root)
    geometry = store.load_geometry(sample_id)
    stress = store.load_stress(sample_id, geometry)
    try:
        return sample_id, extract_label(stress, geometry, config, resolution, sample_id), None
    except LabelError as exc:
        logger.warning(exc.message, extra={'stage': 'labels', 'sample_id': sample_id})
        return sample_id, None, exc.to_dict()


def label_dataset(store: DatasetStore, config: RunConfig, workers: int = 1) -> MinMaxScaler:
    """
    Extract labels for every solved sample, fit scalers on train and write label files

    Samples without surviving nodes are dropped from the manifest and listed
    under 'label_rejections'.
    """
    resolution = config.wheelgen.disk_resolution
    ids = store.sample_ids()
    missing = [i for i in ids if not store.stress_path(i).exists()]
    if missing:
        raise StageDependencyError(
            f"{len(missing)} sample(s) have no stress field; run the 'solve' command first",
            prerequisite='solve',
            details={'sample_ids': missing[:20]}
        )

    results = Parallel(n_jobs=workers)(
        delayed(_extract_one)(str(store.root), sample_id, config.labels, resolution) for sample_id in ids
    )
    labels = {sample_id: label for sample_id, label, _ in results if label is not None}
    rejected = [{'id': sample_id, **error} for sample_id, label, error in results if label is None]

    manifest = dict(store.manifest)
    if rejected:
        rejected_ids = {entry['id'] for entry in rejected}
        manifest['samples'] = [e for e in manifest['samples'] if int(e['id']) not in rejected_ids]
        manifest['label_rejections'] = sorted(rejected, key=lambda entry: entry['id'])
        store.save_manifest(manifest)

    train = [labels[i] for i in store.sample_ids('train') if i in labels]
    pitch = Config.WHEEL_DIAMETER_MM / config.wheelgen.voxel_resolution
    scaler = fit_scaler(train, manifest_hash=store.manifest_hash(), coordinate_span_mm=pitch)
    scaler.save(store.scaler_path)

    for sample_id, label in labels.items():
        store.write_label(sample_id, label.coords_mm, label.max_von_mises_mpa, normalize_heatmap(label.heatmap, scaler))
    logger.info(
        f"Labelled {len(labels)} samples, rejected {len(rejected)}",
        extra={'stage': 'labels'}
    )
    return scaler
