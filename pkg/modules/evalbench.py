"""
Evaluation for WheelSurrogate

Distance, stress and heatmap metrics, constant-predictor baselines, the
variant ablation, and the report files consumed by plotting tools.
"""
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from PIL import Image
from pydantic import BaseModel, Field

from config import Config
from models import Prediction
from modules.config import RunConfig
from modules.datastore import DatasetStore
from modules.surrogate import (
    VARIANTS, Checkpoint, Predictor, SplitArrays, load_split, train_surrogate,
)
from utils.exceptions import DatasetError, MetricError, WheelSurrogateException
from utils.logger import logger

AXES = ('x', 'y', 'z')
HISTOGRAM_BIN_MM = 5.0
ABLATION_COLUMNS = ['variant', 'split', 'mean_3d_mm', 'median_3d_mm', 'relative_mean_pct',
                    'relative_median_pct', 'mape_pct', 'pearson_r', 'manifest_hash', 'error']


# ============== Metrics ==============

def euclid_error_3d(truth, pred) -> np.ndarray:
    """Per-sample Euclidean distance (mm) between (n, 3) point sets"""
    diff = np.atleast_2d(np.asarray(pred, dtype=np.float64)) - np.atleast_2d(np.asarray(truth, dtype=np.float64))
    return np.sqrt(np.sum(diff ** 2, axis=1))


def euclid_error_1d(axis: int, truth, pred) -> np.ndarray:
    """Absolute per-axis difference (mm)"""
    truth = np.atleast_2d(np.asarray(truth, dtype=np.float64))
    pred = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    return np.abs(pred[:, axis] - truth[:, axis])


def relative_error(distance_mm):
    """Distance as a percentage of the wheel diameter"""
    return 100.0 * np.asarray(distance_mm, dtype=np.float64) / Config.WHEEL_DIAMETER_MM


def mape(truth, pred) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.size == 0:
        raise MetricError("MAPE of an empty set", metric='mape')
    if np.any(truth <= 0):
        raise MetricError("MAPE needs strictly positive truth values", metric='mape')
    return float(100.0 * np.mean(np.abs(truth - pred) / truth))


def pearson_r(truth, pred) -> float:
    truth = np.asarray(truth, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if truth.size < 2:
        raise MetricError("Pearson R needs at least 2 samples", metric='pearson_r')
    dt, dp = truth - truth.mean(), pred - pred.mean()
    denominator = np.sqrt(np.sum(dt ** 2) * np.sum(dp ** 2))
    if denominator == 0:
        raise MetricError("Pearson R is undefined for zero variance", metric='pearson_r')
    return float(np.clip(np.sum(dt * dp) / denominator, -1.0, 1.0))


def heatmap_rmse(truth_maps, pred_maps) -> float:
    """RMSE over all pixels of all maps"""
    truth = np.asarray(truth_maps, dtype=np.float64)
    pred = np.asarray(pred_maps, dtype=np.float64)
    if truth.shape != pred.shape:
        raise MetricError(f"Heatmap shapes differ: {truth.shape} vs {pred.shape}", metric='heatmap_rmse')
    return float(np.sqrt(np.mean((truth - pred) ** 2)))


# ============== Reports ==============

class HistogramBin(BaseModel):
    low_mm: float
    high_mm: float
    count: int


class ScatterPoint(BaseModel):
    sample_id: Optional[int] = None
    truth_mpa: float
    pred_mpa: float


class CaseRecord(BaseModel):
    sample_id: Optional[int] = None
    error_mm: float
    truth_mm: List[float]
    pred_mm: List[float]
    truth_mpa: float
    pred_mpa: float


class SplitMetrics(BaseModel):
    n_samples: int
    mean_error_mm: float
    median_error_mm: float
    relative_mean_pct: float
    relative_median_pct: float
    axis_mean_mm: Dict[str, float]
    axis_median_mm: Dict[str, float]
    axis_mean_pct: Dict[str, float]
    axis_median_pct: Dict[str, float]
    mape_pct: float
    pearson_r: Optional[float] = None
    heatmap_rmse: Optional[float] = None
    mean_inference_s: Optional[float] = None
    histogram: List[HistogramBin] = Field(default_factory=list)
    scatter: List[ScatterPoint] = Field(default_factory=list)
    best_cases: List[CaseRecord] = Field(default_factory=list)
    worst_cases: List[CaseRecord] = Field(default_factory=list)


class EvalReport(BaseModel):
    model: str
    splits: Dict[str, SplitMetrics] = Field(default_factory=dict)
    provenance: Dict[str, object] = Field(default_factory=dict)


def error_histogram(errors_mm: np.ndarray, bin_mm: float = HISTOGRAM_BIN_MM) -> List[HistogramBin]:
    top = max(bin_mm, float(np.ceil(np.max(errors_mm) / bin_mm) * bin_mm)) if len(errors_mm) else bin_mm
    if len(errors_mm) and np.max(errors_mm) >= top:
        top += bin_mm
    edges = np.arange(0.0, top + bin_mm / 2, bin_mm)
    counts, _ = np.histogram(errors_mm, bins=edges)
    return [HistogramBin(low_mm=float(lo), high_mm=float(hi), count=int(c))
            for lo, hi, c in zip(edges[:-1], edges[1:], counts)]


def score_predictions(
    truth_coords,
    truth_stress,
    pred_coords,
    pred_stress,
    truth_heatmaps=None,
    pred_heatmaps=None,
    sample_ids: Optional[Sequence[int]] = None,
    wall_times: Optional[Sequence[float]] = None,
    n_cases: int = 5,
) -> SplitMetrics:
    """Score one split of predictions; pure function of its inputs"""
    truth_coords = np.atleast_2d(np.asarray(truth_coords, dtype=np.float64))
    pred_coords = np.atleast_2d(np.asarray(pred_coords, dtype=np.float64))
    truth_stress = np.asarray(truth_stress, dtype=np.float64)
    pred_stress = np.asarray(pred_stress, dtype=np.float64)
    n = len(truth_stress)
    if n == 0:
        raise DatasetError("Nothing to score")
    ids = list(sample_ids) if sample_ids is not None else [None] * n

    errors = euclid_error_3d(truth_coords, pred_coords)
    axis_errors = {name: euclid_error_1d(i, truth_coords, pred_coords) for i, name in enumerate(AXES)}
    try:
        r = pearson_r(truth_stress, pred_stress)
    except MetricError as exc:
        logger.warning(exc.message, extra={'stage': 'eval'})
        r = None
    rmse = None
    if truth_heatmaps is not None and pred_heatmaps is not None:
        rmse = heatmap_rmse(truth_heatmaps, pred_heatmaps)

    def case(i: int) -> CaseRecord:
        return CaseRecord(sample_id=ids[i], error_mm=float(errors[i]), truth_mm=truth_coords[i].tolist(),
                          pred_mm=pred_coords[i].tolist(), truth_mpa=float(truth_stress[i]),
                          pred_mpa=float(pred_stress[i]))

    order = np.lexsort((np.arange(n), errors))
    return SplitMetrics(
        n_samples=n,
        mean_error_mm=float(np.mean(errors)),
        median_error_mm=float(np.median(errors)),
        relative_mean_pct=float(relative_error(np.mean(errors))),
        relative_median_pct=float(relative_error(np.median(errors))),
        axis_mean_mm={a: float(np.mean(e)) for a, e in axis_errors.items()},
        axis_median_mm={a: float(np.median(e)) for a, e in axis_errors.items()},
        axis_mean_pct={a: float(relative_error(np.mean(e))) for a, e in axis_errors.items()},
        axis_median_pct={a: float(relative_error(np.median(e))) for a, e in axis_errors.items()},
        mape_pct=mape(truth_stress, pred_stress),
        pearson_r=r,
        heatmap_rmse=rmse,
        mean_inference_s=float(np.mean(wall_times)) if wall_times is not None and len(wall_times) else None,
        histogram=error_histogram(errors),
        scatter=[ScatterPoint(sample_id=ids[i], truth_mpa=float(truth_stress[i]), pred_mpa=float(pred_stress[i]))
                 for i in range(n)],
        best_cases=[case(int(i)) for i in order[:n_cases]],
        worst_cases=[case(int(i)) for i in order[::-1][:n_cases]],
    )


def score_arrays(arrays: SplitArrays, predictions: Sequence[Prediction]) -> SplitMetrics:
    has_maps = all(p.heatmap is not None for p in predictions) and arrays.heatmap is not None
    return score_predictions(
        arrays.coords_mm,
        arrays.stress_mpa,
        np.array([p.coords_mm for p in predictions]),
        np.array([p.stress_mpa for p in predictions]),
        truth_heatmaps=arrays.heatmap if has_maps else None,
        pred_heatmaps=np.stack([p.heatmap for p in predictions]) if has_maps else None,
        sample_ids=[int(i) for i in arrays.ids],
        wall_times=[p.wall_time_s for p in predictions],
    )


def evaluate(checkpoint: Checkpoint, store: DatasetStore, split: str = 'test',
             name: Optional[str] = None) -> EvalReport:
    """Score a surrogate checkpoint on one labelled split"""
    arrays = load_split(store, split)
    predictions = Predictor(checkpoint).predict_arrays(arrays)
    variant = checkpoint.architecture.get('variant', 'proposed')
    return EvalReport(
        model=name or f"surrogate-{variant}",
        splits={split: score_arrays(arrays, predictions)},
        provenance={**checkpoint.provenance, 'dataset_manifest_hash': store.manifest_hash()},
    )


def baseline_predictions(train: SplitArrays, target: SplitArrays) -> List[Prediction]:
    """Constant predictor: training centroid, mean training stress and mean training heatmap"""
    centroid = tuple(float(v) for v in np.mean(train.coords_mm, axis=0))
    stress = float(np.mean(train.stress_mpa))
    heatmap = np.mean(train.heatmap, axis=0) if train.heatmap is not None else None
    return [Prediction(sample_id=int(i), coords_mm=centroid, stress_mpa=stress, heatmap=heatmap)
            for i in target.ids]


def baseline_report(store: DatasetStore, split: str = 'test', fit_split: str = 'train') -> EvalReport:
    train = load_split(store, fit_split)
    target = train if split == fit_split else load_split(store, split)
    return EvalReport(
        model='baseline-constant',
        splits={split: score_arrays(target, baseline_predictions(train, target))},
        provenance={'fit_split': fit_split, 'dataset_manifest_hash': store.manifest_hash()},
    )


def ablation_run(store: DatasetStore, config: RunConfig, cae: Optional[Checkpoint], cvae: Checkpoint,
                 out_dir: Optional[str] = None, variants: Sequence[str] = ('A', 'B', 'proposed'),
                 epochs: Optional[int] = None) -> pd.DataFrame:
    """
    Train and score every variant with the same seed and splits

    A failing variant yields a row carrying its error; the others still run.
    """
    rows: List[Dict] = []
    manifest_hash = store.manifest_hash()
    for variant in variants:
        if variant not in VARIANTS:
            raise DatasetError(f"Unknown variant {variant!r}")
        variant_rows: List[Dict] = []
        try:
            checkpoint = train_surrogate(store, cae, cvae, config, variant=variant, epochs=epochs)
            if out_dir:
                checkpoint.save(Path(out_dir) / f"surrogate_{variant}.whls")
            for split in ('validation', 'test'):
                metrics = evaluate(checkpoint, store, split).splits[split]
                variant_rows.append({
                    'variant': variant, 'split': split,
                    'mean_3d_mm': metrics.mean_error_mm, 'median_3d_mm': metrics.median_error_mm,
                    'relative_mean_pct': metrics.relative_mean_pct,
                    'relative_median_pct': metrics.relative_median_pct,
                    'mape_pct': metrics.mape_pct, 'pearson_r': metrics.pearson_r,
                    'manifest_hash': manifest_hash, 'error': None,
                })
        except WheelSurrogateException as exc:
            logger.error(f"Variant {variant} failed: {exc.message}", extra={'stage': 'ablate', 'variant': variant})
            variant_rows = [{'variant': variant, 'split': None, 'manifest_hash': manifest_hash, 'error': exc.error_code}]
        except Exception as exc:
            logger.exception(f"Variant {variant} crashed: {exc}", extra={'stage': 'ablate', 'variant': variant})
            variant_rows = [{'variant': variant, 'split': None, 'manifest_hash': manifest_hash, 'error': 'INTERNAL'}]
        rows.extend(variant_rows)
    table = pd.DataFrame(rows).reindex(columns=ABLATION_COLUMNS)
    if out_dir:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        table.to_csv(Path(out_dir) / 'ablation.csv', index=False)
    return table


# ============== Output files ==============

def write_report(report: EvalReport, out_dir) -> Path:
    """report.json, report.csv, scatter.csv and hist.csv"""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / 'report.json').write_text(report.model_dump_json(indent=2) + '\n', encoding='utf-8')

    flat, scatter, hist = [], [], []
    for split, metrics in report.splits.items():
        row = {'model': report.model, 'split': split}
        row.update(metrics.model_dump(exclude={'histogram', 'scatter', 'best_cases', 'worst_cases',
                                               'axis_mean_mm', 'axis_median_mm', 'axis_mean_pct', 'axis_median_pct'}))
        for axis in AXES:
            row[f'{axis}_mean_mm'] = metrics.axis_mean_mm[axis]
            row[f'{axis}_median_mm'] = metrics.axis_median_mm[axis]
            row[f'{axis}_mean_pct'] = metrics.axis_mean_pct[axis]
            row[f'{axis}_median_pct'] = metrics.axis_median_pct[axis]
        flat.append(row)
        scatter += [{'split': split, **p.model_dump()} for p in metrics.scatter]
        hist += [{'split': split, **b.model_dump()} for b in metrics.histogram]
    pd.DataFrame(flat).to_csv(out / 'report.csv', index=False)
    pd.DataFrame(scatter, columns=['split', 'sample_id', 'truth_mpa', 'pred_mpa']).to_csv(out / 'scatter.csv', index=False)
    pd.DataFrame(hist, columns=['split', 'low_mm', 'high_mm', 'count']).to_csv(out / 'hist.csv', index=False)
    return out


def write_heatmap_pgm(heatmap: np.ndarray, path) -> Path:
    """Binary PGM (P5) of a [0, 1] heatmap, row 0 at the top"""
    pixels = np.round(np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0) * 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format='PPM')
    return path
