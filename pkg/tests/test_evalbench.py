import json

import numpy as np
import pandas as pd
import pytest

from modules.evalbench import (
    ABLATION_COLUMNS, ablation_run, baseline_predictions, baseline_report, error_histogram, euclid_error_1d,
    euclid_error_3d, evaluate, heatmap_rmse, mape, pearson_r, relative_error, score_arrays, score_predictions,
    write_heatmap_pgm, write_report,
)
from modules import evalbench
from modules.surrogate import SplitArrays
from utils.exceptions import DatasetError, MetricError


def _arrays(coords, stress, heatmap=None):
    n = len(stress)
    return SplitArrays(
        ids=np.arange(n),
        disk=np.zeros((n, 4, 4), dtype=np.uint8),
        voxels=np.zeros((n, 4, 4, 4), dtype=np.uint8),
        mass_kg=np.full(n, 520.0),
        coords_mm=np.asarray(coords, dtype=np.float64),
        stress_mpa=np.asarray(stress, dtype=np.float64),
        heatmap=heatmap,
    )


# ============== Metrics ==============

def test_three_four_five():
    assert euclid_error_3d([[0.0, 0.0, 0.0]], [[3.0, 4.0, 0.0]])[0] == pytest.approx(5.0)


def test_axis_error_is_absolute():
    assert euclid_error_1d(1, [[0.0, 5.0, 0.0]], [[9.0, -2.0, 1.0]])[0] == pytest.approx(7.0)


@pytest.mark.parametrize('distance, percent', [(31.49, 6.52), (24.73, 5.12), (483.0, 100.0)])
def test_relative_error_against_diameter(distance, percent):
    assert relative_error(distance) == pytest.approx(percent, abs=5e-3)


def test_relative_error_is_proportional():
    assert relative_error(20.0) == pytest.approx(2 * relative_error(10.0))


def test_mape():
    assert mape([100.0, 200.0], [110.0, 180.0]) == pytest.approx(10.0)


def test_mape_rejects_non_positive_truth():
    with pytest.raises(MetricError):
        mape([0.0, 10.0], [1.0, 10.0])


def test_pearson_extremes():
    truth = np.array([1.0, 2.0, 3.0, 4.0])

    assert pearson_r(truth, 2 * truth + 1) == pytest.approx(1.0)
    assert pearson_r(truth, -truth) == pytest.approx(-1.0)


@pytest.mark.parametrize('truth, pred', [([5.0, 5.0, 5.0], [1.0, 2.0, 3.0]), ([1.0], [1.0])])
def test_pearson_undefined(truth, pred):
    with pytest.raises(MetricError) as exc:
        pearson_r(truth, pred)

    assert exc.value.details['metric'] == 'pearson_r'


def test_heatmap_rmse():
    assert heatmap_rmse(np.zeros((2, 8, 8)), np.full((2, 8, 8), 0.1)) == pytest.approx(0.1)


def test_heatmap_shape_mismatch():
    with pytest.raises(MetricError):
        heatmap_rmse(np.zeros((2, 8, 8)), np.zeros((2, 4, 4)))


def test_histogram_bins_are_five_mm():
    bins = error_histogram(np.array([1.0, 2.0, 6.0, 10.0]))

    assert [(b.low_mm, b.high_mm) for b in bins] == [(0.0, 5.0), (5.0, 10.0), (10.0, 15.0)]
    assert [b.count for b in bins] == [2, 1, 1]


# ============== Scoring ==============

def test_perfect_predictor():
    rng = np.random.default_rng(0)
    coords = rng.uniform(-200.0, 200.0, size=(10, 3))
    stress = rng.uniform(100.0, 400.0, size=10)
    maps = rng.uniform(0.0, 1.0, size=(10, 8, 8))

    metrics = score_predictions(coords, stress, coords, stress, maps, maps)

    assert metrics.mean_error_mm == 0.0
    assert metrics.mape_pct == 0.0
    assert metrics.pearson_r == pytest.approx(1.0)
    assert metrics.heatmap_rmse == 0.0
    assert sum(b.count for b in metrics.histogram) == 10


def test_median_is_over_per_sample_errors():
    truth = np.zeros((3, 3))
    pred = np.array([[1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 30.0]])

    metrics = score_predictions(truth, [100.0, 200.0, 300.0], pred, [100.0, 200.0, 300.0])

    assert metrics.median_error_mm == pytest.approx(2.0)
    assert metrics.mean_error_mm == pytest.approx(11.0)
    assert metrics.axis_mean_mm['z'] == pytest.approx(10.0)


def test_cases_are_ordered_by_error():
    truth = np.zeros((4, 3))
    pred = np.array([[3.0, 0, 0], [1.0, 0, 0], [4.0, 0, 0], [2.0, 0, 0]])

    metrics = score_predictions(truth, np.full(4, 100.0), pred, np.full(4, 100.0),
                                sample_ids=[10, 11, 12, 13], n_cases=2)

    assert [c.sample_id for c in metrics.best_cases] == [11, 13]
    assert [c.sample_id for c in metrics.worst_cases] == [12, 10]
    assert metrics.pearson_r is None


def test_empty_split_is_rejected():
    with pytest.raises(DatasetError):
        score_predictions(np.zeros((0, 3)), [], np.zeros((0, 3)), [])


def test_constant_baseline_scores():
    train = _arrays([[0.0, 0.0, 10.0], [20.0, 0.0, 10.0]], [100.0, 300.0])
    target = _arrays([[10.0, 30.0, 10.0], [10.0, 0.0, 50.0]], [100.0, 300.0])

    predictions = baseline_predictions(train, target)
    metrics = score_arrays(target, predictions)

    assert predictions[0].coords_mm == (10.0, 0.0, 10.0)
    assert predictions[0].stress_mpa == 200.0
    assert metrics.mape_pct == pytest.approx(66.667, abs=1e-3)
    assert metrics.mean_error_mm == pytest.approx(35.0)


# ============== End to end ==============

def test_evaluate_writes_report_files(tiny_models, tiny_store, tmp_path):
    report = evaluate(tiny_models['surrogate'], tiny_store, 'test', name='tiny')
    out = write_report(report, tmp_path / 'report')

    metrics = report.splits['test']
    assert metrics.n_samples == len(tiny_store.sample_ids('test'))
    assert metrics.heatmap_rmse is not None
    assert report.provenance['dataset_manifest_hash'] == tiny_store.manifest_hash()
    assert json.loads((out / 'report.json').read_text())['model'] == 'tiny'
    assert len(pd.read_csv(out / 'scatter.csv')) == metrics.n_samples
    assert pd.read_csv(out / 'hist.csv')['count'].sum() == metrics.n_samples
    assert 'x_median_pct' in pd.read_csv(out / 'report.csv').columns


def test_baseline_report(tiny_store):
    report = baseline_report(tiny_store, 'validation')

    assert report.model == 'baseline-constant'
    assert report.splits['validation'].mean_error_mm >= 0.0


def test_heatmap_pgm(tmp_path):
    heatmap = np.linspace(0.0, 1.0, 64).reshape(8, 8)

    path = write_heatmap_pgm(heatmap, tmp_path / 'maps' / 'pred.pgm')
    data = path.read_bytes()

    assert data.startswith(b'P5')
    assert data.endswith(bytes([255]))
    assert len(data) > 64


def test_ablation_trains_every_variant(tiny_store, tiny_models, tiny_config, tmp_path):
    table = ablation_run(tiny_store, tiny_config, tiny_models['cae'], tiny_models['cvae'],
                         out_dir=str(tmp_path), epochs=1)

    assert list(table.columns) == ABLATION_COLUMNS
    assert len(table) == 6
    assert table['error'].isna().all()
    assert set(table['variant']) == {'A', 'B', 'proposed'}
    assert table['manifest_hash'].nunique() == 1
    assert (tmp_path / 'ablation.csv').exists()
    assert (tmp_path / 'surrogate_A.whls').exists()


def test_crashing_variant_does_not_stop_the_ablation(tiny_store, tiny_models, tiny_config, tmp_path, monkeypatch):
    real_train = evalbench.train_surrogate

    def train(store, cae, cvae, config, variant='proposed', epochs=None):
        if variant == 'B':
            raise RuntimeError('out of memory')
        return real_train(store, cae, cvae, config, variant=variant, epochs=epochs)

    monkeypatch.setattr(evalbench, 'train_surrogate', train)

    table = ablation_run(tiny_store, tiny_config, tiny_models['cae'], tiny_models['cvae'],
                         out_dir=str(tmp_path), epochs=1)

    failed = table[table['variant'] == 'B']
    assert failed['error'].tolist() == ['INTERNAL']
    assert failed['split'].isna().all()
    assert len(table[table['variant'] == 'A']) == 2
    assert len(table[table['variant'] == 'proposed']) == 2
    assert len(pd.read_csv(tmp_path / 'ablation.csv')) == 5


def test_variant_failing_on_test_split_leaves_one_error_row(tiny_store, tiny_models, tiny_config, monkeypatch):
    real_evaluate = evalbench.evaluate

    def evaluate_validation_only(checkpoint, store, split, **kwargs):
        if split == 'test':
            raise MetricError("Pearson R is undefined for zero variance", metric='pearson_r')
        return real_evaluate(checkpoint, store, split, **kwargs)

    monkeypatch.setattr(evalbench, 'evaluate', evaluate_validation_only)

    table = ablation_run(tiny_store, tiny_config, tiny_models['cae'], tiny_models['cvae'],
                         variants=('A',), epochs=1)

    assert len(table) == 1
    assert table['error'].tolist() == ['METRIC_ERROR']
