"""
Command-line entry point for WheelSurrogate
"""
import json
import os
import warnings
from pathlib import Path
from typing import Optional, Tuple

os.environ.setdefault('KMP_WARNINGS', '0')
warnings.filterwarnings('ignore', category=DeprecationWarning)

import click

from config import Config
from models import DomainTag
from modules.config import RunConfig
from modules.datastore import DatasetStore
from modules.evalbench import (
    ablation_run, baseline_report, evaluate, write_heatmap_pgm, write_report,
)
from modules.labelkit import label_dataset
from modules.stressoracle import solve_dataset
from modules.surrogate import (
    VARIANTS, Checkpoint, Predictor, parameter_hash, pretrain_cae2d, pretrain_cvae3d,
    learned_profile_encoder, train_surrogate, transfer_finetune,
)
from modules.wheelgen import build_dataset, derive_rim_profiles
from utils.logger import setup_logger
from utils.middleware import RunContext, stage_runner

# Setup logger
logger = setup_logger('wheelsurrogate', Config.LOG_LEVEL, Config.LOG_FILE)


_COMMON_OPTIONS = (
    click.option('--seed', type=int, default=None, help='Master seed (overrides the config file)'),
    click.option('--workers', type=int, default=Config.WORKERS, show_default=True, help='Parallel worker processes'),
    click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None, help='JSON run config'),
    click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None, help='Output directory'),
    click.option('--data', 'data_root', type=click.Path(file_okay=False), default=Config.DATA_ROOT,
                  show_default=True, help='Dataset root'),
    click.option('--paper-scale', is_flag=True, default=False, help='Apply full-resolution constants'),
)


def common_options(func):
    """Flags shared by every command"""
    for option in reversed(_COMMON_OPTIONS):
        func = option(func)
    return func


def _prepare(run: RunContext, seed: Optional[int], config_path: Optional[str], paper_scale: bool,
             data_root: str, out_dir: Optional[str], default_out: Optional[Path] = None
             ) -> Tuple[RunConfig, DatasetStore]:
    """Load the run config, open the dataset and fill the run record"""
    overrides = {} if seed is None else {'seed': seed, 'train': {'seed': seed}}
    run_config = RunConfig.load(config_path, preset='paper' if paper_scale else None, overrides=overrides)
    store = DatasetStore(data_root)
    run.seed = run_config.seed
    run.config_hash = run_config.config_hash()
    run.out_dir = Path(out_dir) if out_dir else (default_out if default_out is not None else store.root)
    return run_config, store


def _load_model(store: DatasetStore, name: str, command: str) -> Checkpoint:
    return Checkpoint.load(store.require_model(name, command))


def _model_name(variant: str) -> str:
    return 'surrogate' if variant == 'proposed' else f"surrogate_{variant}"


@click.group()
def cli():
    """Synthetic wheel impact data and stress surrogate pipeline"""


# ==================== DATA STAGES ====================

@cli.command('gen')
@common_options
@click.option('--n', 'n_samples', type=int, default=300, show_default=True, help='Number of samples')
@click.option('--domain', type=click.Choice([d.value for d in DomainTag]), default=DomainTag.CONCEPT.value,
              show_default=True)
@click.option('--profile-variants', type=int, default=0, show_default=True,
              help='Perturbed rim profiles to cluster; 0 keeps the six canonical ones')
@click.option('--profile-encoder', is_flag=True, default=False,
              help='Cluster rim profiles in a learned latent space instead of raw pixels')
@stage_runner('gen')
def gen(seed, workers, config_path, out_dir, data_root, paper_scale, n_samples, domain,
        profile_variants, profile_encoder, run: RunContext):
    """Generate wheel geometries, barrier masses and splits"""
    run_config, store = _prepare(run, seed, config_path, paper_scale, data_root, out_dir)

    rim_profiles, clustering = None, None
    if profile_variants > 0:
        encoder = learned_profile_encoder(run_config) if profile_encoder else None
        rim_profiles, clustering = derive_rim_profiles(profile_variants, seed=run_config.seed, encoder=encoder)

    manifest = build_dataset(
        n_samples, run_config.seed, run_config, str(store.root), workers=workers,
        domain=DomainTag(domain), rim_profiles=rim_profiles, profile_clustering=clustering,
    )
    run.outputs.update({'manifest': str(store.manifest_path), 'split_counts': manifest['split_counts'],
                        'rejections': manifest['rejections']})


@cli.command('solve')
@common_options
@stage_runner('solve')
def solve(seed, workers, config_path, out_dir, data_root, paper_scale, run: RunContext):
    """Run the finite element oracle on every sample"""
    run_config, store = _prepare(run, seed, config_path, paper_scale, data_root, out_dir)
    results = solve_dataset(store, run_config, workers=workers)
    run.outputs.update({
        'solved': len(results),
        'max_iterations': max((r.get('iterations', 0) for r in results), default=0),
    })


@cli.command('labels')
@common_options
@stage_runner('labels')
def labels(seed, workers, config_path, out_dir, data_root, paper_scale, run: RunContext):
    """Extract max-stress labels and heatmaps, fit the scalers"""
    run_config, store = _prepare(run, seed, config_path, paper_scale, data_root, out_dir)
    label_dataset(store, run_config, workers=workers)
    run.outputs.update({
        'scaler': str(store.scaler_path),
        'labelled': len(store.sample_ids()),
        'label_rejections': store.manifest.get('label_rejections', []),
    })


# ==================== TRAINING ====================

@cli.command('pretrain-cae')
@common_options
@click.option('--epochs', type=int, default=None, help='Overrides train.pretrain_epochs')
@stage_runner('pretrain-cae')
def pretrain_cae(seed, workers, config_path, out_dir, data_root, paper_scale, epochs, run: RunContext):
    """Pretrain the 2D disk-raster autoencoder"""
    run_config, store = _prepare(run, seed, config_path, paper_scale, data_root, out_dir,
                                 default_out=DatasetStore(data_root).models_path)
    checkpoint = pretrain_cae2d(store, run_config, epochs, log_path=run.out_dir / 'cae2d_log.csv')
    path = checkpoint.save(store.model_path('cae2d'))
    run.outputs.update({'checkpoint': str(path), 'parameter_hash': parameter_hash(checkpoint),
                        'val_mse': checkpoint.provenance.get('val_mse')})


@cli.command('pretrain-cvae')
@common_options
@click.option('--epochs', type=int, default=None, help='Overrides train.pretrain_epochs')
@stage_runner('pretrain-cvae')
def pretrain_cvae(seed, workers, config_path, out_dir, data_root, paper_scale, epochs, run: RunContext):
    """Pretrain the 3D voxel variational autoencoder"""
    run_config, store = _prepare(run, seed, config_path, paper_scale, data_root, out_dir,
                                 default_out=DatasetStore(data_root).models_path)
    checkpoint = pretrain_cvae3d(store, run_config, epochs, log_path=run.out_dir / 'cvae3d_log.csv')
    path = checkpoint.save(store.model_path('cvae3d'))
    run.outputs.update({'checkpoint': str(path), 'parameter_hash': parameter_hash(checkpoint),
                        'val_iou': checkpoint.provenance.get('val_iou')})


@cli.command('train')
@common_options
@click.option('--variant', type=click.Choice(VARIANTS), default='proposed', show_default=True)
@click.option('--epochs', type=int, default=None, help='Overrides train.epochs')
@stage_runner('train')
def train(seed, workers, config_path, out_dir, data_root, paper_scale, variant, epochs, run: RunContext):
    """Train the surrogate heads (and heatmap decoder) on the pretrained encoders"""
    run_config, store = _prepare(run, seed, config_path, paper_scale, data_root, out_dir,
                                 default_out=DatasetStore(data_root).models_path)
    cae = None if variant == 'A' else _load_model(store, 'cae2d', 'pretrain-cae')
    cvae = _load_model(store, 'cvae3d', 'pretrain-cvae')
    name = _model_name(variant)
    checkpoint = train_surrogate(store, cae, cvae, run_config, variant=variant, epochs=epochs,
                                 log_path=run.out_dir / f"{name}_log.csv")
    path = checkpoint.save(store.model_path(name))
    run.outputs.update({'checkpoint': str(path), 'variant': variant, 'parameter_hash': parameter_hash(checkpoint)})


@cli.command('transfer')
@common_options
@click.option('--model', 'model_name', default='surrogate', show_default=True,
              help='Source checkpoint name under the data root models directory')
@click.option('--target-data', type=click.Path(file_okay=False), required=True,
              help='Labelled dataset of the target domain')
@click.option('--epochs', type=int, default=None, help='Overrides train.transfer_epochs')
@stage_runner('transfer')
def transfer(seed, workers, config_path, out_dir, data_root, paper_scale, model_name, target_data, epochs,
             run: RunContext):
    """Fine-tune the final layers of a trained surrogate on another domain"""
    run_config, store = _prepare(run, seed, config_path, paper_scale, data_root, out_dir,
                                 default_out=DatasetStore(target_data).models_path)
    source = _load_model(store, model_name, 'train')
    target = DatasetStore(target_data)
    checkpoint = transfer_finetune(source, target, run_config, epochs,
                                   log_path=run.out_dir / f"{model_name}_transfer_log.csv")
    path = checkpoint.save(target.model_path(f"{model_name}_transfer"))
    run.outputs.update({'checkpoint': str(path), 'parent_hash': parameter_hash(source),
                        'parameter_hash': parameter_hash(checkpoint)})


# ==================== EVALUATION ====================

@cli.command('eval')
@common_options
@click.option('--split', type=click.Choice(['train', 'validation', 'test']), default='test', show_default=True)
@click.option('--model', 'model_name', default=None, help='Checkpoint name (defaults to the variant model)')
@click.option('--variant', type=click.Choice(VARIANTS), default='proposed', show_default=True)
@click.option('--baseline', is_flag=True, default=False, help='Also score the constant predictors')
@click.option('--heatmap', 'heatmap_ids', type=int, multiple=True, help='Sample ids to export as PGM heatmaps')
@stage_runner('eval')
def eval_command(seed, workers, config_path, out_dir, data_root, paper_scale, split, model_name, variant,
                 baseline, heatmap_ids, run: RunContext):
    """Score a trained surrogate on one split"""
    name = model_name or _model_name(variant)
    run_config, store = _prepare(run, seed, config_path, paper_scale, data_root, out_dir,
                                 default_out=DatasetStore(data_root).reports_path / name / split)
    checkpoint = _load_model(store, name, 'train')
    report = evaluate(checkpoint, store, split, name)
    write_report(report, run.out_dir)
    metrics = report.splits[split]
    run.outputs.update({'report': str(run.out_dir / 'report.json'),
                        'mean_error_mm': metrics.mean_error_mm, 'mape_pct': metrics.mape_pct})

    if baseline:
        write_report(baseline_report(store, split), run.out_dir / 'baseline')
        run.outputs['baseline_report'] = str(run.out_dir / 'baseline' / 'report.json')

    if heatmap_ids:
        predictor = Predictor(checkpoint)
        for sample_id in heatmap_ids:
            prediction = predictor.predict(store.load_sample(sample_id))
            if prediction.heatmap is None:
                logger.warning("Model has no heatmap decoder", extra={'stage': 'eval', 'sample_id': sample_id})
                break
            write_heatmap_pgm(prediction.heatmap, run.out_dir / f"heatmap_{sample_id}_pred.pgm")
            if store.has_label(sample_id):
                write_heatmap_pgm(store.load_label(sample_id)['heatmap'],
                                  run.out_dir / f"heatmap_{sample_id}_true.pgm")


@cli.command('predict')
@common_options
@click.option('--sample-id', type=int, required=True)
@click.option('--model', 'model_name', default='surrogate', show_default=True)
@stage_runner('predict')
def predict_command(seed, workers, config_path, out_dir, data_root, paper_scale, sample_id, model_name,
                    run: RunContext):
    """Print the predicted max-stress location and value of one sample as JSON"""
    run_config, store = _prepare(run, seed, config_path, paper_scale, data_root, out_dir,
                                 default_out=DatasetStore(data_root).reports_path / 'predict')
    checkpoint = _load_model(store, model_name, 'train')
    prediction = Predictor(checkpoint).predict(store.load_sample(sample_id))
    payload = {
        'sample_id': prediction.sample_id,
        'coords_mm': list(prediction.coords_mm),
        'stress_mpa': prediction.stress_mpa,
        'wall_time_s': prediction.wall_time_s,
    }
    if prediction.heatmap is not None and out_dir:
        payload['heatmap'] = str(write_heatmap_pgm(prediction.heatmap, Path(out_dir) / f"heatmap_{sample_id}.pgm"))
    click.echo(json.dumps(payload, sort_keys=True))
    run.outputs.update(payload)


@cli.command('ablate')
@common_options
@click.option('--epochs', type=int, default=None, help='Overrides train.epochs for every variant')
@stage_runner('ablate')
def ablate(seed, workers, config_path, out_dir, data_root, paper_scale, epochs, run: RunContext):
    """Train and score models A, B and proposed on identical splits"""
    run_config, store = _prepare(run, seed, config_path, paper_scale, data_root, out_dir,
                                 default_out=DatasetStore(data_root).reports_path / 'ablation')
    cae = _load_model(store, 'cae2d', 'pretrain-cae')
    cvae = _load_model(store, 'cvae3d', 'pretrain-cvae')
    table = ablation_run(store, run_config, cae, cvae, out_dir=str(run.out_dir), epochs=epochs)
    run.outputs.update({'ablation': str(run.out_dir / 'ablation.csv'),
                        'failed_variants': table.loc[table['error'].notna(), 'variant'].tolist()})


if __name__ == '__main__':
    cli()
