"""
Surrogate models for WheelSurrogate

2D convolutional autoencoder over disk rasters, 3D convolutional variational
autoencoder over voxel grids, and the fused predictor with four regression
heads (x, y, z, stress) and a heatmap decoder. Ablation variants: `B` drops the
heatmap decoder, `A` additionally drops the 2D branch.
"""
import hashlib
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
import torch.nn as nn

from config import Config
from models import Prediction, WheelSample
from modules import formats
from modules.config import RunConfig
from modules.datastore import DatasetStore
from modules.labelkit import MinMaxScaler, load_scaler
from modules.neuralcore import (
    AdamState, Layer, LayerSpec, LayerStack, adam_step, init_weights, kl_standard_normal,
    mse_loss, seed_everything,
)
from utils.exceptions import (
    CheckpointError, DatasetError, ShapeMismatchError, StageDependencyError, TrainingError, ValidationError,
)
from utils.logger import logger

VARIANTS = ('proposed', 'B', 'A')
HEAD_NAMES = ('x', 'y', 'z', 's')
LOSS_TERMS = ('x', 'y', 'z', 's', 'I')
ENCODER_2D_CHANNELS = (16, 32, 64, 128)
ENCODER_3D_CHANNELS = (8, 16, 32, 64)
PROFILE_CHANNELS = (8, 16, 32, 32)
PROFILE_INPUT_SHAPE = (80, 240)
LOG_COLUMNS = ['epoch', 'train_loss', 'val_loss'] + [f'term_{t}' for t in LOSS_TERMS]


# ============== Layer stacks ==============

def _scaled(channels: Sequence[int], width: float) -> Tuple[int, ...]:
    return tuple(max(1, int(round(c * width))) for c in channels)


def _encoder_layers(conv: str, channels: Sequence[int]) -> List[Tuple[str, Dict[str, Any]]]:
    layers: List[Tuple[str, Dict[str, Any]]] = []
    for c in channels:
        layers += [(conv, {'out_channels': c, 'kernel': 3, 'stride': 2, 'padding': 1}), ('relu', {})]
    return layers + [('flatten', {})]


def _decoder_layers(spatial: Sequence[int], start_channels: int, conv_channels: Sequence[int],
                    dims: int) -> List[Tuple[str, Dict[str, Any]]]:
    """dense -> reshape -> 4 x [upsample x2, conv 3, ReLU] with a linear last conv"""
    if any(n % 16 for n in spatial):
        raise ValidationError(f"Decoder output {tuple(spatial)} must be divisible by 16", field='resolution')
    coarse = tuple(n // 16 for n in spatial)
    conv, upsample = ('conv2d', 'upsample2d') if dims == 2 else ('conv3d', 'upsample3d')
    layers: List[Tuple[str, Dict[str, Any]]] = [
        ('dense', {'out_features': start_channels * int(np.prod(coarse))}),
        ('relu', {}),
        ('reshape', {'shape': (start_channels,) + coarse}),
    ]
    for index, c in enumerate(conv_channels):
        last = index == len(conv_channels) - 1
        layers += [(upsample, {}), (conv, {'out_channels': c, 'kernel': 3, 'stride': 1, 'padding': 1, 'linear': last})]
        if not last:
            layers.append(('relu', {}))
    return layers


def _head_layers(hidden: Sequence[int]) -> List[Tuple[str, Dict[str, Any]]]:
    layers: List[Tuple[str, Dict[str, Any]]] = []
    for h in hidden:
        layers += [('dense', {'out_features': int(h)}), ('relu', {})]
    return layers + [('linear_head', {'out_features': 1})]


def build_image_encoder(shape: Tuple[int, int], channels: Sequence[int], latent: int, prefix: str) -> LayerStack:
    return LayerStack.build((1,) + tuple(shape),
                            _encoder_layers('conv2d', channels) + [('linear_head', {'out_features': latent})],
                            prefix=prefix)


class VoxelEncoder(nn.Module):
    """3D conv body with mu / logvar heads"""

    def __init__(self, resolution: int, channels: Sequence[int], latent: int):
        super().__init__()
        self.body = LayerStack.build((1,) + (resolution,) * 3, _encoder_layers('conv3d', channels), prefix='enc3d:')
        flat = self.body.output_shape
        self.mu = Layer(LayerSpec('linear_head', flat, {'out_features': latent}, name='mu'))
        self.logvar = Layer(LayerSpec('linear_head', flat, {'out_features': latent}, name='logvar'))

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        h = self.body(x)
        return self.mu(h), self.logvar(h)


class Cae2d(nn.Module):
    """Convolutional autoencoder of disk-view rasters"""

    def __init__(self, shape: Tuple[int, int], latent: int, width: float = 1.0,
                 base_channels: Sequence[int] = ENCODER_2D_CHANNELS):
        super().__init__()
        channels = _scaled(base_channels, width)
        self.encoder = build_image_encoder(shape, channels, latent, prefix='enc2d:')
        conv_channels = (channels[2], channels[1], channels[0], 1)
        self.decoder = LayerStack.build((latent,), _decoder_layers(shape, channels[3], conv_channels, 2), prefix='dec2d:')

    def forward(self, x: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        z = self.encoder(x)
        return self.decoder(z), z


class Cvae3d(nn.Module):
    """Convolutional variational autoencoder of voxel grids"""

    def __init__(self, resolution: int, latent: int, width: float = 1.0):
        super().__init__()
        channels = _scaled(ENCODER_3D_CHANNELS, width)
        self.encoder = VoxelEncoder(resolution, channels, latent)
        self.sample = Layer(LayerSpec('gaussian_sample', ((latent,), (latent,)), name='sample'))
        conv_channels = (channels[2], channels[1], channels[0], 1)
        self.decoder = LayerStack.build((latent,), _decoder_layers((resolution,) * 3, channels[3], conv_channels, 3),
                                        prefix='dec3d:')

    def forward(self, x: torch.Tensor, stochastic: bool = True):
        mu, logvar = self.encoder(x)
        z = self.sample(mu, logvar) if stochastic else mu
        return self.decoder(z), mu, logvar


class ProfileAutoencoder(Cae2d):
    """Autoencoder of rim cross-section rasters, padded from 70x235 to 80x240"""

    def __init__(self, latent: int = 64, width: float = 1.0):
        super().__init__(PROFILE_INPUT_SHAPE, latent, width, base_channels=PROFILE_CHANNELS)


class SurrogateModel(nn.Module):
    """Fused predictor: [3D latent, 2D latent, scaled mass] -> heads and heatmap decoder"""

    def __init__(self, architecture: Dict[str, Any]):
        super().__init__()
        self.architecture = architecture
        self.variant = architecture['variant']
        if self.variant not in VARIANTS:
            raise ValidationError(f"variant must be one of {VARIANTS}", field='variant')
        disk_shape = tuple(architecture['disk_shape'])
        width = float(architecture['width'])
        latent_2d, latent_3d = int(architecture['latent_2d']), int(architecture['latent_3d'])

        parts: List[Tuple[int, ...]] = [(latent_3d,)]
        if self.uses_disk:
            self.encoder2d = build_image_encoder(disk_shape, _scaled(ENCODER_2D_CHANNELS, width), latent_2d, 'enc2d:')
            parts.append((latent_2d,))
        parts.append((1,))
        self.encoder3d = VoxelEncoder(int(architecture['voxel_resolution']), _scaled(ENCODER_3D_CHANNELS, width), latent_3d)
        self.fusion = Layer(LayerSpec('concat', tuple(parts), name='fusion'))
        self.fusion_size = self.fusion.out_shape[0]

        self.heads = nn.ModuleDict({
            name: LayerStack.build((self.fusion_size,), _head_layers(architecture['head_hidden']), prefix=f'head_{name}:')
            for name in HEAD_NAMES
        })
        if self.has_decoder:
            dc = int(architecture['decoder_channels'])
            self.decoder = LayerStack.build(
                (self.fusion_size,),
                _decoder_layers(disk_shape, dc, (dc, max(1, dc // 2), max(1, dc // 4), 1), 2),
                prefix='dec:'
            )

    @property
    def uses_disk(self) -> bool:
        return self.variant != 'A'

    @property
    def has_decoder(self) -> bool:
        return self.variant == 'proposed'

    def encoder_modules(self) -> List[nn.Module]:
        return [self.encoder3d] + ([self.encoder2d] if self.uses_disk else [])

    def fuse(self, disk: torch.Tensor, voxels: torch.Tensor, mass_scaled: torch.Tensor) -> torch.Tensor:
        mu, _ = self.encoder3d(voxels)
        parts = [mu]
        if self.uses_disk:
            parts.append(self.encoder2d(disk))
        parts.append(mass_scaled.reshape(-1, 1).to(mu.dtype))
        return self.fusion(*parts)

    def forward_fused(self, fusion: torch.Tensor) -> Dict[str, Optional[torch.Tensor]]:
        outputs: Dict[str, Optional[torch.Tensor]] = {name: head(fusion).squeeze(1) for name, head in self.heads.items()}
        outputs['I'] = self.decoder(fusion).squeeze(1) if self.has_decoder else None
        return outputs

    def forward(self, disk: torch.Tensor, voxels: torch.Tensor, mass_scaled: torch.Tensor):
        return self.forward_fused(self.fuse(disk, voxels, mass_scaled))

    def final_layer_parameters(self) -> Dict[str, nn.Parameter]:
        """Parameters of the last layer of every head and of the decoder"""
        stacks = {f'heads.{name}': head for name, head in self.heads.items()}
        if self.has_decoder:
            stacks['decoder'] = self.decoder
        selected: Dict[str, nn.Parameter] = {}
        named = dict(self.named_parameters())
        for prefix, stack in stacks.items():
            last = stack.parametric_layers()[-1]
            for name, parameter in named.items():
                if name.startswith(prefix + '.') and any(parameter is p for p in last.parameters()):
                    selected[name] = parameter
        return selected


# ============== Checkpoints ==============

@dataclass(eq=False)
class Checkpoint:
    """Architecture, scalers, provenance and ordered float32 tensors of a model"""
    kind: str
    architecture: Dict[str, Any]
    tensors: 'OrderedDict[str, np.ndarray]'
    scalers: Dict[str, Any] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)
    format_version: int = Config.FORMAT_VERSION

    def to_bytes(self) -> bytes:
        header = {
            'format_version': self.format_version,
            'kind': self.kind,
            'architecture': self.architecture,
            'scalers': self.scalers,
            'provenance': self.provenance,
        }
        return formats.encode_checkpoint(header, self.tensors)

    @classmethod
    def from_bytes(cls, data: bytes, path: Optional[str] = None) -> 'Checkpoint':
        header, tensors = formats.decode_checkpoint(data, path)
        try:
            return cls(
                kind=header['kind'],
                architecture=header['architecture'],
                tensors=tensors,
                scalers=header.get('scalers', {}),
                provenance=header.get('provenance', {}),
                format_version=header.get('format_version', Config.FORMAT_VERSION),
            )
        except KeyError as exc:
            raise CheckpointError(f"Checkpoint header misses {exc}", path=path)

    def save(self, path) -> Path:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_bytes(self.to_bytes())
        except OSError as exc:
            raise CheckpointError(f"Failed to write checkpoint: {exc}", path=str(path))
        return path

    @classmethod
    def load(cls, path) -> 'Checkpoint':
        try:
            data = Path(path).read_bytes()
        except OSError as exc:
            raise CheckpointError(f"Failed to read checkpoint: {exc}", path=str(path))
        return cls.from_bytes(data, str(path))


def build_model(kind: str, architecture: Dict[str, Any]) -> nn.Module:
    if kind == 'cae2d':
        return Cae2d(tuple(architecture['disk_shape']), int(architecture['latent_2d']), float(architecture['width']))
    if kind == 'cvae3d':
        return Cvae3d(int(architecture['voxel_resolution']), int(architecture['latent_3d']), float(architecture['width']))
    if kind == 'profile_ae':
        return ProfileAutoencoder(int(architecture['latent']), float(architecture.get('width', 1.0)))
    if kind == 'surrogate':
        return SurrogateModel(architecture)
    raise CheckpointError(f"Unknown model kind {kind!r}")


def checkpoint_from_model(model: nn.Module, kind: str, architecture: Dict[str, Any],
                          scalers: Optional[Dict[str, Any]] = None,
                          provenance: Optional[Dict[str, Any]] = None) -> Checkpoint:
    tensors: 'OrderedDict[str, np.ndarray]' = OrderedDict(
        (name, p.detach().cpu().numpy().astype(np.float32).copy()) for name, p in model.named_parameters()
    )
    return Checkpoint(kind, architecture, tensors, scalers or {}, provenance or {})


def model_from_checkpoint(checkpoint: Checkpoint) -> nn.Module:
    """Rebuild a model and load its tensors; names and shapes must match exactly"""
    model = build_model(checkpoint.kind, checkpoint.architecture)
    expected = OrderedDict((name, tuple(p.shape)) for name, p in model.named_parameters())
    actual = OrderedDict((name, tuple(a.shape)) for name, a in checkpoint.tensors.items())
    if expected != actual:
        missing = sorted(set(expected) - set(actual))
        unexpected = sorted(set(actual) - set(expected))
        raise CheckpointError(
            "Checkpoint tensors do not match the declared architecture",
            details={'missing': missing[:10], 'unexpected': unexpected[:10]}
        )
    state = {name: torch.from_numpy(np.array(array, dtype=np.float32)) for name, array in checkpoint.tensors.items()}
    model.load_state_dict(state, strict=True)
    model.eval()
    return model


def parameter_hash(source, names: Optional[Sequence[str]] = None, prefix: Optional[str] = None) -> str:
    """SHA-256 over selected float32 tensors of a checkpoint or model"""
    if isinstance(source, Checkpoint):
        tensors = source.tensors
    else:
        tensors = OrderedDict((n, p.detach().cpu().numpy().astype(np.float32)) for n, p in source.named_parameters())
    selected = sorted(names) if names is not None else sorted(tensors)
    if prefix is not None:
        selected = [n for n in selected if n.startswith(prefix)]
    digest = hashlib.sha256()
    for name in selected:
        digest.update(name.encode('utf-8'))
        digest.update(np.ascontiguousarray(tensors[name], dtype='<f4').tobytes())
    return digest.hexdigest()


# ============== Data ==============

@dataclass(eq=False)
class SplitArrays:
    """Inputs and (optionally) targets of one split"""
    ids: np.ndarray
    disk: np.ndarray                       # (n, H, W) uint8
    voxels: np.ndarray                     # (n, D, D, D) uint8
    mass_kg: np.ndarray
    coords_mm: Optional[np.ndarray] = None
    stress_mpa: Optional[np.ndarray] = None
    heatmap: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.ids)

    def disk_tensor(self, idx) -> torch.Tensor:
        return torch.from_numpy(self.disk[idx].astype(np.float32)).unsqueeze(1)

    def voxel_tensor(self, idx) -> torch.Tensor:
        return torch.from_numpy(self.voxels[idx].astype(np.float32)).unsqueeze(1)


def arrays_from_samples(samples: Sequence[WheelSample]) -> SplitArrays:
    return SplitArrays(
        ids=np.array([s.sample_id for s in samples], dtype=np.int64),
        disk=np.stack([s.geometry.disk_raster for s in samples]).astype(np.uint8),
        voxels=np.stack([s.geometry.voxels for s in samples]).astype(np.uint8),
        mass_kg=np.array([s.barrier_mass_kg for s in samples], dtype=np.float64),
    )


def load_split(store: DatasetStore, split: str, with_labels: bool = True) -> SplitArrays:
    ids = store.sample_ids(split)
    if not ids:
        raise DatasetError(f"Split '{split}' is empty", path=str(store.root))
    if with_labels:
        missing = store.missing_labels(ids)
        if missing:
            raise StageDependencyError(
                f"{len(missing)} sample(s) in '{split}' have no label; run the 'labels' command first",
                prerequisite='labels',
                details={'sample_ids': missing}
            )
    arrays = arrays_from_samples([store.load_sample(i) for i in ids])
    if with_labels:
        labels = [store.load_label(i) for i in ids]
        arrays.coords_mm = np.array([[l['x_mm'], l['y_mm'], l['z_mm']] for l in labels], dtype=np.float64)
        arrays.stress_mpa = np.array([l['stress_mpa'] for l in labels], dtype=np.float64)
        arrays.heatmap = np.stack([l['heatmap'] for l in labels]).astype(np.float32)
    return arrays


def scaled_targets(arrays: SplitArrays, scaler: MinMaxScaler) -> Dict[str, torch.Tensor]:
    targets = {
        'x': scaler.apply('x', arrays.coords_mm[:, 0]),
        'y': scaler.apply('y', arrays.coords_mm[:, 1]),
        'z': scaler.apply('z', arrays.coords_mm[:, 2]),
        's': scaler.apply('stress', arrays.stress_mpa),
    }
    tensors = {k: torch.from_numpy(np.asarray(v, dtype=np.float32)) for k, v in targets.items()}
    tensors['I'] = torch.from_numpy(arrays.heatmap.astype(np.float32))
    return tensors


def scaled_mass(arrays: SplitArrays, scaler: MinMaxScaler) -> torch.Tensor:
    return torch.from_numpy(np.asarray(scaler.apply('mass', arrays.mass_kg), dtype=np.float32))


# ============== Training loop ==============

def _batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def _fit(
    stage: str,
    model: nn.Module,
    trainable: Dict[str, nn.Parameter],
    n_train: int,
    batch_loss: Callable[[np.ndarray], Tuple[torch.Tensor, Dict[str, float]]],
    val_loss: Callable[[], float],
    epochs: int,
    learning_rate: float,
    batch_size: int,
    seed: int,
) -> pd.DataFrame:
    """Minibatch Adam over `epochs`; returns the per-epoch log (epoch 0 = before training)"""
    state = AdamState.create(trainable, learning_rate)
    with torch.no_grad():
        model.eval()
        rows = [{'epoch': 0, 'train_loss': np.nan, 'val_loss': val_loss()}]
    for epoch in range(1, epochs + 1):
        model.train()
        total, terms_total = 0.0, {}
        for idx in _batches(n_train, batch_size, seed, epoch):
            state.zero_grad()
            loss, terms = batch_loss(idx)
            if not torch.isfinite(loss):
                raise TrainingError(f"Non-finite {stage} loss", epoch=epoch)
            loss.backward()
            adam_step(state)
            total += float(loss.detach()) * len(idx)
            for name, value in terms.items():
                terms_total[name] = terms_total.get(name, 0.0) + value * len(idx)
        model.eval()
        with torch.no_grad():
            validation = val_loss()
        if not np.isfinite(validation):
            raise TrainingError(f"Non-finite {stage} validation loss", epoch=epoch)
        row = {'epoch': epoch, 'train_loss': total / n_train, 'val_loss': validation}
        row.update({f'term_{k}': v / n_train for k, v in terms_total.items()})
        rows.append(row)
        logger.info(
            f"{stage} epoch done",
            extra={'stage': stage, 'epoch': epoch, 'train_loss': row['train_loss'], 'val_loss': validation}
        )
    return pd.DataFrame(rows)


def write_training_log(log: pd.DataFrame, path, columns: Sequence[str] = LOG_COLUMNS) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    log.reindex(columns=list(columns)).to_csv(path, index=False)


def _provenance(config: RunConfig, store: Optional[DatasetStore], epochs: int, **extra) -> Dict[str, Any]:
    provenance = {'seed': config.train.seed, 'config_hash': config.config_hash(), 'epoch': epochs}
    if store is not None:
        provenance['manifest_hash'] = store.manifest_hash()
    provenance.update(extra)
    return provenance


# ============== Pretraining ==============

def _cae_architecture(config: RunConfig) -> Dict[str, Any]:
    resolution = config.wheelgen.disk_resolution
    return {'disk_shape': [resolution, resolution], 'latent_2d': config.model.latent_2d, 'width': config.model.width}


def _cvae_architecture(config: RunConfig) -> Dict[str, Any]:
    return {'voxel_resolution': config.wheelgen.voxel_resolution, 'latent_3d': config.model.latent_3d,
            'width': config.model.width, 'kl_weight': config.model.kl_weight}


def pretrain_cae2d(store: DatasetStore, config: RunConfig, epochs: Optional[int] = None,
                   log_path: Optional[str] = None) -> Checkpoint:
    """Reconstruction training of the disk-raster autoencoder"""
    epochs = config.train.pretrain_epochs if epochs is None else epochs
    train = load_split(store, 'train', with_labels=False)
    val = load_split(store, 'validation', with_labels=False)
    _check_resolution(train.disk.shape[1:], tuple(_cae_architecture(config)['disk_shape']), 'disk raster')

    seed_everything(config.train.seed)
    architecture = _cae_architecture(config)
    model = init_weights(build_model('cae2d', architecture))

    def batch_loss(idx):
        x = train.disk_tensor(idx)
        recon, _ = model(x)
        loss = mse_loss(recon, x)
        return loss, {}

    def val_loss():
        x = val.disk_tensor(slice(None))
        return float(mse_loss(model(x)[0], x))

    log = _fit('pretrain-cae', model, dict(model.named_parameters()), len(train), batch_loss, val_loss,
               epochs, config.train.learning_rate, config.train.batch_size, config.train.seed)
    if log_path:
        write_training_log(log, log_path, ['epoch', 'train_loss', 'val_loss'])
    zero_mse = float(np.mean(val.disk.astype(np.float64) ** 2))
    return checkpoint_from_model(model, 'cae2d', architecture, provenance=_provenance(
        config, store, epochs, val_mse=float(log['val_loss'].iloc[-1]), zero_predictor_mse=zero_mse
    ))


def reconstruction_iou(pred: np.ndarray, truth: np.ndarray, threshold: float = 0.5) -> float:
    """Intersection over union of thresholded occupancy; 1.0 when both are empty"""
    p = np.asarray(pred) > threshold
    t = np.asarray(truth) > 0.5
    union = np.logical_or(p, t).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(p, t).sum() / union)


def cvae_loss(model: Cvae3d, x: torch.Tensor, kl_weight: float, stochastic: bool = True) -> Tuple[torch.Tensor, Dict[str, float]]:
    recon, mu, logvar = model(x, stochastic=stochastic)
    reconstruction = mse_loss(recon, x)
    kl = kl_standard_normal(mu, logvar)
    return reconstruction + kl_weight * kl, {'recon': float(reconstruction.detach()), 'kl': float(kl.detach())}


def pretrain_cvae3d(store: DatasetStore, config: RunConfig, epochs: Optional[int] = None,
                    log_path: Optional[str] = None) -> Checkpoint:
    """Reconstruction + beta * KL training of the voxel VAE; validation uses the mean latent"""
    epochs = config.train.pretrain_epochs if epochs is None else epochs
    train = load_split(store, 'train', with_labels=False)
    val = load_split(store, 'validation', with_labels=False)
    resolution = config.wheelgen.voxel_resolution
    _check_resolution(train.voxels.shape[1:], (resolution,) * 3, 'voxel grid')

    generator = seed_everything(config.train.seed)
    architecture = _cvae_architecture(config)
    model = init_weights(build_model('cvae3d', architecture))
    model.sample.module.generator = generator
    beta = config.model.kl_weight

    def batch_loss(idx):
        return cvae_loss(model, train.voxel_tensor(idx), beta, stochastic=True)

    def val_loss():
        return float(cvae_loss(model, val.voxel_tensor(slice(None)), beta, stochastic=False)[0])

    log = _fit('pretrain-cvae', model, dict(model.named_parameters()), len(train), batch_loss, val_loss,
               epochs, config.train.learning_rate, config.train.batch_size, config.train.seed)
    if log_path:
        write_training_log(log, log_path, ['epoch', 'train_loss', 'val_loss'])

    with torch.no_grad():
        recon, _, _ = model(val.voxel_tensor(slice(None)), stochastic=False)
    iou = reconstruction_iou(recon.squeeze(1).numpy(), val.voxels)
    empty_iou = reconstruction_iou(np.zeros_like(val.voxels), val.voxels)
    logger.info(f"cVAE validation IoU {iou:.3f} (empty prediction {empty_iou:.3f})", extra={'stage': 'pretrain-cvae'})
    return checkpoint_from_model(model, 'cvae3d', architecture, provenance=_provenance(
        config, store, epochs, val_iou=iou, empty_iou=empty_iou
    ))


def _check_resolution(actual, expected, what: str) -> None:
    if tuple(actual) != tuple(expected):
        raise ShapeMismatchError(what, tuple(expected), tuple(actual))


# ============== Profile encoder ==============

def pad_profiles(rasters: np.ndarray) -> np.ndarray:
    """(n, 70, 235) -> (n, 1, 80, 240) float32, zero padded at the bottom and right"""
    rasters = np.asarray(rasters, dtype=np.float32)
    n, h, w = rasters.shape
    padded = np.zeros((n, 1) + PROFILE_INPUT_SHAPE, dtype=np.float32)
    padded[:, 0, :h, :w] = rasters
    return padded


def train_profile_encoder(rasters: np.ndarray, latent: int = 64, epochs: int = 50, seed: int = 0,
                          learning_rate: float = 1e-3, batch_size: int = 32) -> ProfileAutoencoder:
    """Fit the rim-profile autoencoder on binary cross-section rasters"""
    x_all = torch.from_numpy(pad_profiles(rasters))
    seed_everything(seed)
    model = init_weights(ProfileAutoencoder(latent))

    def batch_loss(idx):
        x = x_all[idx]
        return mse_loss(model(x)[0], x), {}

    def val_loss():
        return float(mse_loss(model(x_all)[0], x_all))

    _fit('profile-ae', model, dict(model.named_parameters()), len(x_all), batch_loss, val_loss,
         epochs, learning_rate, batch_size, seed)
    return model


def profile_encoder_fn(model: ProfileAutoencoder) -> Callable[[np.ndarray], np.ndarray]:
    """Callable mapping rasters to latent vectors, for rim-profile clustering"""
    def encode(rasters: np.ndarray) -> np.ndarray:
        model.eval()
        with torch.no_grad():
            return model.encoder(torch.from_numpy(pad_profiles(rasters))).numpy().astype(np.float64)
    return encode


def learned_profile_encoder(config: RunConfig, epochs: int = 50) -> Callable[[np.ndarray], np.ndarray]:
    """Encoder for cluster_rim_profiles that first fits a profile autoencoder of model.profile_latent_dim"""
    def encode(rasters: np.ndarray) -> np.ndarray:
        model = train_profile_encoder(rasters, latent=config.model.profile_latent_dim, epochs=epochs,
                                      seed=config.seed)
        return profile_encoder_fn(model)(rasters)
    return encode


# ============== Surrogate ==============

def surrogate_architecture(config: RunConfig, variant: str) -> Dict[str, Any]:
    resolution = config.wheelgen.disk_resolution
    return {
        'variant': variant,
        'disk_shape': [resolution, resolution],
        'voxel_resolution': config.wheelgen.voxel_resolution,
        'latent_2d': config.model.latent_2d,
        'latent_3d': config.model.latent_3d,
        'width': config.model.width,
        'head_hidden': list(config.model.head_hidden),
        'decoder_channels': config.model.decoder_channels,
    }


def surrogate_loss(outputs: Dict[str, Optional[torch.Tensor]], targets: Dict[str, torch.Tensor],
                   weights: Dict[str, float], variant: str = 'proposed') -> Tuple[torch.Tensor, Dict[str, float]]:
    """Weighted sum of per-branch MSEs; the heatmap term exists only with a decoder"""
    terms = [t for t in LOSS_TERMS if t != 'I' or variant == 'proposed']
    values = {t: mse_loss(outputs[t], targets[t]) for t in terms}
    total = sum(weights.get(t, 1.0) * values[t] for t in terms)
    return total, {t: float(v.detach()) for t, v in values.items()}


def load_encoders(model: SurrogateModel, cae: Optional[Checkpoint], cvae: Checkpoint) -> None:
    """Copy pretrained encoder weights into the surrogate"""
    if cvae.kind != 'cvae3d':
        raise CheckpointError(f"Expected a cvae3d checkpoint, got {cvae.kind!r}")
    source = model_from_checkpoint(cvae)
    try:
        model.encoder3d.load_state_dict(source.encoder.state_dict())
        if model.uses_disk:
            if cae is None or cae.kind != 'cae2d':
                raise CheckpointError("A cae2d checkpoint is required for variants with the 2D branch")
            model.encoder2d.load_state_dict(model_from_checkpoint(cae).encoder.state_dict())
    except RuntimeError as exc:
        raise CheckpointError(f"Encoder architecture mismatch: {exc}")


def set_trainable(model: nn.Module, names: Sequence[str]) -> Dict[str, nn.Parameter]:
    keep = set(names)
    trainable = {}
    for name, parameter in model.named_parameters():
        parameter.requires_grad_(name in keep)
        if name in keep:
            trainable[name] = parameter
    return trainable


def _fused_inputs(model: SurrogateModel, arrays: SplitArrays, scaler: MinMaxScaler,
                  batch_size: int = 64) -> torch.Tensor:
    mass = scaled_mass(arrays, scaler)
    chunks = []
    with torch.no_grad():
        for start in range(0, len(arrays), batch_size):
            idx = np.arange(start, min(start + batch_size, len(arrays)))
            chunks.append(model.fuse(arrays.disk_tensor(idx), arrays.voxel_tensor(idx), mass[idx]))
    return torch.cat(chunks)


def _train_heads(stage: str, model: SurrogateModel, trainable: Dict[str, nn.Parameter],
                 train: SplitArrays, val: SplitArrays, scaler: MinMaxScaler, config: RunConfig,
                 epochs: int, learning_rate: float, frozen_encoders: bool) -> pd.DataFrame:
    weights = config.train.loss_weights
    train_targets, val_targets = scaled_targets(train, scaler), scaled_targets(val, scaler)
    train_mass = scaled_mass(train, scaler)

    if frozen_encoders:
        train_fused = _fused_inputs(model, train, scaler)
        val_fused = _fused_inputs(model, val, scaler)

        def outputs_for(idx):
            return model.forward_fused(train_fused[idx])
    else:
        val_fused = None

        def outputs_for(idx):
            return model(train.disk_tensor(idx), train.voxel_tensor(idx), train_mass[idx])

    def batch_loss(idx):
        targets = {k: v[idx] for k, v in train_targets.items()}
        return surrogate_loss(outputs_for(idx), targets, weights, model.variant)

    def val_loss():
        fused = val_fused if val_fused is not None else _fused_inputs(model, val, scaler)
        return float(surrogate_loss(model.forward_fused(fused), val_targets, weights, model.variant)[0])

    return _fit(stage, model, trainable, len(train), batch_loss, val_loss, epochs, learning_rate,
                config.train.batch_size, config.train.seed)


def train_surrogate(store: DatasetStore, cae: Optional[Checkpoint], cvae: Checkpoint, config: RunConfig,
                    variant: str = 'proposed', epochs: Optional[int] = None,
                    log_path: Optional[str] = None) -> Checkpoint:
    """
    Train regression heads and heatmap decoder on pretrained encoders

    Args:
        store: Labelled dataset
        cae: 2D autoencoder checkpoint (unused by variant A)
        cvae: 3D VAE checkpoint
        config: Run configuration
        variant: proposed, B or A
        epochs: Overrides config.train.epochs
        log_path: Optional CSV training log

    Returns:
        Surrogate checkpoint carrying the fitted scalers
    """
    if variant not in VARIANTS:
        raise ValidationError(f"variant must be one of {VARIANTS}", field='variant')
    epochs = config.train.epochs if epochs is None else epochs
    scaler = load_scaler(store)
    train = load_split(store, 'train')
    val = load_split(store, 'validation')

    seed_everything(config.train.seed)
    architecture = surrogate_architecture(config, variant)
    model = init_weights(SurrogateModel(architecture))
    load_encoders(model, cae, cvae)

    frozen = config.model.freeze_encoders
    encoder_names = {n for n, _ in model.named_parameters() if n.startswith(('encoder2d.', 'encoder3d.'))}
    names = [n for n, _ in model.named_parameters() if not (frozen and n in encoder_names)]
    trainable = set_trainable(model, names)

    log = _train_heads('train', model, trainable, train, val, scaler, config, epochs,
                       config.train.learning_rate, frozen)
    if log_path:
        write_training_log(log, log_path)
    set_trainable(model, [n for n, _ in model.named_parameters()])
    return checkpoint_from_model(model, 'surrogate', architecture, scalers=scaler.to_dict(),
                                 provenance=_provenance(config, store, epochs, variant=variant,
                                                        final_val_loss=float(log['val_loss'].iloc[-1])))


def transfer_finetune(checkpoint: Checkpoint, store: DatasetStore, config: RunConfig,
                      epochs: Optional[int] = None, log_path: Optional[str] = None) -> Checkpoint:
    """
    Fine-tune only the final layer of each head and of the decoder on a new domain

    Scalers are refit on the new training split; zero epochs return the input checkpoint.
    """
    epochs = config.train.transfer_epochs if epochs is None else epochs
    if checkpoint.kind != 'surrogate':
        raise CheckpointError(f"Transfer needs a surrogate checkpoint, got {checkpoint.kind!r}")
    if epochs == 0:
        return checkpoint
    expected = surrogate_architecture(config, checkpoint.architecture['variant'])
    if {k: checkpoint.architecture.get(k) for k in expected} != expected:
        raise CheckpointError("Checkpoint architecture does not match the configured resolutions and sizes",
                              details={'checkpoint': checkpoint.architecture, 'config': expected})

    scaler = load_scaler(store)
    train = load_split(store, 'train')
    val = load_split(store, 'validation')
    seed_everything(config.train.seed)
    model = model_from_checkpoint(checkpoint)
    trainable = set_trainable(model, list(model.final_layer_parameters()))

    log = _train_heads('transfer', model, trainable, train, val, scaler, config, epochs,
                       config.train.transfer_learning_rate, frozen_encoders=True)
    if log_path:
        write_training_log(log, log_path)
    set_trainable(model, [n for n, _ in model.named_parameters()])
    return checkpoint_from_model(
        model, 'surrogate', checkpoint.architecture, scalers=scaler.to_dict(),
        provenance=_provenance(config, store, epochs, variant=checkpoint.architecture['variant'],
                               parent_hash=parameter_hash(checkpoint), transfer=True)
    )


# ============== Inference ==============

class Predictor:
    """Loaded surrogate with its scalers, for repeated inference"""

    def __init__(self, checkpoint: Checkpoint):
        if checkpoint.kind != 'surrogate':
            raise CheckpointError(f"Expected a surrogate checkpoint, got {checkpoint.kind!r}")
        self.checkpoint = checkpoint
        self.model: SurrogateModel = model_from_checkpoint(checkpoint)
        self.scaler = MinMaxScaler.from_dict(checkpoint.scalers)
        self.disk_shape = tuple(checkpoint.architecture['disk_shape'])
        self.voxel_shape = (int(checkpoint.architecture['voxel_resolution']),) * 3

    def predict_arrays(self, arrays: SplitArrays, batch_size: int = 64) -> List[Prediction]:
        _check_resolution(arrays.disk.shape[1:], self.disk_shape, 'disk raster')
        _check_resolution(arrays.voxels.shape[1:], self.voxel_shape, 'voxel grid')
        mass = scaled_mass(arrays, self.scaler)
        predictions: List[Prediction] = []
        for start in range(0, len(arrays), batch_size):
            idx = np.arange(start, min(start + batch_size, len(arrays)))
            began = time.perf_counter()
            with torch.no_grad():
                out = self.model(arrays.disk_tensor(idx), arrays.voxel_tensor(idx), mass[idx])
            elapsed = (time.perf_counter() - began) / len(idx)
            x = self.scaler.invert('x', out['x'].numpy().astype(np.float64))
            y = self.scaler.invert('y', out['y'].numpy().astype(np.float64))
            z = self.scaler.invert('z', out['z'].numpy().astype(np.float64))
            s = self.scaler.invert('stress', out['s'].numpy().astype(np.float64))
            heatmaps = np.clip(out['I'].numpy(), 0.0, 1.0) if out['I'] is not None else None
            for j, position in enumerate(idx):
                predictions.append(Prediction(
                    sample_id=int(arrays.ids[position]),
                    coords_mm=(float(x[j]), float(y[j]), float(z[j])),
                    stress_mpa=float(s[j]),
                    heatmap=heatmaps[j] if heatmaps is not None else None,
                    wall_time_s=elapsed,
                ))
        return predictions

    def predict(self, sample: WheelSample) -> Prediction:
        return self.predict_arrays(arrays_from_samples([sample]), batch_size=1)[0]


def predict(checkpoint: Checkpoint, sample: WheelSample) -> Prediction:
    """Unscaled coordinates (mm), stress (MPa) and normalized heatmap of one sample"""
    return Predictor(checkpoint).predict(sample)
