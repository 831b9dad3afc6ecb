"""
Run configuration for WheelSurrogate pipeline stages

A run is described by one JSON file validated against `RunConfig`. Every field
has a preset default (`desk` or `paper`) and may be overridden individually;
command-line flags are applied last.
"""
import hashlib
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError as PydanticValidationError, field_validator, model_validator

from config import Config
from models import PatternFamily
from utils.exceptions import ConfigValidationError, DatasetError


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


class WheelGenConfig(_Section):
    """Geometry generation ranges"""
    disk_resolution: int = 64
    voxel_resolution: int = 32
    disk_thickness_mm: float = Field(30.0, gt=0)
    families: List[PatternFamily] = Field(default_factory=lambda: list(PatternFamily))
    n_pieces_range: Tuple[int, int] = (4, 9)
    hub_radius_range: Tuple[float, float] = (0.12, 0.18)
    spoke_inner_range: Tuple[float, float] = (0.30, 0.36)
    spoke_outer_range: Tuple[float, float] = (0.74, 0.82)
    hole_width_range: Tuple[float, float] = (0.30, 0.55)
    impact_patch_size: int = Field(4, ge=1)
    hole_tie_tolerance: float = Field(0.02, ge=0, lt=1)
    max_rejection_rate: float = Field(0.05, ge=0, le=1)
    detailed_thickness_mm: float = Field(38.0, gt=0)
    detailed_pocket_radius_mm: float = Field(18.0, gt=0)

    @field_validator('disk_resolution')
    @classmethod
    def _disk_resolution(cls, value: int) -> int:
        if value not in (32, 64, 128):
            raise ValueError('disk_resolution must be one of 32, 64, 128')
        return value

    @field_validator('voxel_resolution')
    @classmethod
    def _voxel_resolution(cls, value: int) -> int:
        if value not in (16, 32, 64):
            raise ValueError('voxel_resolution must be one of 16, 32, 64')
        return value

    @field_validator('n_pieces_range')
    @classmethod
    def _pieces(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        low, high = value
        if not 4 <= low <= high <= 13:
            raise ValueError('n_pieces_range must lie within 4..13 with low <= high')
        return value

    @field_validator('hub_radius_range', 'spoke_inner_range', 'spoke_outer_range', 'hole_width_range')
    @classmethod
    def _fraction_range(cls, value: Tuple[float, float]) -> Tuple[float, float]:
        low, high = value
        if not 0.0 < low <= high < 1.0:
            raise ValueError('fraction ranges must satisfy 0 < low <= high < 1')
        return value

    @model_validator(mode='after')
    def _radial_order(self) -> 'WheelGenConfig':
        if not (self.hub_radius_range[1] < self.spoke_inner_range[0]
                and self.spoke_inner_range[1] < self.spoke_outer_range[0]):
            raise ValueError('radial ranges must not overlap: hub < spoke_inner < spoke_outer')
        return self


class OracleConfig(_Section):
    """FEM oracle settings"""
    youngs_modulus_pa: float = Field(70e9, gt=0)
    poisson_ratio: float = Field(0.33, gt=0, lt=0.5)
    cg_rel_tolerance: float = Field(1e-6, gt=0, lt=1)
    cg_max_iters: int = Field(20000, ge=1)
    reduction_mode: str = Config.REDUCTION_MODE

    @field_validator('reduction_mode')
    @classmethod
    def _mode(cls, value: str) -> str:
        if value not in ('reproducible', 'fast'):
            raise ValueError("reduction_mode must be 'reproducible' or 'fast'")
        return value


class LabelConfig(_Section):
    """Label extraction settings"""
    top_n: int = Field(50, ge=1)
    cluster_radius_mm: float = Field(20.0, gt=0)
    impact_exclusion_radius_mm: float = Field(25.0, ge=0)
    exclude_rim_lower: bool = True
    exclude_negative_principal: bool = True


class ModelConfig(_Section):
    """Network sizes"""
    latent_2d: int = Field(32, ge=1)
    latent_3d: int = Field(128, ge=1)
    width: float = Field(0.5, gt=0)
    head_hidden: Tuple[int, int] = (128, 32)
    decoder_channels: int = Field(32, ge=1)
    kl_weight: float = Field(1e-3, ge=0)
    freeze_encoders: bool = True
    profile_latent_dim: int = Field(64, ge=1)


class TrainConfig(_Section):
    """Optimization hyperparameters"""
    learning_rate: float = Field(1e-4, gt=0)
    batch_size: int = Field(32, ge=1)
    epochs: int = Field(200, ge=0)
    pretrain_epochs: int = Field(200, ge=0)
    seed: int = Config.DEFAULT_SEED
    loss_weights: Dict[str, float] = Field(default_factory=lambda: {'x': 1.0, 'y': 1.0, 'z': 1.0, 's': 1.0, 'I': 1.0})
    transfer_learning_rate: float = Field(1e-5, gt=0)
    transfer_epochs: int = Field(50, ge=0)
    scale_preset: str = 'desk'

    @field_validator('loss_weights')
    @classmethod
    def _weights(cls, value: Dict[str, float]) -> Dict[str, float]:
        unknown = set(value) - {'x', 'y', 'z', 's', 'I'}
        if unknown:
            raise ValueError(f'unknown loss terms: {sorted(unknown)}')
        if any(weight < 0 for weight in value.values()):
            raise ValueError('loss weights must be non-negative')
        return {term: float(value.get(term, 1.0)) for term in ('x', 'y', 'z', 's', 'I')}


PRESETS: Dict[str, Dict[str, Dict[str, Any]]] = {
    'desk': {},
    'paper': {
        'wheelgen': {'disk_resolution': 128, 'voxel_resolution': 64, 'n_pieces_range': (4, 13),
                     'hole_width_range': (0.30, 0.65)},
        'labels': {'cluster_radius_mm': 10.0},
        'model': {'latent_2d': 128, 'latent_3d': 512, 'width': 1.0, 'head_hidden': (256, 64),
                  'decoder_channels': 64},
        'train': {'epochs': 1000, 'pretrain_epochs': 1000, 'scale_preset': 'paper'},
    },
}


class RunConfig(_Section):
    """Complete configuration of a pipeline run"""
    preset: str = 'desk'
    seed: int = Config.DEFAULT_SEED
    wheelgen: WheelGenConfig = Field(default_factory=WheelGenConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    labels: LabelConfig = Field(default_factory=LabelConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @classmethod
    def for_preset(cls, preset: str = 'desk', overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """Build a config from a preset with field-by-field overrides"""
        if preset not in PRESETS:
            raise ConfigValidationError(
                f"Unknown preset {preset!r}",
                fields=[{'field': 'preset', 'message': f"expected one of {sorted(PRESETS)}"}]
            )
        data: Dict[str, Any] = {'preset': preset}
        for section, values in PRESETS[preset].items():
            data[section] = dict(values)
        for key, value in (overrides or {}).items():
            if isinstance(value, dict) and key in cls.model_fields and key not in ('preset', 'seed'):
                data[key] = {**data.get(key, {}), **value}
            else:
                data[key] = value
        return cls.validate_data(data)

    @classmethod
    def validate_data(cls, data: Dict[str, Any]) -> 'RunConfig':
        """Validate raw data, reporting every violated field at once"""
        try:
            return cls.model_validate(data)
        except PydanticValidationError as exc:
            fields = [
                {'field': '.'.join(str(part) for part in error['loc']) or '<root>', 'message': error['msg']}
                for error in exc.errors()
            ]
            raise ConfigValidationError(
                f"Configuration has {len(fields)} invalid field(s)",
                fields=fields
            )

    @classmethod
    def load(cls, path: Optional[str] = None, preset: Optional[str] = None,
             overrides: Optional[Dict[str, Any]] = None) -> 'RunConfig':
        """Load a JSON config file; flags in `overrides` win over the file"""
        file_data: Dict[str, Any] = {}
        if path:
            config_path = Path(path)
            if not config_path.exists():
                raise DatasetError("Config file not found", path=str(config_path))
            try:
                file_data = json.loads(config_path.read_text(encoding='utf-8'))
            except json.JSONDecodeError as exc:
                raise ConfigValidationError(
                    "Config file is not valid JSON",
                    fields=[{'field': '<file>', 'message': str(exc)}]
                )
        chosen = preset or file_data.pop('preset', None) or Config.SCALE_PRESET
        file_data.pop('preset', None)
        merged = _deep_merge(file_data, overrides or {})
        return cls.for_preset(chosen, merged)

    def config_hash(self) -> str:
        """Stable hash of the configuration"""
        payload = json.dumps(self.model_dump(mode='json'), sort_keys=True)
        return hashlib.sha256(payload.encode('utf-8')).hexdigest()

    def echo(self) -> Dict[str, Any]:
        """JSON-ready copy for manifests"""
        return self.model_dump(mode='json')


def _deep_merge(base: Dict[str, Any], top: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in top.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged
