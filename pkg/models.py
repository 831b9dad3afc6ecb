"""
Domain models for WheelSurrogate
"""
import enum
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, NamedTuple, Optional, Tuple

import numpy as np

from config import Config
from utils.exceptions import ValidationError

WHEEL_RADIUS_MM = Config.WHEEL_DIAMETER_MM / 2.0


class PatternFamily(str, enum.Enum):
    """Spoke pattern families"""
    RADIAL_BAR = "radial-bar"
    Y_FORK = "Y-fork"
    TWISTED_VANE = "twisted-vane"
    RING_WINDOW = "ring-window"

class Split(str, enum.Enum):
    """Dataset split"""
    TRAIN = "train"
    VALIDATION = "validation"
    TEST = "test"

class DomainTag(str, enum.Enum):
    """Data domain of a sample"""
    CONCEPT = "concept"
    DETAILED = "detailed"


def cell_centers(n: int, radius_mm: float = WHEEL_RADIUS_MM) -> np.ndarray:
    """Centers of n equal cells spanning [-radius, radius]"""
    step = 2.0 * radius_mm / n
    return -radius_mm + (np.arange(n) + 0.5) * step


@dataclass(frozen=True)
class SpokeSpec:
    """Parametric description of one spoke pattern"""
    n_pieces: int
    pattern_family: PatternFamily
    hub_radius_frac: float
    spoke_inner_frac: float
    spoke_outer_frac: float
    hole_width_frac: float
    seed: int = 0

    def validate(self) -> 'SpokeSpec':
        """Raise ValidationError naming the first violated invariant"""
        if not 4 <= self.n_pieces <= 13:
            raise ValidationError(
                f"n_pieces must satisfy 4 <= n_pieces <= 13, got {self.n_pieces}",
                field='n_pieces'
            )
        try:
            PatternFamily(self.pattern_family)
        except ValueError:
            raise ValidationError(f"Unknown pattern family {self.pattern_family!r}", field='pattern_family')
        if not 0.0 < self.hub_radius_frac < self.spoke_inner_frac < self.spoke_outer_frac < 1.0:
            raise ValidationError(
                "radial fractions must satisfy 0 < hub_radius_frac < spoke_inner_frac < spoke_outer_frac < 1",
                field='hub_radius_frac',
                details={
                    'hub_radius_frac': self.hub_radius_frac,
                    'spoke_inner_frac': self.spoke_inner_frac,
                    'spoke_outer_frac': self.spoke_outer_frac
                }
            )
        if not 0.0 < self.hole_width_frac < 1.0:
            raise ValidationError(
                f"hole_width_frac must satisfy 0 < hole_width_frac < 1, got {self.hole_width_frac}",
                field='hole_width_frac'
            )
        return self

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['pattern_family'] = PatternFamily(self.pattern_family).value
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SpokeSpec':
        return cls(**{**data, 'pattern_family': PatternFamily(data['pattern_family'])})


@dataclass(frozen=True, eq=False)
class RimProfile:
    """Revolved rim cross-section: polyline of (radius mm, height mm) and its 70x235 raster"""
    id: int
    polyline: Tuple[Tuple[float, float], ...]
    raster: np.ndarray


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic linear-elastic material"""
    youngs_modulus_pa: float = 70e9
    poisson_ratio: float = 0.33

    def validate(self) -> 'MaterialParams':
        if not self.youngs_modulus_pa > 0:
            raise ValidationError("youngs_modulus_pa must be > 0", field='youngs_modulus_pa')
        if not 0.0 < self.poisson_ratio < 0.5:
            raise ValidationError("poisson_ratio must satisfy 0 < nu < 0.5", field='poisson_ratio')
        return self


@dataclass(eq=False)
class WheelGeometry:
    """Disk-view raster, voxel occupancy and boundary-condition sets of one wheel"""
    disk_raster: np.ndarray
    voxels: np.ndarray
    pitch_mm: float
    disk_thickness_mm: float
    impact_location_mm: Tuple[float, float, float]
    hub_voxel_ids: np.ndarray
    impact_face_voxel_ids: np.ndarray
    diameter_mm: float = Config.WHEEL_DIAMETER_MM
    attachment_z_mm: float = 0.0

    @property
    def resolution(self) -> int:
        return int(self.voxels.shape[0])

    @property
    def radius_mm(self) -> float:
        return self.diameter_mm / 2.0

    @property
    def origin_mm(self) -> float:
        """Coordinate of the lower corner of the voxel cube on every axis"""
        return -self.radius_mm

    def voxel_centers(self, voxel_ids: np.ndarray) -> np.ndarray:
        """Physical centers (mm) of the given voxel ids, shape (n, 3)"""
        idx = np.stack(np.unravel_index(np.asarray(voxel_ids, dtype=np.int64), self.voxels.shape), axis=1)
        return self.origin_mm + (idx + 0.5) * self.pitch_mm


@dataclass(eq=False)
class WheelSample:
    """One data point"""
    sample_id: int
    geometry: WheelGeometry
    barrier_mass_kg: float
    split: Split
    domain_tag: DomainTag = DomainTag.CONCEPT
    spoke_spec: Optional[SpokeSpec] = None
    rim_profile_id: Optional[int] = None


@dataclass(eq=False)
class StressField:
    """Per-element stress results of one solve"""
    element_ids: np.ndarray
    centroid_mm: np.ndarray          # (n, 3)
    stress_tensor_mpa: np.ndarray    # (n, 6): xx, yy, zz, xy, yz, xz
    von_mises_mpa: np.ndarray        # (n,)
    principal_mpa: np.ndarray        # (n, 3), descending
    iterations: int = 0
    residual: float = 0.0
    wall_time_s: float = 0.0

    def __len__(self) -> int:
        return int(self.von_mises_mpa.shape[0])


class NodeRecord(NamedTuple):
    """One result point as exported from the solver"""
    node_id: int
    coords_mm: Tuple[float, float, float]
    von_mises_mpa: float
    max_principal_mpa: float


@dataclass(frozen=True)
class StressCluster:
    """Greedy stress cluster around its seed node"""
    member_ids: Tuple[int, ...]
    seed_id: int
    seed_coords_mm: Tuple[float, float, float]
    max_stress_mpa: float

    @property
    def size(self) -> int:
        return len(self.member_ids)


@dataclass(eq=False)
class ImpactLabel:
    """Training target of one sample"""
    coords_mm: Tuple[float, float, float]
    max_von_mises_mpa: float
    heatmap: np.ndarray


@dataclass(eq=False)
class Prediction:
    """Surrogate output for one sample"""
    sample_id: Optional[int]
    coords_mm: Tuple[float, float, float]
    stress_mpa: float
    heatmap: Optional[np.ndarray] = None
    wall_time_s: float = 0.0
    extras: Dict[str, Any] = field(default_factory=dict)
