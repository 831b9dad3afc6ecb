"""
Procedural wheel generation for WheelSurrogate

Builds rotationally symmetric spoke patterns from four parametric families,
revolves one of six canonical rim cross-sections, voxelizes the spoke body,
places the impact on the widest spoke opening, samples barrier masses and
assembles reproducible datasets.
"""
import warnings
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from PIL import Image, ImageDraw
from scipy import ndimage
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from config import Config
from models import (
    WHEEL_RADIUS_MM, DomainTag, PatternFamily, RimProfile, SpokeSpec, Split,
    WheelGeometry, WheelSample, cell_centers,
)
from modules.config import RunConfig, WheelGenConfig
from modules.datastore import DatasetStore
from utils.exceptions import GeometryError, NoInteriorHoleError, ValidationError
from utils.logger import logger

SPOKE_RESOLUTIONS = (32, 64, 128)
VOXEL_RESOLUTIONS = (16, 32, 64)

# Rim cross-section raster: rows cover radius 171.5..241.5 mm, columns height -160..75 mm
PROFILE_SHAPE = (70, 235)
PROFILE_RADIUS_MIN_MM = WHEEL_RADIUS_MM - PROFILE_SHAPE[0]
PROFILE_HEIGHT_MIN_MM = -160.0
ELBOW_MIN_K = 6

# Validation and test each receive round(n * 374/2501); the remainder goes to train
SPLIT_HOLDOUT_FRACTION = 374 / 2501
SPLIT_STREAM = 0x5EED5
MAX_ATTEMPTS_PER_SAMPLE = 25

BARRIER_MASS_GRID = np.linspace(Config.BARRIER_MASS_MIN_KG, Config.BARRIER_MASS_MAX_KG, Config.BARRIER_MASS_STEPS)

# (radius mm, height mm); inner side is the straight closing edge at the first radius
_CANONICAL_POLYLINES: Tuple[Tuple[Tuple[float, float], ...], ...] = (
    ((205, -150), (222, -150), (222, 20), (241.5, 35), (241.5, 60), (205, 60)),
    ((200, -150), (214, -150), (214, -60), (226, -40), (226, 25), (241.5, 40), (241.5, 55), (200, 55)),
    ((210, -150), (228, -150), (228, 30), (241.5, 45), (241.5, 70), (210, 70)),
    ((195, -150), (212, -150), (212, -90), (224, -70), (224, 10), (241.5, 30), (241.5, 50), (195, 50)),
    ((215, -150), (230, -150), (230, -20), (236, 0), (236, 35), (241.5, 45), (241.5, 62), (215, 62)),
    ((202, -150), (218, -150), (218, -110), (232, -95), (232, -45), (220, -30), (220, 15),
     (241.5, 28), (241.5, 48), (202, 48)),
)


# ============== Spoke patterns ==============

def _circular_distance(u: np.ndarray, center) -> np.ndarray:
    """Distance on the unit circle of period fractions"""
    return np.abs(np.mod(u - center + 0.5, 1.0) - 0.5)


def spoke_occupancy(spec: SpokeSpec, r_frac: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """
    Analytic polar occupancy f(r, theta) of a spoke pattern

    Args:
        spec: Spoke specification
        r_frac: Radius as a fraction of the wheel radius
        theta: Polar angle in radians

    Returns:
        Boolean occupancy, periodic in theta with period 2*pi/n_pieces
    """
    r_frac = np.asarray(r_frac, dtype=np.float64)
    theta = np.asarray(theta, dtype=np.float64)
    # position within one angular piece, in [0, 1)
    u = np.mod(theta * spec.n_pieces / (2.0 * np.pi), 1.0)
    t = (r_frac - spec.spoke_inner_frac) / (spec.spoke_outer_frac - spec.spoke_inner_frac)
    half_bar = (1.0 - spec.hole_width_frac) / 2.0

    family = PatternFamily(spec.pattern_family)
    if family is PatternFamily.RADIAL_BAR:
        pattern = _circular_distance(u, 0.0) < half_bar
    elif family is PatternFamily.Y_FORK:
        spread = 0.25 * np.clip((t - 0.5) / 0.5, 0.0, 1.0)
        trunk = (t < 0.5) & (_circular_distance(u, 0.0) < half_bar)
        branches = (t >= 0.5) & (np.minimum(_circular_distance(u, spread), _circular_distance(u, -spread))
                                 < 0.6 * half_bar)
        pattern = trunk | branches
    elif family is PatternFamily.TWISTED_VANE:
        pattern = _circular_distance(u, 0.3 * t) < half_bar
    else:
        ring = np.abs(t - 0.5) < 0.08
        pattern = (_circular_distance(u, 0.0) < half_bar) | ring

    hub_ring = (r_frac >= spec.hub_radius_frac) & (r_frac < spec.spoke_inner_frac)
    spoke_zone = (r_frac >= spec.spoke_inner_frac) & (r_frac < spec.spoke_outer_frac)
    outer_annulus = (r_frac >= spec.spoke_outer_frac) & (r_frac < 1.0)
    return hub_ring | (spoke_zone & pattern) | outer_annulus


def gen_spoke_raster(spec: SpokeSpec, resolution: int) -> np.ndarray:
    """Rasterize a spoke pattern to a resolution x resolution disk view, indexed [y, x]"""
    spec.validate()
    if resolution not in SPOKE_RESOLUTIONS:
        raise ValidationError(f"resolution must be one of {SPOKE_RESOLUTIONS}", field='resolution')
    centers = cell_centers(resolution)
    x, y = np.meshgrid(centers, centers)
    r_frac = np.hypot(x, y) / WHEEL_RADIUS_MM
    return spoke_occupancy(spec, r_frac, np.arctan2(y, x))


# ============== Rim profiles ==============

def rasterize_profile(polyline: Sequence[Tuple[float, float]]) -> np.ndarray:
    """Fill a rim cross-section polygon into the 70x235 profile raster"""
    height, width = PROFILE_SHAPE
    image = Image.new('L', (width, height), 0)
    points = [(h - PROFILE_HEIGHT_MIN_MM, r - PROFILE_RADIUS_MIN_MM) for r, h in polyline]
    ImageDraw.Draw(image).polygon(points, fill=1, outline=1)
    return np.asarray(image, dtype=np.uint8) > 0


def make_rim_profile(profile_id: int, polyline: Sequence[Tuple[float, float]]) -> RimProfile:
    polyline = tuple((float(r), float(h)) for r, h in polyline)
    if any(not 0.0 < r <= WHEEL_RADIUS_MM for r, _ in polyline):
        raise ValidationError("rim polyline radii must lie within (0, 241.5] mm", field='polyline')
    return RimProfile(id=profile_id, polyline=polyline, raster=rasterize_profile(polyline))


@lru_cache(maxsize=1)
def canonical_rim_profiles() -> Tuple[RimProfile, ...]:
    """The six shipped rim cross-sections"""
    return tuple(make_rim_profile(i, polyline) for i, polyline in enumerate(_CANONICAL_POLYLINES))


def perturb_rim_profile(profile: RimProfile, rng: np.random.Generator, jitter_mm: float = 2.0) -> RimProfile:
    """Jitter the vertices of a profile, keeping radii inside the wheel"""
    points = np.asarray(profile.polyline, dtype=np.float64)
    points = points + rng.uniform(-jitter_mm, jitter_mm, size=points.shape)
    points[:, 0] = np.clip(points[:, 0], PROFILE_RADIUS_MIN_MM + 1.0, WHEEL_RADIUS_MM)
    return make_rim_profile(profile.id, [tuple(p) for p in points])


@dataclass
class ProfileClustering:
    """K-means sweep over rim profile latents"""
    inertia: List[float]
    chosen_k: int
    medoid_ids: List[int]
    labels: Dict[int, np.ndarray] = field(default_factory=dict)
    converged: bool = True
    used_raw_pixels: bool = False


def elbow_k(inertia: Sequence[float]) -> int:
    """Pick k at the point farthest from the chord of the normalized inertia curve"""
    values = np.asarray(inertia, dtype=np.float64)
    if len(values) < 3 or values[0] <= 0:
        return 1
    k = np.arange(1, len(values) + 1, dtype=np.float64)
    x = (k - 1) / (k[-1] - 1)
    y = values / values[0]
    # distance of (x, y) from the line through (0, 1) and (1, y_last)
    dx, dy = 1.0, y[-1] - 1.0
    distance = np.abs(dy * x - dx * (y - 1.0)) / np.hypot(dx, dy)
    return int(np.argmax(distance)) + 1


def cluster_rim_profiles(
    rasters: np.ndarray,
    k_max: int,
    encoder: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    seed: int = 0,
    max_iter: int = 300,
) -> ProfileClustering:
    """
    Cluster rim cross-section rasters and pick representative profiles

    Args:
        rasters: (n, 70, 235) binary images
        k_max: Largest cluster count of the sweep
        encoder: Maps rasters to latent vectors; raw pixels are used when omitted
        seed: K-means initialization seed
        max_iter: Lloyd iteration cap per run

    Returns:
        ProfileClustering with per-k inertia, elbow k and medoid raster ids
    """
    rasters = np.asarray(rasters)
    if k_max < ELBOW_MIN_K:
        raise ValidationError(f"k_max must be >= {ELBOW_MIN_K} for the elbow sweep", field='k_max')
    if len(rasters) < k_max:
        raise ValidationError(f"Need at least k_max={k_max} rasters, got {len(rasters)}", field='rasters')

    used_raw = encoder is None
    latents = rasters.reshape(len(rasters), -1).astype(np.float64) if used_raw else \
        np.asarray(encoder(rasters), dtype=np.float64)

    inertia: List[float] = []
    labels: Dict[int, np.ndarray] = {}
    centers: Dict[int, np.ndarray] = {}
    converged = True
    for k in range(1, k_max + 1):
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter('always', ConvergenceWarning)
            model = KMeans(n_clusters=k, init='k-means++', n_init=10, max_iter=max_iter, random_state=seed)
            model.fit(latents)
        if model.n_iter_ >= max_iter:
            converged = False
            logger.warning("K-means did not converge", extra={'stage': 'cluster-profiles', 'k': k})
        if any(issubclass(w.category, ConvergenceWarning) for w in caught):
            logger.info("K-means found fewer distinct clusters than requested", extra={'stage': 'cluster-profiles', 'k': k})
        inertia.append(float(model.inertia_))
        labels[k] = model.labels_.copy()
        centers[k] = model.cluster_centers_

    chosen = elbow_k(inertia)
    medoids: List[int] = []
    for cluster in range(chosen):
        members = np.flatnonzero(labels[chosen] == cluster)
        if len(members) == 0:
            continue
        distance = np.sum((latents[members] - centers[chosen][cluster]) ** 2, axis=1)
        medoids.append(int(members[np.argmin(distance)]))

    return ProfileClustering(
        inertia=inertia,
        chosen_k=chosen,
        medoid_ids=medoids,
        labels=labels,
        converged=converged,
        used_raw_pixels=used_raw,
    )


def derive_rim_profiles(
    n_variants: int,
    k_max: int = 10,
    seed: int = 0,
    encoder: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    jitter_mm: float = 2.0,
) -> Tuple[Tuple[RimProfile, ...], ProfileClustering]:
    """
    Perturb the canonical cross-sections, cluster the variants and keep the medoids

    Returns:
        Medoid profiles (ids renumbered from 0) and the clustering that chose them
    """
    if n_variants < 1:
        raise ValidationError("n_variants must be >= 1", field='n_variants')
    rng = np.random.default_rng(np.random.SeedSequence([seed, len(_CANONICAL_POLYLINES)]))
    base = canonical_rim_profiles()
    variants = list(base)
    for i in range(n_variants):
        variants.append(perturb_rim_profile(base[i % len(base)], rng, jitter_mm))
    rasters = np.stack([p.raster for p in variants])
    clustering = cluster_rim_profiles(rasters, min(k_max, len(variants)), encoder=encoder, seed=seed)
    medoids = tuple(
        make_rim_profile(new_id, variants[index].polyline)
        for new_id, index in enumerate(clustering.medoid_ids)
    )
    logger.info(
        f"Derived {len(medoids)} rim profiles from {len(variants)} variants",
        extra={'stage': 'cluster-profiles', 'chosen_k': clustering.chosen_k}
    )
    return medoids, clustering


# ============== Voxelization ==============

def voxel_pitch(resolution: int, diameter_mm: float = Config.WHEEL_DIAMETER_MM) -> float:
    return diameter_mm / resolution


def disk_layer_indices(resolution: int, thickness_mm: float) -> np.ndarray:
    """z indices whose voxel centers lie inside the spoke disk 0 <= z <= thickness"""
    z = cell_centers(resolution)
    layers = np.flatnonzero((z >= 0.0) & (z <= thickness_mm))
    if len(layers) == 0:
        layers = np.array([int(np.argmin(np.abs(z - thickness_mm / 2.0)))])
    return layers


def disk_top_mm(resolution: int, thickness_mm: float) -> float:
    """Height of the outer disk surface in the voxel model"""
    top = int(disk_layer_indices(resolution, thickness_mm).max())
    return -WHEEL_RADIUS_MM + (top + 1) * voxel_pitch(resolution)


def _footprint(raster: np.ndarray, resolution: int) -> np.ndarray:
    """Raster resampled to the voxel grid, indexed [x, y]"""
    height, width = raster.shape
    if height >= resolution and height % resolution == 0 and width == height:
        block = height // resolution
        pooled = raster.reshape(resolution, block, resolution, block).any(axis=(1, 3))
    else:
        centers = cell_centers(resolution)
        rows = np.clip(((centers + WHEEL_RADIUS_MM) / (2 * WHEEL_RADIUS_MM) * height).astype(int), 0, height - 1)
        cols = np.clip(((centers + WHEEL_RADIUS_MM) / (2 * WHEEL_RADIUS_MM) * width).astype(int), 0, width - 1)
        pooled = raster[np.ix_(rows, cols)]
    return pooled.T


def voxelize_wheel(
    raster: np.ndarray,
    rim_profile: RimProfile,
    resolution: int,
    disk_thickness_mm: float = 30.0,
    pockets_mm: Optional[Sequence[Tuple[float, float]]] = None,
    pocket_radius_mm: float = 18.0,
) -> np.ndarray:
    """
    Occupancy of the spoke body: extruded disk raster plus the rim shell above the attachment plane

    Pockets, when given, remove the outer disk layer inside circles of pocket_radius_mm
    (only when the disk has at least two layers).
    """
    if resolution not in VOXEL_RESOLUTIONS:
        raise ValidationError(f"resolution must be one of {VOXEL_RESOLUTIONS}", field='resolution')
    raster = np.asarray(raster, dtype=bool)
    if not raster.any():
        raise GeometryError("Disk raster is empty")

    centers = cell_centers(resolution)
    layers = disk_layer_indices(resolution, disk_thickness_mm)
    voxels = np.zeros((resolution,) * 3, dtype=bool)
    footprint = _footprint(raster, resolution)
    voxels[:, :, layers] = footprint[:, :, None]

    # rim shell, revolved around z; lower rim body (z < 0) is excluded
    x, y = np.meshgrid(centers, centers, indexing='ij')
    radius = np.hypot(x, y)
    rows = np.floor(radius - PROFILE_RADIUS_MIN_MM).astype(int)
    cols = np.floor(centers - PROFILE_HEIGHT_MIN_MM).astype(int)
    row_ok = (rows >= 0) & (rows < PROFILE_SHAPE[0])
    col_ok = (cols >= 0) & (cols < PROFILE_SHAPE[1]) & (centers >= 0.0)
    rim = rim_profile.raster[np.clip(rows, 0, PROFILE_SHAPE[0] - 1)[:, :, None],
                             np.clip(cols, 0, PROFILE_SHAPE[1] - 1)[None, None, :]]
    voxels |= rim & row_ok[:, :, None] & col_ok[None, None, :]

    if pockets_mm and len(layers) >= 2:
        top = layers.max()
        carved = np.zeros_like(radius, dtype=bool)
        for px, py in pockets_mm:
            carved |= np.hypot(x - px, y - py) <= pocket_radius_mm
        # the rim shell above keeps the outer ring attached
        voxels[:, :, top] &= ~(carved & footprint)
        voxels[:, :, top] |= rim[:, :, top] & row_ok & col_ok[top]
    return voxels


def interior_holes(raster: np.ndarray) -> Tuple[np.ndarray, List[int], np.ndarray, np.ndarray]:
    """
    Label the spoke openings of a disk raster

    Returns:
        labels image, hole label ids, hole areas (pixels), hole centroids (mm, shape (n, 2) as x, y)
    """
    raster = np.asarray(raster, dtype=bool)
    height, width = raster.shape
    ys, xs = cell_centers(height), cell_centers(width)
    x, y = np.meshgrid(xs, ys)
    radius = np.hypot(x, y)

    labels, count = ndimage.label(~raster)
    excluded = set(np.unique(labels[radius >= WHEEL_RADIUS_MM]).tolist())
    central = radius <= radius.min() + 1e-9
    excluded |= set(np.unique(labels[central]).tolist())
    excluded.discard(0)

    hole_ids = [label for label in range(1, count + 1) if label not in excluded]
    if not hole_ids:
        return labels, [], np.zeros(0), np.zeros((0, 2))
    areas = np.asarray(ndimage.sum(np.ones_like(labels), labels, index=hole_ids), dtype=np.float64)
    com = np.asarray(ndimage.center_of_mass(np.ones_like(labels), labels, index=hole_ids), dtype=np.float64)
    step_y, step_x = 2 * WHEEL_RADIUS_MM / height, 2 * WHEEL_RADIUS_MM / width
    centroids = np.stack([-WHEEL_RADIUS_MM + (com[:, 1] + 0.5) * step_x,
                          -WHEEL_RADIUS_MM + (com[:, 0] + 0.5) * step_y], axis=1)
    return labels, hole_ids, areas, centroids


def select_impact_location(geometry: WheelGeometry, tie_tolerance: float = 0.02) -> Tuple[float, float, float]:
    """
    Impact point: centroid of the widest spoke opening on the outer disk surface

    Holes within tie_tolerance of the largest area are treated as equal and the one
    whose centroid has the smallest polar angle in [0, 2*pi) wins.
    """
    _, hole_ids, areas, centroids = interior_holes(geometry.disk_raster)
    if not hole_ids:
        raise NoInteriorHoleError()
    tied = np.flatnonzero(areas >= (1.0 - tie_tolerance) * areas.max())
    angles = np.mod(np.arctan2(centroids[tied, 1], centroids[tied, 0]), 2 * np.pi)
    chosen = tied[int(np.argmin(angles))]
    z_top = disk_top_mm(geometry.resolution, geometry.disk_thickness_mm)
    return float(centroids[chosen, 0]), float(centroids[chosen, 1]), float(z_top)


def extrude_to_voxels(
    raster: np.ndarray,
    rim_profile: RimProfile,
    resolution: int,
    disk_thickness_mm: float = 30.0,
    impact_patch_size: int = 4,
    tie_tolerance: float = 0.02,
    pockets_mm: Optional[Sequence[Tuple[float, float]]] = None,
    pocket_radius_mm: float = 18.0,
) -> WheelGeometry:
    """Build the full wheel geometry with constrained hub voxels and the loaded impact patch"""
    voxels = voxelize_wheel(raster, rim_profile, resolution, disk_thickness_mm, pockets_mm, pocket_radius_mm)
    if not voxels.any():
        raise GeometryError("Geometry has no occupied voxels")
    pitch = voxel_pitch(resolution)
    centers = cell_centers(resolution)
    layers = disk_layer_indices(resolution, disk_thickness_mm)

    # hub: occupied disk voxels within one pitch of the inner edge of the raster material
    height, width = raster.shape
    px, py = np.meshgrid(cell_centers(width), cell_centers(height))
    hub_radius = float(np.hypot(px, py)[np.asarray(raster, dtype=bool)].min())
    x, y = np.meshgrid(centers, centers, indexing='ij')
    radius = np.hypot(x, y)
    hub_mask = np.zeros_like(voxels)
    hub_mask[:, :, layers] = (radius <= hub_radius + pitch)[:, :, None]
    hub_ids = np.flatnonzero((hub_mask & voxels).ravel())
    if len(hub_ids) == 0:
        raise GeometryError("Hub voxel set is empty", details={'reason': 'EMPTY_HUB'})

    geometry = WheelGeometry(
        disk_raster=np.asarray(raster, dtype=bool),
        voxels=voxels,
        pitch_mm=pitch,
        disk_thickness_mm=float(disk_thickness_mm),
        impact_location_mm=(0.0, 0.0, 0.0),
        hub_voxel_ids=hub_ids,
        impact_face_voxel_ids=np.zeros(0, dtype=np.int64),
    )
    location = select_impact_location(geometry, tie_tolerance)

    top = int(layers.max())
    candidates = np.flatnonzero(voxels[:, :, top].ravel())
    ix, iy = np.unravel_index(candidates, (resolution, resolution))
    ids = np.ravel_multi_index((ix, iy, np.full_like(ix, top)), voxels.shape)
    keep = ~np.isin(ids, hub_ids)
    ids, ix, iy = ids[keep], ix[keep], iy[keep]
    if len(ids) == 0:
        raise GeometryError("No voxels available for the impact patch")
    distance = np.hypot(centers[ix] - location[0], centers[iy] - location[1])
    order = np.lexsort((ids, distance))
    patch = np.sort(ids[order[:impact_patch_size]])

    geometry.impact_location_mm = location
    geometry.impact_face_voxel_ids = patch
    return geometry


def is_connected(voxels: np.ndarray) -> bool:
    """True when the occupied voxels form one face-connected body"""
    _, count = ndimage.label(voxels)
    return count == 1


# ============== Barrier mass ==============

def barrier_mass_at(index: int) -> float:
    """Barrier mass (kg) at a position of the 1,000-point grid"""
    return float(BARRIER_MASS_GRID[index])


def sample_barrier_mass(rng: np.random.Generator) -> float:
    """Uniform draw from the barrier mass grid, both endpoints included"""
    return barrier_mass_at(int(rng.integers(0, len(BARRIER_MASS_GRID))))


# ============== Dataset assembly ==============

def sample_spoke_spec(rng: np.random.Generator, config: WheelGenConfig, domain: DomainTag = DomainTag.CONCEPT) -> SpokeSpec:
    families = list(config.families)
    family = families[int(rng.integers(0, len(families)))]
    low, high = config.hole_width_range
    if domain == DomainTag.DETAILED:
        low, high = min(low + 0.05, 0.95), min(high + 0.05, 0.95)
    return SpokeSpec(
        n_pieces=int(rng.integers(config.n_pieces_range[0], config.n_pieces_range[1] + 1)),
        pattern_family=PatternFamily(family),
        hub_radius_frac=float(rng.uniform(*config.hub_radius_range)),
        spoke_inner_frac=float(rng.uniform(*config.spoke_inner_range)),
        spoke_outer_frac=float(rng.uniform(*config.spoke_outer_range)),
        hole_width_frac=float(rng.uniform(low, high)),
        seed=int(rng.integers(0, 2 ** 63 - 1)),
    ).validate()


def _pocket_centers(spec: SpokeSpec) -> List[Tuple[float, float]]:
    radius = 0.5 * (spec.spoke_outer_frac + 1.0) * WHEEL_RADIUS_MM * 0.97
    angles = (np.arange(spec.n_pieces) + 0.5) * 2 * np.pi / spec.n_pieces
    return [(float(radius * np.cos(a)), float(radius * np.sin(a))) for a in angles]


def generate_sample(
    sample_id: int,
    seed: int,
    config: WheelGenConfig,
    domain: DomainTag = DomainTag.CONCEPT,
    rim_profiles: Optional[Sequence[RimProfile]] = None,
) -> Tuple[WheelSample, Dict[str, int]]:
    """
    Generate one sample, resampling rejected specs

    The rim cross-section is drawn from rim_profiles (the canonical six when omitted).

    Returns:
        The sample (split not yet assigned) and a count of rejections per reason
    """
    rejections: Dict[str, int] = {}
    profiles = tuple(rim_profiles) if rim_profiles else canonical_rim_profiles()
    detailed = DomainTag(domain) == DomainTag.DETAILED
    thickness = config.detailed_thickness_mm if detailed else config.disk_thickness_mm
    for attempt in range(MAX_ATTEMPTS_PER_SAMPLE):
        rng = np.random.default_rng(np.random.SeedSequence([seed, sample_id, attempt]))
        spec = sample_spoke_spec(rng, config, domain)
        profile = profiles[int(rng.integers(0, len(profiles)))]
        mass = sample_barrier_mass(rng)
        try:
            raster = gen_spoke_raster(spec, config.disk_resolution)
            geometry = extrude_to_voxels(
                raster, profile, config.voxel_resolution,
                disk_thickness_mm=thickness,
                impact_patch_size=config.impact_patch_size,
                tie_tolerance=config.hole_tie_tolerance,
                pockets_mm=_pocket_centers(spec) if detailed else None,
                pocket_radius_mm=config.detailed_pocket_radius_mm,
            )
            if not is_connected(geometry.voxels):
                raise GeometryError("Voxel body is disconnected", sample_id=sample_id, details={'reason': 'DISCONNECTED'})
        except GeometryError as exc:
            reason = exc.details.get('reason', exc.error_code)
            rejections[reason] = rejections.get(reason, 0) + 1
            logger.debug(f"Rejected spec: {exc.message}",
                         extra={'stage': 'gen', 'sample_id': sample_id, 'attempt': attempt})
            continue
        sample = WheelSample(
            sample_id=sample_id,
            geometry=geometry,
            barrier_mass_kg=mass,
            split=Split.TRAIN,
            domain_tag=DomainTag(domain),
            spoke_spec=spec,
            rim_profile_id=profile.id,
        )
        return sample, rejections
    raise GeometryError(
        f"No valid geometry after {MAX_ATTEMPTS_PER_SAMPLE} attempts",
        sample_id=sample_id,
        details={'rejections': rejections}
    )


def split_counts(n_samples: int) -> Dict[str, int]:
    """70/15/15 split sizes with the rounding remainder in train"""
    holdout = int(np.floor(n_samples * SPLIT_HOLDOUT_FRACTION + 0.5))
    return {
        Split.TRAIN.value: n_samples - 2 * holdout,
        Split.VALIDATION.value: holdout,
        Split.TEST.value: holdout,
    }


def assign_splits(n_samples: int, seed: int) -> List[Split]:
    """Seeded permutation of sample positions into train/validation/test"""
    counts = split_counts(n_samples)
    order = np.random.default_rng(np.random.SeedSequence([seed, SPLIT_STREAM])).permutation(n_samples)
    splits: List[Split] = [Split.TRAIN] * n_samples
    n_train, n_val = counts['train'], counts['validation']
    for position in order[n_train:n_train + n_val]:
        splits[int(position)] = Split.VALIDATION
    for position in order[n_train + n_val:]:
        splits[int(position)] = Split.TEST
    return splits


def _generate_and_write(sample_id: int, seed: int, config: WheelGenConfig, domain: DomainTag,
                        root: str, split: Split,
                        rim_profiles: Optional[Sequence[RimProfile]] = None) -> Tuple[Dict, Dict[str, int]]:
    sample, rejections = generate_sample(sample_id, seed, config, domain, rim_profiles)
    sample.split = split
    paths = DatasetStore(root).write_geometry(sample)
    entry = {
        'id': sample_id,
        'split': split.value,
        'barrier_mass_kg': sample.barrier_mass_kg,
        'domain_tag': sample.domain_tag.value,
        'paths': paths,
    }
    return entry, rejections


def build_dataset(
    n_samples: int,
    seed: int,
    config: RunConfig,
    out_dir: str,
    workers: int = 1,
    domain: DomainTag = DomainTag.CONCEPT,
    rim_profiles: Optional[Sequence[RimProfile]] = None,
    profile_clustering: Optional[ProfileClustering] = None,
) -> Dict:
    """
    Generate a dataset directory with manifest and per-sample blobs

    Args:
        n_samples: Number of samples (>= 20)
        seed: Master seed; every sample derives its own stream from (seed, sample_id)
        config: Run configuration (its wheelgen section is used)
        out_dir: Dataset root
        workers: Parallel worker processes
        domain: concept or detailed
        rim_profiles: Rim cross-sections to draw from (canonical six when omitted)
        profile_clustering: Clustering that produced rim_profiles, recorded in the manifest

    Returns:
        The manifest dictionary
    """
    if n_samples < 20:
        raise ValidationError(f"n_samples must be >= 20, got {n_samples}", field='n_samples')
    store = DatasetStore(out_dir)
    store.root.mkdir(parents=True, exist_ok=True)
    splits = assign_splits(n_samples, seed)
    wg = config.wheelgen
    profiles = tuple(rim_profiles) if rim_profiles else canonical_rim_profiles()

    results = Parallel(n_jobs=workers)(
        delayed(_generate_and_write)(
            sample_id, seed, wg, DomainTag(domain), str(store.root), splits[sample_id], profiles
        )
        for sample_id in range(n_samples)
    )

    entries = [entry for entry, _ in results]
    rejections: Dict[str, int] = {}
    for _, counts in results:
        for reason, count in counts.items():
            rejections[reason] = rejections.get(reason, 0) + count
    total_rejections = sum(rejections.values())
    if total_rejections > wg.max_rejection_rate * n_samples:
        raise GeometryError(
            f"Rejected {total_rejections} specs for {n_samples} samples, above the "
            f"{wg.max_rejection_rate:.0%} cap",
            details={'rejections': rejections, 'n_samples': n_samples}
        )

    manifest = {
        'schema_version': Config.MANIFEST_SCHEMA_VERSION,
        'seed': seed,
        'domain': DomainTag(domain).value,
        'config': config.echo(),
        'n_samples': n_samples,
        'split_counts': split_counts(n_samples),
        'rejections': rejections,
        'rim_profiles': [{'id': p.id, 'polyline': [list(v) for v in p.polyline]} for p in profiles],
        'samples': entries,
    }
    if profile_clustering is not None:
        manifest['profile_clustering'] = {
            'inertia': profile_clustering.inertia,
            'chosen_k': profile_clustering.chosen_k,
            'medoid_ids': profile_clustering.medoid_ids,
            'converged': profile_clustering.converged,
            'used_raw_pixels': profile_clustering.used_raw_pixels,
        }
    store.save_manifest(manifest)
    logger.info(
        f"Generated {n_samples} samples ({total_rejections} rejections)",
        extra={'stage': 'gen', 'rejections': rejections}
    )
    return manifest


def domain_volume_summary(stores: Sequence[DatasetStore]) -> Dict[str, Dict[str, float]]:
    """Spoke-body volume statistics (cm^3) per domain"""
    rows = []
    for store in stores:
        for entry in store.manifest['samples']:
            geometry = store.load_geometry(int(entry['id']))
            volume = float(geometry.voxels.sum()) * geometry.pitch_mm ** 3 / 1000.0
            rows.append({'domain': entry.get('domain_tag', DomainTag.CONCEPT.value), 'volume_cm3': volume})
    if not rows:
        return {}
    table = pd.DataFrame(rows).groupby('domain')['volume_cm3'].agg(['count', 'mean', 'std', 'min', 'max'])
    return {domain: {k: float(v) for k, v in stats.items()} for domain, stats in table.fillna(0.0).iterrows()}
