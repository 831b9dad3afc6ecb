import numpy as np
import pytest

from models import WHEEL_RADIUS_MM, DomainTag, PatternFamily, SpokeSpec, WheelGeometry, cell_centers
from modules.datastore import DatasetStore
from modules.wheelgen import (
    BARRIER_MASS_GRID, PROFILE_SHAPE, assign_splits, barrier_mass_at, build_dataset, canonical_rim_profiles,
    cluster_rim_profiles, derive_rim_profiles, disk_layer_indices, disk_top_mm, domain_volume_summary,
    gen_spoke_raster, interior_holes, is_connected, perturb_rim_profile, sample_barrier_mass,
    select_impact_location, split_counts, spoke_occupancy, voxelize_wheel,
)
from utils.exceptions import NoInteriorHoleError, ValidationError


def _disk_coords(resolution):
    centers = cell_centers(resolution)
    return np.meshgrid(centers, centers)


def _solid_disk(resolution=64):
    x, y = _disk_coords(resolution)
    return np.hypot(x, y) < WHEEL_RADIUS_MM


def _geometry_for(raster, resolution=32, thickness=30.0):
    return WheelGeometry(
        disk_raster=raster,
        voxels=np.zeros((resolution,) * 3, dtype=bool),
        pitch_mm=2 * WHEEL_RADIUS_MM / resolution,
        disk_thickness_mm=thickness,
        impact_location_mm=(0.0, 0.0, 0.0),
        hub_voxel_ids=np.zeros(0, dtype=np.int64),
        impact_face_voxel_ids=np.zeros(0, dtype=np.int64),
    )


# ============== Spoke patterns ==============

@pytest.mark.parametrize('family', list(PatternFamily))
def test_occupancy_repeats_every_piece(family):
    spec = SpokeSpec(4, family, 0.15, 0.33, 0.78, 0.45)
    rng = np.random.default_rng(0)
    r = rng.uniform(0.0, 1.0, 2000)
    theta = rng.uniform(0.0, 2 * np.pi, 2000)

    base = spoke_occupancy(spec, r, theta)
    turned = spoke_occupancy(spec, r, theta + np.pi / 2)

    assert np.array_equal(base, turned)


def test_raster_has_hub_ring_and_outer_annulus(seed7_spec):
    raster = gen_spoke_raster(seed7_spec, 128)
    x, y = _disk_coords(128)
    r_frac = np.hypot(x, y) / WHEEL_RADIUS_MM

    assert raster.shape == (128, 128)
    assert raster[(r_frac > 0.17) & (r_frac < 0.31)].all()
    assert raster[(r_frac > 0.80) & (r_frac < 0.99)].all()
    assert not raster[r_frac < 0.14].any()
    assert not raster[r_frac > 1.0].any()


def test_seed7_occupancy_fraction_is_stable(seed7_spec):
    first = gen_spoke_raster(seed7_spec, 128).mean()
    second = gen_spoke_raster(seed7_spec, 128).mean()

    assert first == second
    assert 0.3 < first < 0.7


@pytest.mark.parametrize('kwargs, field', [
    ({'n_pieces': 3}, 'n_pieces'),
    ({'n_pieces': 14}, 'n_pieces'),
    ({'spoke_inner_frac': 0.1}, 'hub_radius_frac'),
    ({'hole_width_frac': 1.0}, 'hole_width_frac'),
])
def test_invalid_spec_names_field(kwargs, field):
    params = dict(n_pieces=5, pattern_family=PatternFamily.RADIAL_BAR, hub_radius_frac=0.15,
                  spoke_inner_frac=0.33, spoke_outer_frac=0.78, hole_width_frac=0.5)
    params.update(kwargs)

    with pytest.raises(ValidationError) as exc:
        gen_spoke_raster(SpokeSpec(**params), 64)

    assert exc.value.details['field'] == field


def test_unsupported_raster_resolution(seed7_spec):
    with pytest.raises(ValidationError):
        gen_spoke_raster(seed7_spec, 100)


# ============== Rim profiles ==============

def test_canonical_profiles_are_distinct_rasters():
    profiles = canonical_rim_profiles()

    assert len(profiles) == 6
    assert [p.id for p in profiles] == list(range(6))
    for profile in profiles:
        assert profile.raster.shape == PROFILE_SHAPE
        assert profile.raster.any()
    flat = {p.raster.tobytes() for p in profiles}
    assert len(flat) == 6


def test_duplicated_profiles_cluster_by_source():
    profiles = canonical_rim_profiles()
    rasters = np.stack([p.raster for p in profiles for _ in range(6)])
    source = np.repeat(np.arange(6), 6)

    result = cluster_rim_profiles(rasters, k_max=6, seed=0)

    labels = result.labels[6]
    for cluster in range(6):
        members = source[labels == cluster]
        assert len(members) == 6
        assert len(set(members.tolist())) == 1
    assert result.inertia[5] == pytest.approx(0.0, abs=1e-6)
    assert result.used_raw_pixels


def test_single_cluster_inertia_is_total_variance():
    rng = np.random.default_rng(1)
    base = canonical_rim_profiles()
    rasters = np.stack([perturb_rim_profile(base[i % 6], rng).raster for i in range(12)])
    latents = rasters.reshape(12, -1).astype(np.float64)
    expected = np.sum((latents - latents.mean(axis=0)) ** 2)

    result = cluster_rim_profiles(rasters, k_max=6, seed=0)

    assert len(result.inertia) == 6
    assert result.inertia[0] == pytest.approx(expected, rel=1e-6)


def test_clustering_needs_enough_rasters():
    rasters = np.stack([p.raster for p in canonical_rim_profiles()])

    with pytest.raises(ValidationError):
        cluster_rim_profiles(rasters, k_max=7)



@pytest.mark.parametrize('k_max', [0, 1, 5])
def test_elbow_sweep_needs_six_candidates(k_max):
    rasters = np.stack([p.raster for p in canonical_rim_profiles() for _ in range(2)])

    with pytest.raises(ValidationError) as exc:
        cluster_rim_profiles(rasters, k_max=k_max)

    assert exc.value.details['field'] == 'k_max'


def test_encoder_latents_replace_raw_pixels():
    rasters = np.stack([p.raster for p in canonical_rim_profiles() for _ in range(2)])

    def area(r):
        return r.reshape(len(r), -1).sum(axis=1, keepdims=True)

    result = cluster_rim_profiles(rasters, k_max=6, encoder=area, seed=0)

    assert not result.used_raw_pixels
    assert len(result.inertia) == 6


def test_derived_profiles_are_medoids_with_fresh_ids():
    profiles, clustering = derive_rim_profiles(12, k_max=6, seed=0)

    assert len(profiles) == len(clustering.medoid_ids)
    assert [p.id for p in profiles] == list(range(len(profiles)))
    assert 1 <= clustering.chosen_k <= 6


# ============== Voxelization and impact ==============

def test_solid_disk_extrudes_to_pooled_raster():
    raster = _solid_disk(64)
    voxels = voxelize_wheel(raster, canonical_rim_profiles()[0], 32)
    pooled = raster.reshape(32, 2, 32, 2).any(axis=(1, 3)).T

    for layer in disk_layer_indices(32, 30.0):
        assert np.array_equal(voxels[:, :, layer], pooled)


def test_nothing_below_the_attachment_plane(tiny_geometry):
    z = cell_centers(32)

    assert not tiny_geometry.voxels[:, :, z < 0].any()


def test_extruded_wheel_boundary_sets(tiny_geometry):
    assert len(tiny_geometry.hub_voxel_ids) > 0
    assert len(tiny_geometry.impact_face_voxel_ids) == 4
    assert np.isin(tiny_geometry.impact_face_voxel_ids, np.flatnonzero(tiny_geometry.voxels.ravel())).all()
    assert not np.isin(tiny_geometry.impact_face_voxel_ids, tiny_geometry.hub_voxel_ids).any()


def test_impact_sits_on_outer_disk_surface(tiny_geometry):
    assert tiny_geometry.impact_location_mm[2] == pytest.approx(disk_top_mm(32, 30.0))


def test_largest_hole_wins():
    raster = _solid_disk(64)
    x, y = _disk_coords(64)
    raster &= ~((x > 80) & (x < 140) & (np.abs(y) < 30))
    raster &= ~((x > -140) & (x < -120) & (np.abs(y) < 10))

    _, hole_ids, areas, _ = interior_holes(raster)
    location = select_impact_location(_geometry_for(raster))

    assert len(hole_ids) == 2
    assert areas.max() > 4 * areas.min()
    assert location[0] == pytest.approx(110.0, abs=8.0)
    assert location[1] == pytest.approx(0.0, abs=8.0)


def test_equal_holes_pick_smallest_polar_angle():
    spec = SpokeSpec(4, PatternFamily.RADIAL_BAR, 0.15, 0.33, 0.78, 0.5)
    raster = gen_spoke_raster(spec, 64)

    _, hole_ids, _, _ = interior_holes(raster)
    x, y, _ = select_impact_location(_geometry_for(raster))

    assert len(hole_ids) == 4
    assert np.arctan2(y, x) == pytest.approx(np.pi / 4, abs=0.1)


def test_solid_disk_has_no_impact_hole():
    with pytest.raises(NoInteriorHoleError):
        select_impact_location(_geometry_for(_solid_disk(64)))


# ============== Barrier mass ==============

def test_mass_grid_endpoints():
    assert barrier_mass_at(0) == 498.0
    assert barrier_mass_at(999) == 558.0
    assert barrier_mass_at(1) == pytest.approx(498.0 + 60.0 / 999.0)
    assert len(BARRIER_MASS_GRID) == 1000


def test_sampled_mass_is_on_grid():
    rng = np.random.default_rng(3)
    draws = [sample_barrier_mass(rng) for _ in range(200)]

    assert all(np.isclose(BARRIER_MASS_GRID, m).any() for m in draws)


# ============== Dataset ==============

@pytest.mark.parametrize('n, expected', [
    (2501, (1753, 374, 374)),
    (20, (14, 3, 3)),
])
def test_split_counts(n, expected):
    counts = split_counts(n)

    assert (counts['train'], counts['validation'], counts['test']) == expected


def test_split_assignment_is_seeded():
    first = assign_splits(100, seed=5)

    assert first == assign_splits(100, seed=5)
    assert first != assign_splits(100, seed=6)
    assert sum(s.value == 'test' for s in first) == split_counts(100)['test']


def test_too_few_samples_rejected(tmp_path, tiny_config):
    with pytest.raises(ValidationError):
        build_dataset(19, 1, tiny_config, str(tmp_path))


def test_manifest_describes_splits(generated_store):
    manifest = generated_store.manifest

    assert manifest['n_samples'] == 20
    assert manifest['split_counts'] == {'train': 14, 'validation': 3, 'test': 3}
    assert len(generated_store.sample_ids('train')) == 14
    assert len(manifest['rim_profiles']) == 6
    for entry in manifest['samples']:
        assert 498.0 <= entry['barrier_mass_kg'] <= 558.0


def test_same_seed_same_manifest(tmp_path, tiny_config, generated_store):
    build_dataset(20, 7, tiny_config, str(tmp_path))

    assert DatasetStore(str(tmp_path)).manifest_path.read_bytes() == generated_store.manifest_path.read_bytes()



def test_same_seed_same_geometry_bytes(tmp_path, tiny_config, generated_store):
    build_dataset(20, 7, tiny_config, str(tmp_path), workers=2)
    rebuilt = DatasetStore(str(tmp_path))

    assert rebuilt.sample_ids() == generated_store.sample_ids()
    for sample_id in generated_store.sample_ids():
        for blob in ('voxels.bin', 'disk.bin'):
            first = generated_store.sample_dir(sample_id) / blob
            second = rebuilt.sample_dir(sample_id) / blob
            assert second.read_bytes() == first.read_bytes(), (sample_id, blob)


def test_stored_sample_round_trips(generated_store):
    sample_id = generated_store.sample_ids('test')[0]
    sample = generated_store.load_sample(sample_id)

    assert sample.geometry.voxels.shape == (32, 32, 32)
    assert sample.geometry.disk_raster.shape == (32, 32)
    assert is_connected(sample.geometry.voxels)
    assert sample.split.value == 'test'


def test_volume_summary_per_domain(tmp_path, tiny_config, generated_store):
    build_dataset(20, 7, tiny_config, str(tmp_path), domain=DomainTag.DETAILED)
    detailed = DatasetStore(str(tmp_path))

    summary = domain_volume_summary([generated_store, detailed])

    assert detailed.manifest['domain'] == 'detailed'
    assert {e['domain_tag'] for e in detailed.manifest['samples']} == {'detailed'}
    assert summary['concept']['count'] == 20
    assert summary['detailed']['count'] == 20
    assert summary['detailed']['mean'] > 0
