import numpy as np
import pytest

from models import MaterialParams, WheelGeometry
from modules.config import OracleConfig
from modules.stressoracle import (
    StiffnessOperator, assemble_load, compute_stress, element_stiffness, principal_stresses,
    solve_displacements, solve_sample, uniform_block_problem, von_mises,
)
from utils.exceptions import GeometryError, ValidationError

TRACTION_MPA = 10.0
YOUNGS_MPA = 70e3


def _solve(problem):
    return compute_stress(problem, solve_displacements(problem))


def _cube_geometry(impact_voxel=(2, 2, 3)):
    """4^3 solid cube spanning the wheel box with a single-voxel impact patch"""
    shape = (4, 4, 4)
    return WheelGeometry(
        disk_raster=np.ones((32, 32), dtype=bool),
        voxels=np.ones(shape, dtype=bool),
        pitch_mm=483.0 / 4,
        disk_thickness_mm=30.0,
        impact_location_mm=(0.0, 0.0, 0.0),
        hub_voxel_ids=np.array([np.ravel_multi_index((0, 0, 0), shape), np.ravel_multi_index((1, 0, 0), shape)]),
        impact_face_voxel_ids=np.array([np.ravel_multi_index(impact_voxel, shape)]),
    )


# ============== Element and operator ==============

def test_element_stiffness_is_symmetric_with_rigid_modes():
    k = element_stiffness(MaterialParams(), 2.0)
    translation = np.tile([1.0, 0.0, 0.0], 8)

    assert k.shape == (24, 24)
    assert np.allclose(k, k.T, atol=1e-9 * np.abs(k).max())
    assert np.allclose(k @ translation, 0.0, atol=1e-9 * np.abs(k).max())
    assert np.all(np.diag(k) > 0)


def test_assembled_operator_is_symmetric():
    problem = uniform_block_problem((3, 2, 2))
    operator = StiffnessOperator(problem)
    matrix = operator.matrix.toarray()

    assert np.allclose(matrix, matrix.T, atol=1e-9 * np.abs(matrix).max())


def test_reduction_modes_agree_on_matvec():
    problem = uniform_block_problem((3, 3, 2))
    operator = StiffnessOperator(problem)
    u = np.random.default_rng(0).normal(size=operator.n_dofs)

    assert np.allclose(operator.matvec(u), operator.matrix @ u, rtol=1e-12, atol=1e-9)


# ============== Solve ==============

def test_patch_test_gives_uniform_compression():
    stress = _solve(uniform_block_problem(traction_mpa=TRACTION_MPA, cg_rel_tolerance=1e-10))

    assert np.allclose(stress.stress_tensor_mpa[:, 2], -TRACTION_MPA, rtol=1e-5)
    assert np.allclose(stress.stress_tensor_mpa[:, [0, 1, 3, 4, 5]], 0.0, atol=1e-4)
    assert np.allclose(stress.von_mises_mpa, TRACTION_MPA, rtol=1e-5)


def test_patch_test_axial_strain_matches_hookes_law():
    problem = uniform_block_problem(traction_mpa=TRACTION_MPA, cg_rel_tolerance=1e-10)
    displacement = solve_displacements(problem)
    node_z = problem.node_coords(displacement.node_ids)[:, 2]
    expected = -TRACTION_MPA / YOUNGS_MPA * node_z

    assert np.allclose(displacement.values_mm[:, 2], expected, rtol=1e-5, atol=1e-12)


@pytest.mark.parametrize('alpha', [0.5, 2.0, 10.0])
def test_scaled_load_scales_displacement_and_stress(alpha):
    base = uniform_block_problem(traction_mpa=5.0, supports='clamped', cg_rel_tolerance=1e-10)
    scaled = uniform_block_problem(traction_mpa=5.0 * alpha, supports='clamped', cg_rel_tolerance=1e-10)
    u_base, u_scaled = solve_displacements(base), solve_displacements(scaled)
    s_base, s_scaled = compute_stress(base, u_base), compute_stress(scaled, u_scaled)
    scale = np.abs(s_base.stress_tensor_mpa).max()

    u_atol = 1e-5 * alpha * np.abs(u_base.values_mm).max()
    s_atol = 1e-5 * alpha * scale

    assert np.allclose(u_scaled.values_mm, alpha * u_base.values_mm, rtol=1e-5, atol=u_atol)
    assert np.allclose(s_scaled.stress_tensor_mpa, alpha * s_base.stress_tensor_mpa, rtol=1e-5, atol=s_atol)
    assert np.allclose(s_scaled.von_mises_mpa, alpha * s_base.von_mises_mpa, rtol=1e-5, atol=s_atol)


def test_zero_load_gives_zero_field():
    displacement = solve_displacements(uniform_block_problem(traction_mpa=0.0, supports='clamped'))

    assert displacement.iterations == 0
    assert not displacement.values_mm.any()


def test_constrained_dofs_stay_zero_and_work_is_positive():
    problem = uniform_block_problem(supports='clamped', cg_rel_tolerance=1e-10)
    displacement = solve_displacements(problem)
    bottom = np.isin(displacement.node_ids, problem.fixed_node_ids)

    assert not displacement.values_mm[bottom].any()
    assert displacement.work(problem) > 0


def test_mirrored_load_mirrors_stress():
    problem = uniform_block_problem((4, 4, 2), supports='clamped', cg_rel_tolerance=1e-10)
    corner = problem.load_node_ids[np.argmin(problem.node_coords(problem.load_node_ids)[:, 0])]
    problem.load_node_ids = np.array([corner])
    problem.load_forces_n = np.array([[0.0, 0.0, -100.0]])
    x, y, z = np.unravel_index(corner, problem.node_shape)
    mirrored = np.ravel_multi_index((problem.node_shape[0] - 1 - x, y, z), problem.node_shape)
    mirror_problem = uniform_block_problem((4, 4, 2), supports='clamped', cg_rel_tolerance=1e-10)
    mirror_problem.load_node_ids = np.array([mirrored])
    mirror_problem.load_forces_n = np.array([[0.0, 0.0, -100.0]])

    left, right = _solve(problem), _solve(mirror_problem)
    vm_left = left.von_mises_mpa.reshape(4, 4, 2)
    vm_right = right.von_mises_mpa.reshape(4, 4, 2)

    assert np.allclose(vm_left, vm_right[::-1], rtol=1e-5, atol=1e-6 * vm_left.max())


def test_fewer_than_three_fixed_nodes_rejected():
    problem = uniform_block_problem(supports='clamped')
    problem.fixed_node_ids = problem.fixed_node_ids[:2]

    with pytest.raises(ValidationError) as exc:
        solve_displacements(problem)
    assert exc.value.details['field'] == 'fixed_node_ids'


def test_overlapping_fixed_and_loaded_nodes_rejected():
    problem = uniform_block_problem(supports='clamped')
    problem.fixed_node_ids = np.concatenate([problem.fixed_node_ids, problem.load_node_ids[:1]])

    with pytest.raises(ValidationError):
        solve_displacements(problem)


def test_non_finite_load_rejected():
    problem = uniform_block_problem(supports='clamped')
    problem.load_forces_n = problem.load_forces_n.copy()
    problem.load_forces_n[0, 2] = np.nan

    with pytest.raises(ValidationError):
        solve_displacements(problem)


# ============== Stress invariants ==============

def test_hydrostatic_tensor_has_no_von_mises():
    assert von_mises(np.array([[50.0, 50.0, 50.0, 0.0, 0.0, 0.0]]))[0] == pytest.approx(0.0, abs=1e-12)


def test_uniaxial_tensor():
    tensor = np.array([[100.0, 0.0, 0.0, 0.0, 0.0, 0.0]])

    assert von_mises(tensor)[0] == pytest.approx(100.0)
    assert np.allclose(principal_stresses(tensor)[0], [100.0, 0.0, 0.0], rtol=0.0, atol=1e-12)


@pytest.mark.parametrize('tensor, expected', [
    ([50.0, 50.0, 0.0, 0.0, 0.0, 0.0], [50.0, 50.0, 0.0]),
    ([0.0, 0.0, 0.0, 30.0, 0.0, 0.0], [30.0, 0.0, -30.0]),
    ([-20.0, -20.0, -20.0, 0.0, 0.0, 0.0], [-20.0, -20.0, -20.0]),
    ([1e-3, 0.0, 0.0, 0.0, 0.0, 0.0], [1e-3, 0.0, 0.0]),
])
def test_repeated_principals_are_exact(tensor, expected):
    atol = 1e-12 * max(abs(v) for v in tensor)

    assert np.allclose(principal_stresses(np.array([tensor]))[0], expected, rtol=1e-12, atol=atol)


def test_principals_match_eigenvalues():
    tensors = np.random.default_rng(0).normal(scale=50.0, size=(200, 6))
    full = np.zeros((200, 3, 3))
    full[:, 0, 0], full[:, 1, 1], full[:, 2, 2] = tensors[:, 0], tensors[:, 1], tensors[:, 2]
    full[:, 0, 1] = full[:, 1, 0] = tensors[:, 3]
    full[:, 1, 2] = full[:, 2, 1] = tensors[:, 4]
    full[:, 0, 2] = full[:, 2, 0] = tensors[:, 5]
    expected = np.linalg.eigvalsh(full)[:, ::-1]

    assert np.allclose(principal_stresses(tensors), expected, rtol=1e-12, atol=1e-12 * np.abs(tensors).max())


def test_von_mises_ignores_added_pressure():
    tensors = np.random.default_rng(1).normal(scale=50.0, size=(50, 6))
    shifted = tensors.copy()
    shifted[:, :3] += 37.0

    assert np.allclose(von_mises(tensors), von_mises(shifted))


# ============== Wheel loads ==============

def test_four_node_patch_splits_the_weight():
    nodes, forces = assemble_load(_cube_geometry(), 558.0)

    assert len(nodes) == 4
    assert np.allclose(forces[:, 2], -1368.495, atol=1e-9)
    assert not forces[:, :2].any()


def test_load_sums_to_weight():
    _, forces = assemble_load(_cube_geometry(), 498.0)

    assert np.allclose(forces.sum(axis=0), [0.0, 0.0, -4885.38], atol=1e-9)


def test_zero_mass_gives_zero_load():
    _, forces = assemble_load(_cube_geometry(), 0.0)

    assert not forces.any()


def test_empty_impact_patch_rejected():
    geometry = _cube_geometry()
    geometry.impact_face_voxel_ids = np.zeros(0, dtype=np.int64)

    with pytest.raises(GeometryError):
        assemble_load(geometry, 500.0)


def test_wheel_solve_reports_every_element(generated_store):
    sample = generated_store.load_sample(generated_store.sample_ids()[0])
    stress = solve_sample(sample.geometry, sample.barrier_mass_kg, OracleConfig())

    assert len(stress) == int(sample.geometry.voxels.sum())
    assert np.all(np.isfinite(stress.von_mises_mpa))
    assert stress.von_mises_mpa.max() > 0
    assert stress.residual <= OracleConfig().cg_rel_tolerance
    assert np.all(stress.principal_mpa[:, 0] >= stress.principal_mpa[:, 2])


def test_solved_dataset_has_stress_for_every_sample(tiny_store):
    for sample_id in tiny_store.sample_ids():
        stress = tiny_store.load_stress(sample_id)
        assert len(stress) > 0
        assert stress.iterations > 0
