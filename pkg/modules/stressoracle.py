"""
Static linear-elastic FEM oracle for WheelSurrogate

Every occupied voxel is an 8-node trilinear hexahedron on the (D+1)^3 node
lattice. The stiffness operator is applied matrix-free and the system is solved
with Jacobi-preconditioned conjugate gradients. Units are mm, N and MPa.
"""
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse
from scipy.sparse.linalg import LinearOperator, cg

from config import Config
from models import MaterialParams, StressField, WheelGeometry
from modules.config import OracleConfig, RunConfig
from modules.datastore import DatasetStore
from utils.exceptions import GeometryError, SolverError, ValidationError
from utils.logger import logger

REDUCTION_MODES = ('reproducible', 'fast')

# Local corner order of a hexahedron: bottom face counter-clockwise, then top face
HEX_CORNERS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
], dtype=np.int64)
HEX_SIGNS = 2.0 * HEX_CORNERS - 1.0

STAGNATION_WINDOW = 10
STAGNATION_CHECK_EVERY = 50
MAX_RESTARTS = 3


# ============== Element matrices ==============

def elasticity_matrix(material: MaterialParams) -> np.ndarray:
    """Isotropic 6x6 Hooke matrix in MPa, engineering shear strains"""
    material.validate()
    e_mpa = material.youngs_modulus_pa / 1e6
    nu = material.poisson_ratio
    lam = e_mpa * nu / ((1 + nu) * (1 - 2 * nu))
    mu = e_mpa / (2 * (1 + nu))
    d = np.zeros((6, 6))
    d[:3, :3] = lam
    d[np.arange(3), np.arange(3)] = lam + 2 * mu
    d[np.arange(3, 6), np.arange(3, 6)] = mu
    return d


def strain_displacement(xi: float, eta: float, zeta: float, pitch_mm: float) -> np.ndarray:
    """6x24 B matrix of a cube element of edge pitch_mm at natural coordinates in [-1, 1]^3"""
    sx, sy, sz = HEX_SIGNS[:, 0], HEX_SIGNS[:, 1], HEX_SIGNS[:, 2]
    scale = 2.0 / pitch_mm
    dnx = sx * (1 + sy * eta) * (1 + sz * zeta) / 8.0 * scale
    dny = sy * (1 + sx * xi) * (1 + sz * zeta) / 8.0 * scale
    dnz = sz * (1 + sx * xi) * (1 + sy * eta) / 8.0 * scale
    b = np.zeros((6, 24))
    b[0, 0::3] = dnx
    b[1, 1::3] = dny
    b[2, 2::3] = dnz
    b[3, 0::3], b[3, 1::3] = dny, dnx
    b[4, 1::3], b[4, 2::3] = dnz, dny
    b[5, 0::3], b[5, 2::3] = dnz, dnx
    return b


@lru_cache(maxsize=16)
def _unit_element_stiffness(youngs_modulus_pa: float, poisson_ratio: float) -> np.ndarray:
    d = elasticity_matrix(MaterialParams(youngs_modulus_pa, poisson_ratio))
    gauss = (-1 / np.sqrt(3), 1 / np.sqrt(3))
    k = np.zeros((24, 24))
    det_j = 1.0 / 8.0
    for xi in gauss:
        for eta in gauss:
            for zeta in gauss:
                b = strain_displacement(xi, eta, zeta, 1.0)
                k += b.T @ d @ b * det_j
    k = 0.5 * (k + k.T)
    k.setflags(write=False)
    return k


def element_stiffness(material: MaterialParams, pitch_mm: float) -> np.ndarray:
    """24x24 hexahedral stiffness (N/mm); scales linearly with the edge length"""
    return pitch_mm * _unit_element_stiffness(material.youngs_modulus_pa, material.poisson_ratio)


# ============== Problem ==============

@dataclass(eq=False)
class FemProblem:
    """Voxel mesh, material, constraints and nodal loads of one static solve"""
    voxels: np.ndarray
    pitch_mm: float
    origin_mm: float
    material: MaterialParams
    fixed_node_ids: np.ndarray
    load_node_ids: np.ndarray
    load_forces_n: np.ndarray
    fixed_dofs: Optional[np.ndarray] = None      # global dof ids (3*node + axis); all dofs of fixed nodes when None
    cg_rel_tolerance: float = 1e-6
    cg_max_iters: int = 20000
    reduction_mode: str = 'reproducible'

    @property
    def node_shape(self) -> Tuple[int, int, int]:
        return tuple(s + 1 for s in self.voxels.shape)

    def node_coords(self, node_ids: np.ndarray) -> np.ndarray:
        idx = np.stack(np.unravel_index(np.asarray(node_ids, dtype=np.int64), self.node_shape), axis=1)
        return self.origin_mm + idx * self.pitch_mm

    def constrained_dofs(self) -> np.ndarray:
        if self.fixed_dofs is not None:
            return np.unique(np.asarray(self.fixed_dofs, dtype=np.int64))
        nodes = np.asarray(self.fixed_node_ids, dtype=np.int64)
        return np.sort((3 * nodes[:, None] + np.arange(3)).ravel())

    def validate(self) -> 'FemProblem':
        self.material.validate()
        if self.reduction_mode not in REDUCTION_MODES:
            raise ValidationError(f"reduction_mode must be one of {REDUCTION_MODES}", field='reduction_mode')
        if not self.voxels.any():
            raise ValidationError("Problem has no elements", field='voxels')
        forces = np.asarray(self.load_forces_n, dtype=np.float64)
        if forces.shape != (len(self.load_node_ids), 3):
            raise ValidationError("load_forces_n must have shape (n_load_nodes, 3)", field='load_forces_n')
        if not np.all(np.isfinite(forces)):
            raise ValidationError("Load magnitudes must be finite", field='load_forces_n')
        overlap = np.intersect1d(self.fixed_node_ids, self.load_node_ids)
        if len(overlap):
            raise ValidationError(
                "Fixed and loaded node sets must be disjoint",
                field='load_node_ids',
                details={'overlap': [int(n) for n in overlap[:10]]}
            )
        fixed = np.unique(np.asarray(self.fixed_node_ids, dtype=np.int64))
        if len(fixed) < 3:
            raise ValidationError("At least 3 fixed nodes are required", field='fixed_node_ids')
        coords = self.node_coords(fixed)
        if np.linalg.matrix_rank(coords - coords[0], tol=1e-9 * max(self.pitch_mm, 1.0)) < 2:
            raise ValidationError("Fixed nodes are collinear; rigid modes remain", field='fixed_node_ids')
        return self


@dataclass(eq=False)
class DisplacementField:
    """Nodal displacements (mm) on the active nodes of a problem"""
    node_ids: np.ndarray
    values_mm: np.ndarray            # (n_nodes, 3)
    iterations: int = 0
    residual: float = 0.0

    def work(self, problem: FemProblem) -> float:
        """External work u.f of the applied loads"""
        positions = np.searchsorted(self.node_ids, problem.load_node_ids)
        return float(np.sum(self.values_mm[positions] * problem.load_forces_n))


class StiffnessOperator:
    """Global stiffness K of a voxel mesh, applied matrix-free over active-node dofs"""

    def __init__(self, problem: FemProblem):
        self.problem = problem
        self.element_ids = np.flatnonzero(problem.voxels.ravel())
        element_idx = np.stack(np.unravel_index(self.element_ids, problem.voxels.shape), axis=1)
        corner_idx = element_idx[:, None, :] + HEX_CORNERS[None, :, :]
        global_nodes = np.ravel_multi_index(
            (corner_idx[..., 0], corner_idx[..., 1], corner_idx[..., 2]), problem.node_shape
        )
        self.node_ids, compact = np.unique(global_nodes, return_inverse=True)
        self.element_nodes = compact.reshape(global_nodes.shape)
        self.element_dofs = (3 * self.element_nodes[:, :, None] + np.arange(3)).reshape(len(self.element_ids), 24)
        self.n_dofs = 3 * len(self.node_ids)
        self.k_element = element_stiffness(problem.material, problem.pitch_mm)
        self._matrix: Optional[sparse.csr_matrix] = None

    def matvec(self, u: np.ndarray) -> np.ndarray:
        """K.u over all active-node dofs"""
        if self.problem.reduction_mode == 'fast':
            return self.matrix @ u
        u_e = u[self.element_dofs]
        f_e = u_e @ self.k_element
        return np.bincount(self.element_dofs.ravel(), weights=f_e.ravel(), minlength=self.n_dofs)

    @property
    def matrix(self) -> sparse.csr_matrix:
        if self._matrix is None:
            rows = np.repeat(self.element_dofs, 24, axis=1).ravel()
            cols = np.tile(self.element_dofs, (1, 24)).ravel()
            values = np.broadcast_to(self.k_element.ravel(), (len(self.element_ids), 576)).ravel()
            self._matrix = sparse.coo_matrix((values, (rows, cols)), shape=(self.n_dofs, self.n_dofs)).tocsr()
        return self._matrix

    def diagonal(self) -> np.ndarray:
        weights = np.broadcast_to(np.diag(self.k_element), self.element_dofs.shape)
        return np.bincount(self.element_dofs.ravel(), weights=weights.ravel(), minlength=self.n_dofs)

    def compact_dofs(self, global_dofs: np.ndarray) -> np.ndarray:
        """Map global dof ids (3*node + axis) of active nodes to operator positions"""
        global_dofs = np.asarray(global_dofs, dtype=np.int64)
        nodes, axes = global_dofs // 3, global_dofs % 3
        positions = np.searchsorted(self.node_ids, nodes)
        inside = (positions < len(self.node_ids)) & (self.node_ids[np.minimum(positions, len(self.node_ids) - 1)] == nodes)
        return 3 * positions[inside] + axes[inside]

    def free_dofs(self) -> np.ndarray:
        mask = np.ones(self.n_dofs, dtype=bool)
        mask[self.compact_dofs(self.problem.constrained_dofs())] = False
        return np.flatnonzero(mask)

    def free_operator(self, free: np.ndarray) -> LinearOperator:
        """K restricted to the free dofs"""
        def apply(x: np.ndarray) -> np.ndarray:
            full = np.zeros(self.n_dofs)
            full[free] = np.ravel(x)
            return self.matvec(full)[free]
        return LinearOperator((len(free), len(free)), matvec=apply, dtype=np.float64)

    def load_vector(self) -> np.ndarray:
        f = np.zeros(self.n_dofs)
        positions = np.searchsorted(self.node_ids, self.problem.load_node_ids)
        if np.any(self.node_ids[np.minimum(positions, len(self.node_ids) - 1)] != self.problem.load_node_ids):
            raise ValidationError("Load applied to a node outside the mesh", field='load_node_ids')
        np.add.at(f, (3 * positions[:, None] + np.arange(3)).ravel(), np.ravel(self.problem.load_forces_n))
        return f


# ============== Solve ==============

def solve_displacements(problem: FemProblem) -> DisplacementField:
    """
    Solve K u = f on the free dofs

    Returns:
        DisplacementField with constrained dofs exactly zero

    Raises:
        SolverError: no convergence within cg_max_iters, or residual stagnation
            (a singular system, e.g. a body part without constraints)
    """
    problem.validate()
    operator = StiffnessOperator(problem)
    free = operator.free_dofs()
    f = operator.load_vector()
    b = f[free]
    b_norm = float(np.linalg.norm(b))
    u = np.zeros(operator.n_dofs)
    if b_norm == 0.0:
        return DisplacementField(operator.node_ids, u.reshape(-1, 3), 0, 0.0)

    k_free = operator.free_operator(free)
    diag = operator.diagonal()[free]
    if np.any(diag <= 0):
        raise SolverError("Stiffness diagonal is not positive on free dofs")
    preconditioner = LinearOperator(k_free.shape, matvec=lambda r: np.ravel(r) / diag, dtype=np.float64)

    iterations = 0
    history: List[float] = []

    def callback(xk: np.ndarray) -> None:
        nonlocal iterations
        iterations += 1
        if iterations % STAGNATION_CHECK_EVERY == 0:
            history.append(float(np.linalg.norm(b - k_free.matvec(xk))) / b_norm)

    x = np.zeros(len(free))
    residual = 1.0
    for _ in range(MAX_RESTARTS):
        remaining = problem.cg_max_iters - iterations
        if remaining <= 0:
            break
        x, info = cg(k_free, b, x0=x, rtol=problem.cg_rel_tolerance, atol=0.0,
                     maxiter=remaining, M=preconditioner, callback=callback)
        residual = float(np.linalg.norm(b - k_free.matvec(x))) / b_norm
        if residual <= problem.cg_rel_tolerance:
            break
        if _stagnated(history):
            raise SolverError(
                "CG residual stagnated; the system is singular (insufficient constraints)",
                iterations=iterations,
                residual=residual,
                details={'singular': True}
            )
        # otherwise the recursive residual drifted from the true one; restart from x
    if residual > problem.cg_rel_tolerance:
        raise SolverError(
            f"CG did not converge within {problem.cg_max_iters} iterations",
            iterations=iterations,
            residual=residual,
            details={'singular': _stagnated(history)}
        )

    u[free] = x
    return DisplacementField(operator.node_ids, u.reshape(-1, 3), iterations, residual)


def _stagnated(history: Sequence[float]) -> bool:
    if len(history) < STAGNATION_WINDOW:
        return False
    window = history[-STAGNATION_WINDOW:]
    return min(window) > 0.99 * window[0]


# ============== Stress recovery ==============

def von_mises(tensor: np.ndarray) -> np.ndarray:
    """von Mises stress of (n, 6) tensors ordered xx, yy, zz, xy, yz, xz"""
    tensor = np.atleast_2d(tensor)
    xx, yy, zz, xy, yz, xz = tensor.T
    value = 0.5 * ((xx - yy) ** 2 + (yy - zz) ** 2 + (zz - xx) ** 2) + 3.0 * (xy ** 2 + yz ** 2 + xz ** 2)
    return np.sqrt(np.maximum(value, 0.0))


def tensor_matrices(tensor: np.ndarray) -> np.ndarray:
    """(n, 6) Voigt rows ordered xx, yy, zz, xy, yz, xz as (n, 3, 3) symmetric matrices"""
    tensor = np.atleast_2d(np.asarray(tensor, dtype=np.float64))
    xx, yy, zz, xy, yz, xz = tensor.T
    return np.stack([
        np.stack([xx, xy, xz], axis=-1),
        np.stack([xy, yy, yz], axis=-1),
        np.stack([xz, yz, zz], axis=-1),
    ], axis=1)


def principal_stresses(tensor: np.ndarray) -> np.ndarray:
    """Eigenvalues of symmetric 3x3 tensors, sorted s1 >= s2 >= s3"""
    return np.linalg.eigvalsh(tensor_matrices(tensor))[:, ::-1].copy()


def compute_stress(problem: FemProblem, displacement: DisplacementField) -> StressField:
    """Per-element stress at the element centroid"""
    operator = StiffnessOperator(problem)
    if not np.array_equal(operator.node_ids, displacement.node_ids):
        raise ValidationError("Displacement field does not belong to this problem", field='displacement')
    b = strain_displacement(0.0, 0.0, 0.0, problem.pitch_mm)
    d = elasticity_matrix(problem.material)
    u_e = displacement.values_mm.ravel()[operator.element_dofs]
    tensor = u_e @ (d @ b).T
    element_idx = np.stack(np.unravel_index(operator.element_ids, problem.voxels.shape), axis=1)
    return StressField(
        element_ids=operator.element_ids,
        centroid_mm=problem.origin_mm + (element_idx + 0.5) * problem.pitch_mm,
        stress_tensor_mpa=tensor,
        von_mises_mpa=von_mises(tensor),
        principal_mpa=principal_stresses(tensor),
        iterations=displacement.iterations,
        residual=displacement.residual,
    )


# ============== Wheel problems ==============

def voxel_node_ids(voxel_ids: np.ndarray, voxel_shape: Tuple[int, int, int], corners: np.ndarray = HEX_CORNERS) -> np.ndarray:
    """Unique lattice node ids of the given voxel corners"""
    idx = np.stack(np.unravel_index(np.asarray(voxel_ids, dtype=np.int64), voxel_shape), axis=1)
    corner_idx = (idx[:, None, :] + corners[None, :, :]).reshape(-1, 3)
    node_shape = tuple(s + 1 for s in voxel_shape)
    return np.unique(np.ravel_multi_index(tuple(corner_idx.T), node_shape))


def hub_node_ids(geometry: WheelGeometry) -> np.ndarray:
    return voxel_node_ids(geometry.hub_voxel_ids, geometry.voxels.shape)


def assemble_load(geometry: WheelGeometry, barrier_mass_kg: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nodal forces of the barrier impact

    The weight m*g acts along -z on the unique top-face nodes of the impact patch
    (hub nodes excluded); the last node takes the rounding remainder so the forces
    sum to (0, 0, -m*g).

    Returns:
        (node_ids, forces) with forces of shape (n, 3) in N
    """
    if len(geometry.impact_face_voxel_ids) == 0:
        raise GeometryError("Impact patch is empty")
    nodes = voxel_node_ids(geometry.impact_face_voxel_ids, geometry.voxels.shape, HEX_CORNERS[4:])
    nodes = np.setdiff1d(nodes, hub_node_ids(geometry))
    if len(nodes) == 0:
        raise GeometryError("Impact patch nodes are all constrained")
    total = float(barrier_mass_kg) * Config.GRAVITY_M_S2
    forces = np.zeros((len(nodes), 3))
    share = total / len(nodes)
    forces[:-1, 2] = -share
    forces[-1, 2] = -(total - share * (len(nodes) - 1))
    return nodes, forces


def problem_from_geometry(geometry: WheelGeometry, barrier_mass_kg: float,
                          config: Optional[OracleConfig] = None) -> FemProblem:
    """Hub-clamped wheel under the barrier load"""
    config = config or OracleConfig()
    load_nodes, forces = assemble_load(geometry, barrier_mass_kg)
    return FemProblem(
        voxels=geometry.voxels,
        pitch_mm=geometry.pitch_mm,
        origin_mm=geometry.origin_mm,
        material=MaterialParams(config.youngs_modulus_pa, config.poisson_ratio),
        fixed_node_ids=hub_node_ids(geometry),
        load_node_ids=load_nodes,
        load_forces_n=forces,
        cg_rel_tolerance=config.cg_rel_tolerance,
        cg_max_iters=config.cg_max_iters,
        reduction_mode=config.reduction_mode,
    )


def solve_sample(geometry: WheelGeometry, barrier_mass_kg: float,
                 config: Optional[OracleConfig] = None) -> StressField:
    start = time.perf_counter()
    problem = problem_from_geometry(geometry, barrier_mass_kg, config)
    stress = compute_stress(problem, solve_displacements(problem))
    stress.wall_time_s = time.perf_counter() - start
    return stress


def uniform_block_problem(
    shape: Tuple[int, int, int] = (4, 4, 4),
    pitch_mm: float = 1.0,
    traction_mpa: float = 10.0,
    material: Optional[MaterialParams] = None,
    supports: str = 'roller',
    cg_rel_tolerance: float = 1e-12,
    reduction_mode: str = 'reproducible',
) -> FemProblem:
    """
    Solid block compressed by a uniform traction on its top face

    With `roller` supports the bottom face is free to slide (uz = 0, plus ux = 0 on
    x = 0 and uy = 0 on y = 0), so the exact solution is uniaxial. `clamped`
    fixes every dof of the bottom face.
    """
    material = material or MaterialParams()
    voxels = np.ones(shape, dtype=bool)
    node_shape = tuple(s + 1 for s in shape)
    ix, iy, iz = np.meshgrid(*(np.arange(n) for n in node_shape), indexing='ij')
    all_nodes = np.arange(int(np.prod(node_shape))).reshape(node_shape)
    bottom = all_nodes[iz == 0]

    if supports == 'roller':
        fixed_dofs = np.concatenate([
            3 * bottom + 2,
            3 * all_nodes[(iz == 0) & (ix == 0)] + 0,
            3 * all_nodes[(iz == 0) & (iy == 0)] + 1,
        ])
    elif supports == 'clamped':
        fixed_dofs = None
    else:
        raise ValidationError(f"Unknown supports {supports!r}", field='supports')

    # consistent nodal loads of bilinear faces: each top face spreads a quarter to its corners
    top_faces = np.flatnonzero(np.ones(shape[:2], dtype=bool).ravel())
    fx, fy = np.unravel_index(top_faces, shape[:2])
    face_force = -traction_mpa * pitch_mm ** 2 / 4.0
    nodal = np.zeros(int(np.prod(node_shape)))
    for cx, cy in ((0, 0), (1, 0), (1, 1), (0, 1)):
        np.add.at(nodal, all_nodes[fx + cx, fy + cy, shape[2]], face_force)
    load_nodes = np.flatnonzero(nodal)
    forces = np.zeros((len(load_nodes), 3))
    forces[:, 2] = nodal[load_nodes]

    return FemProblem(
        voxels=voxels,
        pitch_mm=pitch_mm,
        origin_mm=0.0,
        material=material,
        fixed_node_ids=bottom,
        load_node_ids=load_nodes,
        load_forces_n=forces,
        fixed_dofs=fixed_dofs,
        cg_rel_tolerance=cg_rel_tolerance,
        cg_max_iters=20000,
        reduction_mode=reduction_mode,
    )


# ============== Dataset stage ==============

def _solve_and_write(root: str, sample_id: int, config: OracleConfig) -> Dict:
    store = DatasetStore(root)
    sample = store.load_sample(sample_id)
    stress = solve_sample(sample.geometry, sample.barrier_mass_kg, config)
    meta = {
        'iterations': stress.iterations,
        'residual': stress.residual,
        'wall_time_s': stress.wall_time_s,
        'reduction_mode': config.reduction_mode,
        'n_elements': len(stress),
    }
    store.write_stress(sample_id, stress, meta)
    logger.info(
        f"Solved sample in {stress.iterations} iterations",
        extra={'stage': 'solve', 'sample_id': sample_id, 'residual': stress.residual}
    )
    return {'id': sample_id, **meta}


def solve_dataset(store: DatasetStore, config: RunConfig, workers: int = 1,
                  sample_ids: Optional[Sequence[int]] = None) -> List[Dict]:
    """Run the oracle on every sample of a dataset; samples are independent"""
    ids = list(sample_ids) if sample_ids is not None else store.sample_ids()
    return Parallel(n_jobs=workers)(
        delayed(_solve_and_write)(str(store.root), sample_id, config.oracle) for sample_id in ids
    )
