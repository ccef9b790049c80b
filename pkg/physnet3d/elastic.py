"""
Linear elastostatics on hexahedral meshes built from voxel grids.

Each occupied voxel becomes one 8-node brick; nodes on the ground plane are
clamped and the force is spread over one of the load sites on the top surface.
The system K·u = f is solved with Jacobi-preconditioned conjugate gradients.
"""
import functools
import itertools
import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage, sparse
from scipy.sparse.csgraph import connected_components

from .errors import (DimensionError, GroundingError, ParameterError, RangeError,
                     SingularMaterialError, SolverError, UngroundedError)
from .voxel import BINARY, VoxelGrid

logger = logging.getLogger(__name__)

E_MIN_GPA = 1e-5
E_MAX_GPA = 23.0
NU_MAX = 0.5
NU_CAP = 0.4995
GPA = 1e9

# local node order of the trilinear brick, as lattice offsets
LOCAL_OFFSETS = np.array([
    [0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0],
    [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1],
])
_NATURAL = 2 * LOCAL_OFFSETS - 1
_TOP_FACE = np.array([[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]])


@dataclass(frozen=True)
class MaterialParams:
    """Isotropic linear-elastic material; Young's modulus in GPa"""
    youngs_modulus: float
    poissons_ratio: float

    def __post_init__(self):
        e = self.youngs_modulus
        if not (E_MIN_GPA * (1 - 1e-12) <= e <= E_MAX_GPA * (1 + 1e-12)):
            raise RangeError("youngs_modulus", e,
                             f"Young's modulus {e} GPa outside [{E_MIN_GPA}, {E_MAX_GPA}]")
        if not 0.0 <= self.poissons_ratio <= NU_MAX:
            raise RangeError("poissons_ratio", self.poissons_ratio,
                             f"Poisson's ratio {self.poissons_ratio} outside [0, {NU_MAX}]")


@dataclass(frozen=True)
class ForceSpec:
    """Point-like load: magnitude in Newtons, site index and unit direction"""
    magnitude: float
    location_index: int = 0
    direction: Tuple[float, float, float] = (0.0, 0.0, -1.0)

    def __post_init__(self):
        if not self.magnitude >= 0.0:
            raise RangeError("force", self.magnitude, f"force magnitude {self.magnitude} must be >= 0")
        if self.location_index < 0:
            raise RangeError("location", self.location_index, "location index must be >= 0")
        if abs(np.linalg.norm(self.direction) - 1.0) > 1e-9:
            raise ParameterError(f"force direction {self.direction} is not a unit vector")

    def vector(self) -> np.ndarray:
        return self.magnitude * np.asarray(self.direction, dtype=np.float64)


@dataclass
class HexMesh:
    """Voxel-derived brick mesh with ground constraints and load sites"""
    nodes: np.ndarray
    elements: np.ndarray
    fixed_nodes: np.ndarray
    load_sites: List[np.ndarray]
    spacing: float
    grid_resolution: int
    lattice: Optional[np.ndarray] = None

    def __post_init__(self):
        self.nodes = np.asarray(self.nodes, dtype=np.float64)
        self.elements = np.asarray(self.elements, dtype=np.int64)
        self.fixed_nodes = np.unique(np.asarray(self.fixed_nodes, dtype=np.int64))
        self.load_sites = [np.unique(np.asarray(s, dtype=np.int64)) for s in self.load_sites]
        n = len(self.nodes)
        if self.elements.ndim != 2 or self.elements.shape[1] != 8:
            raise DimensionError("elements must be an (m, 8) index array")
        for indices in [self.elements.ravel(), self.fixed_nodes, *self.load_sites]:
            if indices.size and (indices.min() < 0 or indices.max() >= n):
                raise DimensionError("mesh references a node index out of range")

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_dofs(self) -> int:
        return 3 * len(self.nodes)

    def height(self) -> float:
        return float(self.nodes[:, 2].max() - self.nodes[:, 2].min())


@dataclass
class DisplacementField:
    """Per-node displacement in meters"""
    u: np.ndarray

    def __post_init__(self):
        self.u = np.asarray(self.u, dtype=np.float64)
        if self.u.ndim != 2 or self.u.shape[1] != 3:
            raise DimensionError(f"displacement must be (n, 3), got {self.u.shape}")
        if not np.all(np.isfinite(self.u)):
            raise SolverError("displacement field is not finite", float("nan"))

    def max_magnitude(self) -> float:
        return float(np.linalg.norm(self.u, axis=1).max()) if len(self.u) else 0.0


@dataclass
class PCGInfo:
    iterations: int
    residual: float
    converged: bool
    breakdown: bool = False


# ---------------------------------------------------------------------------
# Mesh construction

def _largest_component(mask: np.ndarray) -> np.ndarray:
    labels, count = ndimage.label(mask)
    if count <= 1:
        return mask
    sizes = np.bincount(labels.ravel())[1:]
    keep = int(np.argmax(sizes)) + 1
    logger.warning("occupied region has %d disconnected parts; keeping the largest (%d of %d cells)",
                   count, int(sizes[keep - 1]), int(sizes.sum()))
    return labels == keep


def _site_for_location(top_lattice: np.ndarray, top_ids: np.ndarray,
                       index: int, n_locations: int) -> np.ndarray:
    xs = top_lattice[:, 0]
    x_min, x_max = xs.min(), xs.max()
    target = x_min + (index + 0.5) * (x_max - x_min) / n_locations
    candidates = np.unique(xs)
    x_site = candidates[np.argmin(np.abs(candidates - target))]
    in_plane = xs == x_site
    z_top = top_lattice[in_plane, 2].max()
    chosen = in_plane & (top_lattice[:, 2] == z_top)
    return np.sort(top_ids[chosen])


def build_hex_mesh(g: VoxelGrid, n_locations: int = 1) -> HexMesh:
    """
    One brick per occupied cell with shared nodes merged.

    Args:
        g: Binary grid whose occupied region rests on z = 0
        n_locations: Number of load sites spread along the top surface in x

    Returns:
        HexMesh: nodes in meters, bottom-plane nodes clamped
    """
    if g.kind != BINARY:
        raise ParameterError("build_hex_mesh needs a binary grid")
    if n_locations < 1:
        raise ParameterError("n_locations must be >= 1")
    mask = g.mask()
    if not mask.any():
        raise UngroundedError("grid has no occupied cells")
    mask = _largest_component(mask)
    if not mask[:, :, 0].any():
        raise UngroundedError("occupied region does not touch the ground plane z = 0")

    n = g.resolution
    lattice_shape = (n + 1,) * 3
    cells = np.argwhere(mask)
    corners = cells[:, None, :] + LOCAL_OFFSETS[None, :, :]
    flat = np.ravel_multi_index(corners.reshape(-1, 3).T, lattice_shape)
    unique, inverse = np.unique(flat, return_inverse=True)
    elements = inverse.reshape(-1, 8)
    lattice = np.stack(np.unravel_index(unique, lattice_shape), axis=1)
    fixed = np.nonzero(lattice[:, 2] == 0)[0]

    above = np.zeros_like(mask)
    above[:, :, :-1] = mask[:, :, 1:]
    top_cells = np.argwhere(mask & ~above)
    top_corners = (top_cells[:, None, :] + _TOP_FACE[None, :, :]).reshape(-1, 3)
    top_ids = np.unique(np.searchsorted(unique, np.ravel_multi_index(top_corners.T, lattice_shape)))
    top_lattice = lattice[top_ids]
    sites = [_site_for_location(top_lattice, top_ids, i, n_locations) for i in range(n_locations)]

    return HexMesh(lattice * g.spacing, elements, fixed, sites, g.spacing, n, lattice)


# ---------------------------------------------------------------------------
# Element and global stiffness

def constitutive_matrix(m: MaterialParams) -> np.ndarray:
    """6x6 isotropic D in Pa, Voigt order xx, yy, zz, xy, yz, xz (engineering shear)"""
    nu = m.poissons_ratio
    if nu >= NU_MAX:
        raise SingularMaterialError(f"Poisson's ratio {nu} >= 0.5 makes the material singular")
    e = m.youngs_modulus * GPA
    factor = e / ((1.0 + nu) * (1.0 - 2.0 * nu))
    d = np.zeros((6, 6))
    d[:3, :3] = factor * nu
    d[np.arange(3), np.arange(3)] = factor * (1.0 - nu)
    d[np.arange(3, 6), np.arange(3, 6)] = factor * (1.0 - 2.0 * nu) / 2.0
    return d


def _strain_operator(grads: np.ndarray) -> np.ndarray:
    """B (6 x 3k) from spatial gradients (3 x k) of k interpolation functions"""
    k = grads.shape[1]
    b = np.zeros((6, 3 * k))
    b[0, 0::3] = grads[0]
    b[1, 1::3] = grads[1]
    b[2, 2::3] = grads[2]
    b[3, 0::3] = grads[1]
    b[3, 1::3] = grads[0]
    b[4, 1::3] = grads[2]
    b[4, 2::3] = grads[1]
    b[5, 0::3] = grads[2]
    b[5, 2::3] = grads[0]
    return b


def _shape_gradients(xi: np.ndarray) -> np.ndarray:
    """dN/dξ (3 x 8) at natural point xi"""
    ones = 1.0 + _NATURAL * xi
    grads = np.empty((3, 8))
    grads[0] = _NATURAL[:, 0] * ones[:, 1] * ones[:, 2] / 8.0
    grads[1] = _NATURAL[:, 1] * ones[:, 0] * ones[:, 2] / 8.0
    grads[2] = _NATURAL[:, 2] * ones[:, 0] * ones[:, 1] / 8.0
    return grads


def shape_functions(xi: np.ndarray) -> np.ndarray:
    """Trilinear N (s x 8) at natural points xi (s x 3)"""
    xi = np.atleast_2d(xi)
    return np.prod(1.0 + xi[:, None, :] * _NATURAL[None, :, :], axis=2) / 8.0


@functools.lru_cache(maxsize=64)
def _cached_stiffness(e: float, nu: float, spacing: float, incompatible_modes: bool) -> np.ndarray:
    d = constitutive_matrix(MaterialParams(e, nu))
    scale = 2.0 / spacing
    det_j = (spacing / 2.0) ** 3
    gauss = 1.0 / np.sqrt(3.0)
    k_uu = np.zeros((24, 24))
    k_ua = np.zeros((24, 9))
    k_aa = np.zeros((9, 9))
    for xi in itertools.product((-gauss, gauss), repeat=3):
        xi = np.asarray(xi)
        b = _strain_operator(scale * _shape_gradients(xi))
        k_uu += b.T @ d @ b * det_j
        if incompatible_modes:
            # bubble modes 1 - ξ², 1 - η², 1 - ζ² per displacement component
            g = _strain_operator(scale * np.diag(-2.0 * xi))
            k_ua += b.T @ d @ g * det_j
            k_aa += g.T @ d @ g * det_j
    if incompatible_modes:
        k_uu = k_uu - k_ua @ np.linalg.solve(k_aa, k_ua.T)
    return 0.5 * (k_uu + k_uu.T)


def element_stiffness(m: MaterialParams, spacing: float, incompatible_modes: bool = True) -> np.ndarray:
    """
    24x24 stiffness of a cubic brick of edge `spacing` (meters).

    2x2x2 Gauss quadrature. With incompatible_modes the nine internal bending
    modes are condensed out, which removes shear locking in bending.
    """
    if not spacing > 0:
        raise ParameterError(f"spacing must be positive, got {spacing}")
    if m.poissons_ratio >= NU_MAX:
        raise SingularMaterialError(
            f"Poisson's ratio {m.poissons_ratio} >= 0.5 makes the material singular")
    return _cached_stiffness(m.youngs_modulus, m.poissons_ratio, float(spacing),
                             incompatible_modes).copy()


def element_dofs(mesh: HexMesh) -> np.ndarray:
    return (3 * mesh.elements[:, :, None] + np.arange(3)).reshape(len(mesh.elements), 24)


def assemble_stiffness(mesh: HexMesh, m: MaterialParams, incompatible_modes: bool = True) -> sparse.csr_matrix:
    """Global sparse stiffness; every element shares the same cubic Ke"""
    ke = element_stiffness(m, mesh.spacing, incompatible_modes)
    edofs = element_dofs(mesh)
    n_elem = len(edofs)
    rows = np.repeat(edofs, 24, axis=1).ravel()
    cols = np.tile(edofs, (1, 24)).ravel()
    data = np.tile(ke.ravel(), n_elem)
    return sparse.coo_matrix((data, (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()


def load_vector(mesh: HexMesh, f: ForceSpec) -> np.ndarray:
    """Force spread equally over the nodes of the chosen load site"""
    if f.location_index >= len(mesh.load_sites):
        raise RangeError("location", f.location_index,
                         f"location index {f.location_index} but mesh has {len(mesh.load_sites)} sites")
    site = mesh.load_sites[f.location_index]
    loads = np.zeros((mesh.n_nodes, 3))
    loads[site] += f.vector() / len(site)
    return loads.ravel()


def constrained_dofs(mesh: HexMesh) -> np.ndarray:
    return (3 * mesh.fixed_nodes[:, None] + np.arange(3)).ravel()


def _check_constrained(mesh: HexMesh) -> None:
    if len(mesh.fixed_nodes) == 0:
        raise GroundingError("mesh has no fixed nodes; the solid is not grounded")
    n = mesh.n_nodes
    pairs = mesh.elements[:, [0, 1, 2, 3, 4, 5, 6, 0, 1, 2, 3]], mesh.elements[:, [1, 2, 3, 0, 5, 6, 7, 4, 5, 6, 7]]
    adjacency = sparse.coo_matrix(
        (np.ones(pairs[0].size), (pairs[0].ravel(), pairs[1].ravel())), shape=(n, n))
    n_parts, labels = connected_components(adjacency, directed=False)
    grounded = np.zeros(n_parts, dtype=bool)
    grounded[labels[mesh.fixed_nodes]] = True
    if not grounded.all():
        raise GroundingError(f"{int((~grounded).sum())} mesh part(s) carry no fixed node")


def pcg(a: sparse.spmatrix, b: np.ndarray, tol: float = 1e-8,
        maxiter: Optional[int] = None, x0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, PCGInfo]:
    """
    Jacobi-preconditioned conjugate gradients for SPD systems.

    Returns:
        Tuple[np.ndarray, PCGInfo]: solution and convergence report
        (relative residual ||b - Ax|| / ||b||)
    """
    n = b.shape[0]
    maxiter = maxiter if maxiter is not None else 20 * n
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return np.zeros(n), PCGInfo(0, 0.0, True)
    diag = a.diagonal()
    if np.any(diag <= 0.0):
        return x, PCGInfo(0, 1.0, False, breakdown=True)
    inv_diag = 1.0 / diag

    r = b - a @ x
    residual = np.linalg.norm(r) / b_norm
    if residual <= tol:
        return x, PCGInfo(0, residual, True)
    z = inv_diag * r
    p = z.copy()
    rz = r @ z
    for k in range(1, maxiter + 1):
        ap = a @ p
        curvature = p @ ap
        if curvature <= 0.0:
            return x, PCGInfo(k, residual, False, breakdown=True)
        alpha = rz / curvature
        x += alpha * p
        r -= alpha * ap
        residual = np.linalg.norm(r) / b_norm
        if residual <= tol:
            return x, PCGInfo(k, residual, True)
        z = inv_diag * r
        rz_next = r @ z
        p = z + (rz_next / rz) * p
        rz = rz_next
    return x, PCGInfo(maxiter, residual, False)


def solve_displacement(mesh: HexMesh, m: MaterialParams, f: ForceSpec,
                       tol: float = 1e-8, incompatible_modes: bool = True) -> DisplacementField:
    """
    Solve K·u = f with the ground nodes clamped.

    Raises:
        GroundingError: some part of the mesh is unconstrained
        SolverError: CG did not converge within 20·DOF iterations
    """
    _check_constrained(mesh)
    rhs = load_vector(mesh, f)
    u = np.zeros(mesh.n_dofs)
    if f.magnitude == 0.0:
        return DisplacementField(u.reshape(-1, 3))

    fixed = constrained_dofs(mesh)
    free = np.setdiff1d(np.arange(mesh.n_dofs), fixed)
    stiffness = assemble_stiffness(mesh, m, incompatible_modes)
    reduced = stiffness[free][:, free]
    x, info = pcg(reduced, rhs[free], tol=tol, maxiter=20 * len(free))
    if info.breakdown:
        raise GroundingError("stiffness matrix is not positive definite; insufficient constraints")
    if not info.converged:
        raise SolverError(f"PCG did not converge in {info.iterations} iterations", info.residual)
    logger.debug("PCG converged in %d iterations (residual %.2e)", info.iterations, info.residual)
    u[free] = x
    return DisplacementField(u.reshape(-1, 3))


# ---------------------------------------------------------------------------
# Deformed shape back to voxels

_SAMPLE_POINTS = np.array(list(itertools.product((-2.0 / 3.0, 0.0, 2.0 / 3.0), repeat=3)))
_SAMPLE_WEIGHTS = shape_functions(_SAMPLE_POINTS)


def deform_and_revoxelize(mesh: HexMesh, u: DisplacementField,
                          resolution: Optional[int] = None, spacing: Optional[float] = None) -> VoxelGrid:
    """Displace nodes, sample each brick at 27 interior points, mark hit cells"""
    resolution = resolution or mesh.grid_resolution
    spacing = spacing or mesh.spacing
    if u.u.shape != mesh.nodes.shape:
        raise DimensionError(f"displacement shape {u.u.shape} does not match mesh nodes {mesh.nodes.shape}")
    deformed = mesh.nodes + u.u
    samples = np.einsum("sa,mac->msc", _SAMPLE_WEIGHTS, deformed[mesh.elements]).reshape(-1, 3)
    cells = np.floor(samples / spacing).astype(np.int64)
    inside = np.all((cells >= 0) & (cells < resolution), axis=1)
    if not inside.all():
        logger.warning("deformed shape leaves the grid: %.2f%% of samples clipped",
                       100.0 * (1.0 - inside.mean()))
    mask = np.zeros((resolution,) * 3, dtype=bool)
    kept = cells[inside]
    mask[kept[:, 0], kept[:, 1], kept[:, 2]] = True
    return VoxelGrid.from_mask(mask, spacing)


def mesh_voxels(mesh: HexMesh) -> VoxelGrid:
    return deform_and_revoxelize(mesh, DisplacementField(np.zeros_like(mesh.nodes)))


def calibrate_max_force(mesh: HexMesh, material: MaterialParams, location_index: Optional[int] = None,
                        fraction: float = 0.3, direction: Sequence[float] = (0.0, 0.0, -1.0)) -> float:
    """Force magnitude that moves some node by `fraction` of the mesh height"""
    if location_index is None:
        location_index = len(mesh.load_sites) // 2
    unit = solve_displacement(mesh, material, ForceSpec(1.0, location_index, tuple(direction)))
    peak = unit.max_magnitude()
    if peak <= 0.0:
        raise SolverError("unit load produced no displacement", 0.0)
    return fraction * mesh.height() / peak
