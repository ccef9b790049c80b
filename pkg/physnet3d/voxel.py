"""
Voxel grids, virtual depth camera, rotations, PCA alignment and the IOU metric.

Index order of every grid is (x, y, z) with z pointing up; the ground plane is
z = 0. The orthographic camera looks along +y, so pixel (i, j) of a depth image
is the ray through column x = i, z = j.
"""
import itertools
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Tuple, Union

import numpy as np
from scipy import ndimage
from scipy.spatial.transform import Rotation

from .errors import DimensionError, FormatError, ParameterError

logger = logging.getLogger(__name__)

BINARY = "binary"
PROBABILISTIC = "probabilistic"
_KIND_CODES = {BINARY: 0, PROBABILISTIC: 1}
_CODE_KINDS = {code: kind for kind, code in _KIND_CODES.items()}

GRID_MAGIC = b"VXG1"
DEPTH_MAGIC = b"VXD1"
_GRID_HEADER = struct.Struct("<4sIfB3x")
_DEPTH_HEADER = struct.Struct("<4sIIf3f")

VIEW_AXIS = 1
NO_HIT = math.inf
DEFAULT_THRESHOLD = 0.8

PathLike = Union[str, Path]


def _check_threshold(p: float) -> None:
    if not 0.0 < p < 1.0:
        raise ParameterError(f"threshold p must lie in (0, 1), got {p}")


def _is_power_of_two(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


@dataclass
class VoxelGrid:
    """N³ occupancy values in [0, 1] with a physical cell size in meters"""
    values: np.ndarray
    spacing: float = 1.0
    kind: str = BINARY

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float32)
        if values.ndim != 3 or len(set(values.shape)) != 1:
            raise DimensionError(f"voxel grid must be cubic N³, got shape {values.shape}")
        if not _is_power_of_two(values.shape[0]):
            raise DimensionError(f"grid resolution must be a power of two, got {values.shape[0]}")
        if not self.spacing > 0:
            raise ParameterError(f"spacing must be positive, got {self.spacing}")
        if self.kind not in _KIND_CODES:
            raise ParameterError(f"unknown grid kind {self.kind!r}")
        if values.size and (values.min() < 0.0 or values.max() > 1.0):
            raise ParameterError("grid values must lie in [0, 1]")
        if self.kind == BINARY and not np.all((values == 0.0) | (values == 1.0)):
            raise ParameterError("binary grid contains values other than 0 and 1")
        self.values = values
        self.spacing = float(self.spacing)

    @property
    def resolution(self) -> int:
        return self.values.shape[0]

    @classmethod
    def empty(cls, resolution: int, spacing: float = 1.0) -> "VoxelGrid":
        return cls(np.zeros((resolution,) * 3, dtype=np.float32), spacing, BINARY)

    @classmethod
    def from_mask(cls, mask: np.ndarray, spacing: float = 1.0) -> "VoxelGrid":
        return cls(np.asarray(mask, dtype=bool).astype(np.float32), spacing, BINARY)

    def mask(self) -> np.ndarray:
        """Boolean occupancy (cells above one half)"""
        return self.values > 0.5

    def occupied_count(self) -> int:
        return int(np.count_nonzero(self.mask()))

    def is_grounded(self) -> bool:
        return bool(self.mask()[:, :, 0].any())

    def copy(self) -> "VoxelGrid":
        return VoxelGrid(self.values.copy(), self.spacing, self.kind)


@dataclass(frozen=True)
class CameraPose:
    """Orthographic camera orientation, intrinsic XYZ Euler angles in radians"""
    angles: Tuple[float, float, float] = (0.0, 0.0, 0.0)
    projection: str = "orthographic"
    view_axis: int = VIEW_AXIS

    def __post_init__(self):
        if len(self.angles) != 3:
            raise ParameterError("camera pose needs exactly three Euler angles")
        for angle in self.angles:
            if not 0.0 <= angle < 2.0 * math.pi:
                raise ParameterError(f"pose angle {angle} outside [0, 2π)")
        if self.projection != "orthographic":
            raise ParameterError("only orthographic projection is supported")

    @classmethod
    def from_angles(cls, ax: float, ay: float, az: float) -> "CameraPose":
        """Build a pose, wrapping each angle into [0, 2π)"""
        wrap = lambda a: float(a) % (2.0 * math.pi)
        return cls((wrap(ax), wrap(ay), wrap(az)))

    @property
    def is_identity(self) -> bool:
        return all(angle == 0.0 for angle in self.angles)


@dataclass
class DepthImage:
    """Per-pixel depth in meters along the view axis; +inf marks rays that miss"""
    depths: np.ndarray
    camera: CameraPose = field(default_factory=CameraPose)
    spacing: float = 1.0

    def __post_init__(self):
        depths = np.asarray(self.depths, dtype=np.float64)
        if depths.ndim != 2:
            raise DimensionError(f"depth image must be 2-D, got shape {depths.shape}")
        finite = np.isfinite(depths)
        if np.any(depths[finite] < 0.0):
            raise ParameterError("finite depths must be non-negative")
        if np.any(np.isnan(depths)):
            raise ParameterError("depth image contains NaN")
        self.depths = depths

    @property
    def width(self) -> int:
        return self.depths.shape[0]

    @property
    def height(self) -> int:
        return self.depths.shape[1]

    def hit_count(self) -> int:
        return int(np.count_nonzero(np.isfinite(self.depths)))


@dataclass(frozen=True)
class RigidAlignment:
    """Voxel-space rigid map q = R p + t"""
    rotation: np.ndarray
    translation: np.ndarray
    degenerate: bool = False

    @classmethod
    def identity(cls, degenerate: bool = False) -> "RigidAlignment":
        return cls(np.eye(3), np.zeros(3), degenerate)

    def inverse(self) -> "RigidAlignment":
        rotation_t = self.rotation.T
        return RigidAlignment(rotation_t, -rotation_t @ self.translation, self.degenerate)


# ---------------------------------------------------------------------------
# Metrics

def binarize(g: VoxelGrid, p: float = DEFAULT_THRESHOLD) -> VoxelGrid:
    """Cell is 1 iff its value is strictly above p"""
    _check_threshold(p)
    return VoxelGrid((g.values > p).astype(np.float32), g.spacing, BINARY)


def iou(a: VoxelGrid, b: VoxelGrid, p: float = DEFAULT_THRESHOLD) -> float:
    """
    Intersection over union of {a > p} and the binary ground truth b.

    Args:
        a: Prediction, binary or probabilistic
        b: Binary ground truth
        p: Threshold applied to a

    Returns:
        float: IOU in [0, 1]; 1.0 when both sets are empty
    """
    _check_threshold(p)
    if a.resolution != b.resolution:
        raise DimensionError(f"resolution mismatch: {a.resolution} vs {b.resolution}")
    predicted = a.values > p
    truth = b.mask()
    union = np.count_nonzero(predicted | truth)
    if union == 0:
        return 1.0
    return float(np.count_nonzero(predicted & truth)) / float(union)


# ---------------------------------------------------------------------------
# Rotations and rigid transforms

def enumerate_rotations(n_per_axis: int) -> List[CameraPose]:
    """All n³ poses with n uniformly spaced angles per axis, x-major order"""
    if n_per_axis < 1:
        raise ParameterError(f"n_per_axis must be >= 1, got {n_per_axis}")
    angles = [2.0 * math.pi * k / n_per_axis for k in range(n_per_axis)]
    return [CameraPose((ax, ay, az)) for ax, ay, az in itertools.product(angles, angles, angles)]


def rotation_matrix(pose: CameraPose) -> np.ndarray:
    return Rotation.from_euler("XYZ", pose.angles).as_matrix()


def transform_grid(g: VoxelGrid, rotation: np.ndarray, translation: np.ndarray) -> VoxelGrid:
    """Nearest-neighbour resampling of g under q = R p + t (cell-index units)"""
    rotation = np.asarray(rotation, dtype=np.float64)
    translation = np.asarray(translation, dtype=np.float64)
    rotation_t = rotation.T
    out = ndimage.affine_transform(
        g.values,
        rotation_t,
        offset=-rotation_t @ translation,
        order=0,
        mode="constant",
        cval=0.0,
    )
    return VoxelGrid(np.clip(out, 0.0, 1.0), g.spacing, g.kind)


def _grid_center(resolution: int) -> np.ndarray:
    return np.full(3, (resolution - 1) / 2.0)


def rotate_grid(g: VoxelGrid, pose: CameraPose) -> VoxelGrid:
    """Rotate about the grid center"""
    if pose.is_identity:
        return g.copy()
    rotation = rotation_matrix(pose)
    center = _grid_center(g.resolution)
    return transform_grid(g, rotation, center - rotation @ center)


def apply_alignment(g: VoxelGrid, alignment: RigidAlignment, inverse: bool = False) -> VoxelGrid:
    a = alignment.inverse() if inverse else alignment
    return transform_grid(g, a.rotation, a.translation)


def recenter(g: VoxelGrid) -> Tuple[VoxelGrid, np.ndarray]:
    """Shift the occupied bounding box to the grid center by whole cells"""
    coords = np.argwhere(g.mask())
    if len(coords) == 0:
        return g.copy(), np.zeros(3)
    box_center = (coords.min(axis=0) + coords.max(axis=0)) / 2.0
    shift = np.floor(_grid_center(g.resolution) - box_center + 0.5)
    return transform_grid(g, np.eye(3), shift), shift


# ---------------------------------------------------------------------------
# Virtual depth camera

def render_depth(g: VoxelGrid, pose: CameraPose) -> DepthImage:
    """
    Orthographic depth render of a binary grid.

    The grid is rotated by the pose, then one ray per (x, z) pixel is cast
    along +y and the first occupied cell's depth is recorded in meters.
    """
    if g.kind != BINARY:
        raise ParameterError("render_depth needs a binary grid")
    occupied = rotate_grid(g, pose).mask()
    hit = occupied.any(axis=VIEW_AXIS)
    first = occupied.argmax(axis=VIEW_AXIS)
    depths = np.where(hit, first * g.spacing, NO_HIT)
    return DepthImage(depths, pose, g.spacing)


def depth_to_partial_grid(d: DepthImage) -> VoxelGrid:
    """Voxelize the visible surface: one occupied cell per finite-depth pixel"""
    if d.width != d.height:
        raise DimensionError(f"depth image must be square, got {d.width}x{d.height}")
    n = d.width
    mask = np.zeros((n, n, n), dtype=bool)
    finite = np.isfinite(d.depths)
    xs, zs = np.nonzero(finite)
    ks = np.floor(d.depths[finite] / d.spacing + 0.5).astype(np.int64)
    beyond = ks > n - 1
    if beyond.any():
        logger.warning("%d depth pixels beyond the grid extent clamped to the far boundary",
                       int(beyond.sum()))
        ks = np.minimum(ks, n - 1)
    mask[xs, ks, zs] = True
    return VoxelGrid.from_mask(mask, d.spacing)


# ---------------------------------------------------------------------------
# PCA alignment

def _orthogonal_fill(rows: np.ndarray, filled: List[bool]) -> np.ndarray:
    for k in range(3):
        if filled[k]:
            continue
        for axis in [k] + [a for a in range(3) if a != k]:
            candidate = np.eye(3)[axis]
            for j in range(3):
                if filled[j]:
                    candidate = candidate - (candidate @ rows[j]) * rows[j]
            norm = np.linalg.norm(candidate)
            if norm > 0.5:
                rows[k] = candidate / norm
                filled[k] = True
                break
    return rows


def _fix_signs(rows: np.ndarray, eps: float = 1e-9) -> np.ndarray:
    for k in range(3):
        component = rows[k, k]
        if abs(component) > eps:
            if component < 0:
                rows[k] = -rows[k]
            continue
        # no component along the target axis: first nonzero axis decides
        for axis in range(3):
            if abs(rows[k, axis]) > eps:
                if rows[k, axis] < 0:
                    rows[k] = -rows[k]
                break
    if np.linalg.det(rows) < 0:
        rows[2] = -rows[2]
    return rows


def pca_align(g: VoxelGrid, tie_tolerance: float = 1e-3) -> Tuple[VoxelGrid, RigidAlignment]:
    """
    Rotate a binary grid onto its principal axes and recenter it.

    The largest-variance axis maps to x, then y, then z. Eigen-directions that
    are tied with another eigenvalue (or carry no variance) are replaced by
    identity axes and the alignment is flagged degenerate.

    Returns:
        Tuple[VoxelGrid, RigidAlignment]: aligned grid and the applied map
    """
    coords = np.argwhere(g.mask()).astype(np.float64)
    center = _grid_center(g.resolution)
    if len(coords) < 4:
        logger.warning("pca_align: only %d occupied cells, leaving grid unaligned", len(coords))
        return g.copy(), RigidAlignment.identity(degenerate=True)

    centroid = coords.mean(axis=0)
    covariance = np.cov(coords, rowvar=False, bias=True)
    eigvals, eigvecs = np.linalg.eigh(covariance)
    order = np.argsort(-eigvals, kind="stable")
    eigvals, eigvecs = eigvals[order], eigvecs[:, order]

    scale = max(float(eigvals[0]), 1e-12)
    reliable = []
    for k in range(3):
        gap = min(abs(eigvals[k] - eigvals[j]) for j in range(3) if j != k)
        reliable.append(eigvals[k] > tie_tolerance * scale and gap > tie_tolerance * scale)

    rows = np.zeros((3, 3))
    for k in range(3):
        if reliable[k]:
            rows[k] = eigvecs[:, k]
    rows = _orthogonal_fill(rows, list(reliable))
    rows = _fix_signs(rows)

    alignment = RigidAlignment(rows, center - rows @ centroid, degenerate=not all(reliable))
    if alignment.degenerate:
        logger.debug("pca_align: degenerate covariance, eigenvalues %s", eigvals)
    return apply_alignment(g, alignment), alignment


# ---------------------------------------------------------------------------
# Serialization

def grid_to_bytes(g: VoxelGrid) -> bytes:
    header = _GRID_HEADER.pack(GRID_MAGIC, g.resolution, g.spacing, _KIND_CODES[g.kind])
    if g.kind == BINARY:
        payload = np.packbits(g.mask().ravel(order="C")).tobytes()
    else:
        payload = g.values.astype("<f4").tobytes(order="C")
    return header + payload


def read_grid(buffer: bytes, offset: int = 0) -> Tuple[VoxelGrid, int]:
    """Decode one VXG1 grid starting at offset; returns the grid and the end offset"""
    if len(buffer) - offset < _GRID_HEADER.size:
        raise FormatError("truncated grid header")
    magic, resolution, spacing, code = _GRID_HEADER.unpack_from(buffer, offset)
    if magic != GRID_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {GRID_MAGIC!r}")
    if code not in _CODE_KINDS:
        raise FormatError(f"unknown grid kind code {code}")
    start = offset + _GRID_HEADER.size
    cells = resolution ** 3
    kind = _CODE_KINDS[code]
    if kind == BINARY:
        size = (cells + 7) // 8
        if len(buffer) - start < size:
            raise FormatError("truncated binary grid payload")
        raw = np.frombuffer(buffer, dtype=np.uint8, count=size, offset=start)
        values = np.unpackbits(raw, count=cells).astype(np.float32)
    else:
        size = 4 * cells
        if len(buffer) - start < size:
            raise FormatError("truncated probabilistic grid payload")
        values = np.frombuffer(buffer, dtype="<f4", count=cells, offset=start).astype(np.float32)
    grid = VoxelGrid(values.reshape((resolution,) * 3), float(spacing), kind)
    return grid, start + size


def grid_from_bytes(data: bytes) -> VoxelGrid:
    grid, _ = read_grid(data)
    return grid


def save_grid(g: VoxelGrid, path: PathLike) -> None:
    Path(path).write_bytes(grid_to_bytes(g))


def load_grid(path: PathLike) -> VoxelGrid:
    return grid_from_bytes(Path(path).read_bytes())


def depth_to_bytes(d: DepthImage) -> bytes:
    header = _DEPTH_HEADER.pack(DEPTH_MAGIC, d.width, d.height, d.spacing, *d.camera.angles)
    return header + d.depths.astype("<f4").tobytes(order="C")


def depth_from_bytes(data: bytes) -> DepthImage:
    if len(data) < _DEPTH_HEADER.size:
        raise FormatError("truncated depth header")
    magic, width, height, spacing, ax, ay, az = _DEPTH_HEADER.unpack_from(data)
    if magic != DEPTH_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {DEPTH_MAGIC!r}")
    count = width * height
    if len(data) - _DEPTH_HEADER.size < 4 * count:
        raise FormatError("truncated depth payload")
    depths = np.frombuffer(data, dtype="<f4", count=count, offset=_DEPTH_HEADER.size)
    pose = CameraPose.from_angles(ax, ay, az)
    return DepthImage(depths.reshape(width, height).astype(np.float64), pose, float(spacing))


def save_depth(d: DepthImage, path: PathLike) -> None:
    Path(path).write_bytes(depth_to_bytes(d))


def load_depth(path: PathLike) -> DepthImage:
    return depth_from_bytes(Path(path).read_bytes())


def sniff_magic(path: PathLike) -> bytes:
    """First four bytes of a file, used to route grid vs depth inputs"""
    with open(path, "rb") as f:
        return f.read(4)
