"""
Condition encoding, sampling plans, primitive shapes and dataset generation.

On-disk layout of a dataset directory:

    manifest.json
    records/00000000.rec
    records/00000001.rec
    ...

Record file: u32 version, u8 input-kind tag, input grid (VXG1), target grid
(VXG1), u16 condition length, condition as f32 little-endian, u32 metadata
length, metadata as UTF-8 JSON with sorted keys.
"""
import hashlib
import json
import logging
import math
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from .elastic import (E_MAX_GPA, E_MIN_GPA, NU_CAP, NU_MAX, ForceSpec, HexMesh, MaterialParams,
                      build_hex_mesh, calibrate_max_force, deform_and_revoxelize, solve_displacement)
from .errors import (ConfigError, FormatError, GenerationError, ParameterError, PhysNetError,
                     RangeError, SizeError)
from .voxel import (CameraPose, VoxelGrid, depth_to_partial_grid, enumerate_rotations, read_grid,
                    grid_to_bytes, recenter, render_depth, rotate_grid, transform_grid)

logger = logging.getLogger(__name__)

REAL = "real"
ONE_HOT = "one_hot"
ENCODING_MODES = (REAL, ONE_HOT)

FULL3D = "full3d"
PARTIAL = "partial"
RECONSTRUCTION = "reconstruction"
GENERATION_MODES = (FULL3D, PARTIAL, RECONSTRUCTION)

INPUT_KINDS = {FULL3D: 0, PARTIAL: 1, "reconstructed": 2}
_KIND_BY_TAG = {tag: kind for kind, tag in INPUT_KINDS.items()}

PRIMITIVES = ("bridge", "beam", "block", "cylinder", "custom")

RECORD_VERSION = 1
MANIFEST_VERSION = 1
MAX_SKIP_RATE = 0.05
SPLITS = ("train", "validation", "test")

_RECORD_HEADER = struct.Struct("<IB")
_U16 = struct.Struct("<H")
_U32 = struct.Struct("<I")

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Condition vectors

@dataclass(frozen=True)
class ConditionVector:
    """Normalized condition y fed to the generator and the discriminator"""
    e_scaled: float
    nu_scaled: float
    force_scaled: float
    location: Union[float, Tuple[float, ...]]
    encoding_mode: str = REAL

    def __post_init__(self):
        if self.encoding_mode not in ENCODING_MODES:
            raise ParameterError(f"unknown encoding mode {self.encoding_mode!r}")
        values = self.to_array()
        if np.any(values < 0.0) or np.any(values > 1.0):
            raise RangeError("condition", float(values.min() if values.min() < 0 else values.max()),
                             "condition entries must lie in [0, 1]")
        if self.encoding_mode == ONE_HOT and float(np.sum(self.location)) != 1.0:
            raise ParameterError("one-hot location must sum to exactly 1")

    @property
    def length(self) -> int:
        return 3 + (len(self.location) if self.encoding_mode == ONE_HOT else 1)

    def to_array(self) -> np.ndarray:
        location = np.atleast_1d(np.asarray(self.location, dtype=np.float64))
        head = np.array([self.e_scaled, self.nu_scaled, self.force_scaled])
        return np.concatenate([head, location]).astype(np.float32)

    @classmethod
    def from_array(cls, values: Sequence[float], encoding_mode: str = REAL) -> "ConditionVector":
        values = [float(v) for v in values]
        if len(values) < 4:
            raise FormatError(f"condition vector too short ({len(values)} entries)")
        if encoding_mode == REAL:
            if len(values) != 4:
                raise FormatError(f"real-valued condition must have 4 entries, got {len(values)}")
            location: Union[float, Tuple[float, ...]] = values[3]
        else:
            location = tuple(values[3:])
        return cls(values[0], values[1], values[2], location, encoding_mode)


def condition_length(encoding_mode: str, n_locations: int) -> int:
    return 4 if encoding_mode == REAL else 3 + n_locations


_LOG_E_MIN = math.log(E_MIN_GPA)
_LOG_E_SPAN = math.log(E_MAX_GPA) - math.log(E_MIN_GPA)


def encode_condition(m: MaterialParams, f: ForceSpec, f_max: float,
                     mode: str = REAL, n_locations: int = 10) -> ConditionVector:
    """
    Scale raw physics to [0, 1]: log-E, linear ν over [0, 0.5], F / f_max,
    location as index / (L - 1) or one-hot.
    """
    if mode not in ENCODING_MODES:
        raise ParameterError(f"unknown encoding mode {mode!r}")
    if not E_MIN_GPA * (1 - 1e-12) <= m.youngs_modulus <= E_MAX_GPA * (1 + 1e-12):
        raise RangeError("youngs_modulus", m.youngs_modulus)
    if f.location_index >= n_locations:
        raise RangeError("location", f.location_index,
                         f"location index {f.location_index} outside [0, {n_locations - 1}]")
    if f_max <= 0.0:
        if f.magnitude > 0.0:
            raise RangeError("force", f.magnitude, "positive force with a non-positive f_max")
        force_scaled = 0.0
    else:
        if f.magnitude > f_max * (1.0 + 1e-9):
            raise RangeError("force", f.magnitude, f"force {f.magnitude} N exceeds f_max {f_max} N")
        force_scaled = min(f.magnitude / f_max, 1.0)

    e_scaled = (math.log(m.youngs_modulus) - _LOG_E_MIN) / _LOG_E_SPAN
    e_scaled = min(max(e_scaled, 0.0), 1.0)
    nu_scaled = m.poissons_ratio / NU_MAX
    if mode == REAL:
        location: Union[float, Tuple[float, ...]] = \
            f.location_index / (n_locations - 1) if n_locations > 1 else 0.0
    else:
        location = tuple(1.0 if i == f.location_index else 0.0 for i in range(n_locations))
    return ConditionVector(e_scaled, nu_scaled, force_scaled, location, mode)


def decode_condition(c: ConditionVector, f_max: float, n_locations: int = 10,
                     direction: Tuple[float, float, float] = (0.0, 0.0, -1.0)) -> Tuple[MaterialParams, ForceSpec]:
    """Inverse of encode_condition"""
    e = math.exp(_LOG_E_MIN + c.e_scaled * _LOG_E_SPAN)
    e = min(max(e, E_MIN_GPA), E_MAX_GPA)
    nu = c.nu_scaled * NU_MAX
    if c.encoding_mode == REAL:
        index = int(round(float(c.location) * (n_locations - 1))) if n_locations > 1 else 0
    else:
        index = int(np.argmax(c.location))
    return MaterialParams(e, nu), ForceSpec(c.force_scaled * f_max, index, direction)


# ---------------------------------------------------------------------------
# Sampling plans

@dataclass
class SamplingPlan:
    """How many materials, forces, locations, stretches and views to generate"""
    e_count: int = 20
    nu_count: int = 20
    force_count: int = 30
    location_count: int = 10
    scale_samples_per_axis: int = 1
    rotations_per_axis: int = 5
    e_scale: str = "log"
    nu_scale: str = "linear"
    nu_fixed: Optional[float] = None
    force_max: Optional[float] = None
    force_fraction: float = 0.3
    scale_range: Tuple[float, float] = (0.5, 1.5)
    encoding_mode: str = REAL

    def __post_init__(self):
        counts = {
            "e_count": self.e_count, "nu_count": self.nu_count, "force_count": self.force_count,
            "location_count": self.location_count,
            "scale_samples_per_axis": self.scale_samples_per_axis,
            "rotations_per_axis": self.rotations_per_axis,
        }
        for name, value in counts.items():
            if int(value) < 1:
                raise ParameterError(f"{name} must be >= 1, got {value}")
        if self.e_scale != "log" or self.nu_scale != "linear":
            raise ParameterError("E is sampled on a log scale and ν on a linear scale")
        if self.encoding_mode not in ENCODING_MODES:
            raise ParameterError(f"unknown encoding mode {self.encoding_mode!r}")
        self.scale_range = tuple(self.scale_range)

    @classmethod
    def one_by(cls, n: int, **kwargs) -> "SamplingPlan":
        """1×N: N log-spaced Young's moduli, ν held at 0.3"""
        kwargs.setdefault("nu_fixed", 0.3)
        return cls(e_count=n, nu_count=1, **kwargs)

    @classmethod
    def square(cls, k: int, **kwargs) -> "SamplingPlan":
        """K×K joint grid over E and ν"""
        return cls(e_count=k, nu_count=k, **kwargs)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["scale_range"] = list(self.scale_range)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SamplingPlan":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown sampling keys: {sorted(unknown)}")
        return cls(**data)


def sample_materials(plan: SamplingPlan) -> List[MaterialParams]:
    """Cartesian product of log-spaced E and linearly spaced ν, E-major"""
    if plan.e_count > 1:
        youngs = np.geomspace(E_MIN_GPA, E_MAX_GPA, plan.e_count)
    else:
        youngs = np.array([math.sqrt(E_MIN_GPA * E_MAX_GPA)])
    if plan.nu_count > 1:
        poissons = np.minimum(np.linspace(0.0, NU_MAX, plan.nu_count), NU_CAP)
    else:
        poissons = np.array([plan.nu_fixed if plan.nu_fixed is not None else NU_MAX / 2.0])
    return [MaterialParams(float(e), float(nu)) for e in youngs for nu in poissons]


def force_magnitudes(plan: SamplingPlan, f_max: float) -> List[float]:
    if plan.force_count == 1:
        return [float(f_max)]
    return [float(v) for v in np.linspace(0.0, f_max, plan.force_count)]


def scale_variants(plan: SamplingPlan) -> List[Tuple[float, float, float]]:
    """One axis stretched at a time over a linear ladder"""
    if plan.scale_samples_per_axis == 1:
        return [(1.0, 1.0, 1.0)]
    lo, hi = plan.scale_range
    ladder = np.linspace(lo, hi, plan.scale_samples_per_axis)
    variants = []
    for axis in range(3):
        for s in ladder:
            scale = [1.0, 1.0, 1.0]
            scale[axis] = float(s)
            variants.append(tuple(scale))
    return variants


# ---------------------------------------------------------------------------
# Primitive shapes

@dataclass
class ObjectSpec:
    """An object to simulate: a primitive kind or a custom base grid"""
    kind: str
    object_id: Optional[str] = None
    base_grid: Optional[VoxelGrid] = None

    def __post_init__(self):
        if self.kind not in PRIMITIVES:
            raise ParameterError(f"unknown primitive {self.kind!r}; choose from {PRIMITIVES}")
        if self.kind == "custom" and self.base_grid is None:
            raise ParameterError("custom objects need a base grid")
        self.object_id = self.object_id or self.kind


def _extent(base: float, stretch: float) -> int:
    return max(1, int(round(base * stretch)))


def _place(mask: np.ndarray, resolution: int, kind: str) -> np.ndarray:
    ex, ey, ez = mask.shape
    if ex > resolution or ey > resolution or ez > resolution:
        raise SizeError(f"{kind} of extent {mask.shape} does not fit in a {resolution}³ grid")
    grid = np.zeros((resolution,) * 3, dtype=bool)
    x0 = (resolution - ex) // 2
    y0 = (resolution - ey) // 2
    grid[x0:x0 + ex, y0:y0 + ey, :ez] = mask
    return grid


def build_primitive(kind: str, scale: Sequence[float] = (1.0, 1.0, 1.0), resolution: int = 16,
                    spacing: float = 0.01, base_grid: Optional[VoxelGrid] = None) -> VoxelGrid:
    """
    Rasterize a parametric primitive resting on z = 0, centered in x and y.

    At unit scale a block fills half the grid per axis; a beam is long in x;
    a bridge is a deck on two pillars; a cylinder stands along z.
    """
    if kind not in PRIMITIVES:
        raise ParameterError(f"unknown primitive {kind!r}")
    sx, sy, sz = (float(s) for s in scale)
    if min(sx, sy, sz) <= 0:
        raise ParameterError(f"stretch factors must be positive, got {scale}")
    n = resolution
    half, quarter = n / 2.0, n / 4.0

    if kind == "block":
        mask = np.ones((_extent(half, sx), _extent(half, sy), _extent(half, sz)), dtype=bool)
    elif kind == "beam":
        mask = np.ones((_extent(half, sx), _extent(quarter, sy), _extent(quarter, sz)), dtype=bool)
    elif kind == "bridge":
        ex, ey, ez = _extent(half, sx), _extent(quarter, sy), _extent(half, sz)
        pillar = max(1, int(round(ex / 4.0)))
        deck = max(1, int(round(ez / 4.0)))
        mask = np.zeros((ex, ey, ez), dtype=bool)
        mask[:, :, ez - deck:] = True
        mask[:pillar] = True
        mask[ex - pillar:] = True
    elif kind == "cylinder":
        ex, ey, ez = _extent(half, sx), _extent(half, sy), _extent(half, sz)
        x = (np.arange(ex) + 0.5 - ex / 2.0) / (ex / 2.0)
        y = (np.arange(ey) + 0.5 - ey / 2.0) / (ey / 2.0)
        disc = x[:, None] ** 2 + y[None, :] ** 2 <= 1.0
        mask = np.repeat(disc[:, :, None], ez, axis=2)
    else:
        if base_grid is None:
            raise ParameterError("custom primitive needs a base grid")
        coords = np.argwhere(base_grid.mask())
        if len(coords) == 0:
            raise ParameterError("custom base grid is empty")
        lo, hi = coords.min(axis=0), coords.max(axis=0) + 1
        cropped = base_grid.mask()[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        mask = ndimage.zoom(cropped.astype(np.uint8), (sx, sy, sz), order=0) > 0
        if not mask.any():
            raise SizeError("custom shape vanished after rescaling")

    return VoxelGrid.from_mask(_place(mask, n, kind), spacing)


# ---------------------------------------------------------------------------
# Records

@dataclass
class RecordMetadata:
    object_id: str
    youngs_modulus: float
    poissons_ratio: float
    force: float
    location_index: int
    scale: Tuple[float, float, float]
    rotation: Tuple[float, float, float]
    seed: int
    f_max: float
    location_count: int
    encoding_mode: str = REAL
    direction: Tuple[float, float, float] = (0.0, 0.0, -1.0)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        for key in ("scale", "rotation", "direction"):
            data[key] = list(data[key])
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RecordMetadata":
        data = dict(data)
        for key in ("scale", "rotation", "direction"):
            data[key] = tuple(data[key])
        return cls(**data)

    def material(self) -> MaterialParams:
        return MaterialParams(self.youngs_modulus, self.poissons_ratio)

    def force_spec(self) -> ForceSpec:
        return ForceSpec(self.force, self.location_index, tuple(self.direction))


@dataclass
class SampleRecord:
    """One (input, target, condition) training pair plus raw metadata"""
    input_grid: VoxelGrid
    target_grid: VoxelGrid
    condition: Optional[ConditionVector]
    input_kind: str
    metadata: RecordMetadata

    def __post_init__(self):
        if self.input_kind not in INPUT_KINDS:
            raise ParameterError(f"unknown input kind {self.input_kind!r}")
        if self.input_grid.resolution != self.target_grid.resolution:
            raise SizeError("input and target grids must share one resolution")


def record_to_bytes(record: SampleRecord) -> bytes:
    parts = [_RECORD_HEADER.pack(RECORD_VERSION, INPUT_KINDS[record.input_kind]),
             grid_to_bytes(record.input_grid), grid_to_bytes(record.target_grid)]
    condition = record.condition.to_array() if record.condition is not None else np.zeros(0, np.float32)
    parts.append(_U16.pack(len(condition)))
    parts.append(condition.astype("<f4").tobytes())
    meta = json.dumps(record.metadata.to_dict(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(_U32.pack(len(meta)))
    parts.append(meta)
    return b"".join(parts)


def record_from_bytes(data: bytes) -> SampleRecord:
    if len(data) < _RECORD_HEADER.size:
        raise FormatError("truncated record header")
    version, tag = _RECORD_HEADER.unpack_from(data)
    if version != RECORD_VERSION:
        raise FormatError(f"unsupported record version {version}")
    if tag not in _KIND_BY_TAG:
        raise FormatError(f"unknown input kind tag {tag}")
    input_grid, offset = read_grid(data, _RECORD_HEADER.size)
    target_grid, offset = read_grid(data, offset)
    (n_condition,) = _U16.unpack_from(data, offset)
    offset += _U16.size
    condition_values = np.frombuffer(data, dtype="<f4", count=n_condition, offset=offset)
    offset += 4 * n_condition
    (n_meta,) = _U32.unpack_from(data, offset)
    offset += _U32.size
    metadata = RecordMetadata.from_dict(json.loads(data[offset:offset + n_meta].decode("utf-8")))
    condition = ConditionVector.from_array(condition_values, metadata.encoding_mode) if n_condition else None
    return SampleRecord(input_grid, target_grid, condition, _KIND_BY_TAG[tag], metadata)


# ---------------------------------------------------------------------------
# Manifest

@dataclass
class DatasetManifest:
    """Catalog of a generated dataset directory"""
    plan: SamplingPlan
    mode: str
    resolution: int
    spacing: float
    seed: int
    offsets: List[int] = field(default_factory=list)
    sizes: List[int] = field(default_factory=list)
    splits: Dict[str, List[int]] = field(default_factory=dict)
    objects: List[Dict[str, Any]] = field(default_factory=list)
    skipped: int = 0
    format_version: int = MANIFEST_VERSION
    root: Optional[Path] = None

    @property
    def record_count(self) -> int:
        return len(self.offsets)

    @property
    def condition_length(self) -> int:
        if self.mode == RECONSTRUCTION:
            return 0
        return condition_length(self.plan.encoding_mode, self.plan.location_count)

    def record_path(self, index: int) -> Path:
        if self.root is None:
            raise ConfigError("manifest has no root directory")
        return self.root / "records" / f"{index:08d}.rec"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "format_version": self.format_version,
            "mode": self.mode,
            "resolution": self.resolution,
            "spacing": self.spacing,
            "seed": self.seed,
            "plan": self.plan.to_dict(),
            "record_count": self.record_count,
            "offsets": self.offsets,
            "sizes": self.sizes,
            "splits": self.splits,
            "objects": self.objects,
            "skipped": self.skipped,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any], root: Optional[Path] = None) -> "DatasetManifest":
        if data.get("format_version") != MANIFEST_VERSION:
            raise FormatError(f"unsupported manifest version {data.get('format_version')}")
        manifest = cls(
            plan=SamplingPlan.from_dict(data["plan"]),
            mode=data["mode"],
            resolution=int(data["resolution"]),
            spacing=float(data["spacing"]),
            seed=int(data["seed"]),
            offsets=list(data["offsets"]),
            sizes=list(data["sizes"]),
            splits={k: list(v) for k, v in data["splits"].items()},
            objects=list(data.get("objects", [])),
            skipped=int(data.get("skipped", 0)),
            root=root,
        )
        if manifest.record_count != data["record_count"]:
            raise FormatError("manifest record_count does not match its offsets")
        return manifest

    def f_max(self) -> float:
        """Reference force scale: the first object's calibrated maximum"""
        return float(self.objects[0]["f_max"]) if self.objects else 0.0


def load_manifest(path: PathLike) -> DatasetManifest:
    path = Path(path)
    manifest_path = path / "manifest.json" if path.is_dir() else path
    if not manifest_path.exists():
        raise ConfigError(f"no dataset manifest at {manifest_path}")
    data = json.loads(manifest_path.read_text(encoding="utf-8"))
    return DatasetManifest.from_dict(data, root=manifest_path.parent)


def load_record(manifest: DatasetManifest, index: int) -> SampleRecord:
    return record_from_bytes(manifest.record_path(index).read_bytes())


def split_of(seed: int, index: int) -> str:
    """80/10/10 split by hash of (seed, index)"""
    digest = hashlib.blake2b(f"{seed}:{index}".encode("utf-8"), digest_size=8).digest()
    bucket = int.from_bytes(digest, "little") % 10
    if bucket < 8:
        return "train"
    return "validation" if bucket == 8 else "test"


def record_seed(seed: int, index: int) -> int:
    digest = hashlib.blake2b(f"record:{seed}:{index}".encode("utf-8"), digest_size=4).digest()
    return int.from_bytes(digest, "little")


# ---------------------------------------------------------------------------
# Generation

@dataclass
class _ShapeCase:
    object_id: str
    scale: Tuple[float, float, float]
    grid: VoxelGrid
    mesh: Optional[HexMesh]
    f_max: float


@dataclass
class _SolveJob:
    case_index: int
    material: MaterialParams
    force: ForceSpec


def _prepare_case(obj: ObjectSpec, scale, plan: SamplingPlan, mode: str, resolution: int,
                  spacing: float, direction) -> _ShapeCase:
    grid = build_primitive(obj.kind, scale, resolution, spacing, obj.base_grid)
    if mode == RECONSTRUCTION:
        return _ShapeCase(obj.object_id, tuple(scale), grid, None, 0.0)
    mesh = build_hex_mesh(grid, plan.location_count)
    if plan.force_max is not None:
        f_max = float(plan.force_max)
    else:
        softest = sample_materials(plan)[0]
        f_max = calibrate_max_force(mesh, softest, fraction=plan.force_fraction, direction=direction)
    return _ShapeCase(obj.object_id, tuple(scale), grid, mesh, f_max)


def _run_job(case: _ShapeCase, job: _SolveJob) -> Tuple[Optional[VoxelGrid], str]:
    try:
        u = solve_displacement(case.mesh, job.material, job.force)
        target = deform_and_revoxelize(case.mesh, u, case.grid.resolution, case.grid.spacing)
    except PhysNetError as e:
        return None, str(e)
    if target.occupied_count() == 0 or not target.is_grounded():
        return None, "deformed target is empty or lost contact with the ground"
    return target, ""


def generate_dataset(plan: SamplingPlan, objects: Sequence[ObjectSpec], mode: str, out_path: PathLike,
                     seed: int = 0, resolution: int = 16, spacing: float = 0.01, workers: int = 1,
                     direction: Tuple[float, float, float] = (0.0, 0.0, -1.0),
                     overwrite: bool = False) -> DatasetManifest:
    """
    Simulate every (object, scale, material, force, location) combination and
    write the records plus manifest.json to out_path.

    In partial mode every simulated pair is expanded over the camera poses: the
    input is the visible shell from that pose, the target the deformed solid
    in the same camera frame. Reconstruction mode skips the physics and pairs
    partial views with the undeformed solid.

    Raises:
        GenerationError: more than 5% of the FEM solves failed, or the
        directory already holds a dataset and overwrite is False
    """
    if mode not in GENERATION_MODES:
        raise ParameterError(f"unknown generation mode {mode!r}; choose from {GENERATION_MODES}")
    if not objects:
        raise ParameterError("at least one object is required")
    out = Path(out_path)
    if (out / "manifest.json").exists() and not overwrite:
        raise GenerationError(f"{out} already contains a dataset")
    records_dir = out / "records"
    records_dir.mkdir(parents=True, exist_ok=True)
    for stale in records_dir.glob("*.rec"):
        stale.unlink()

    started = time.perf_counter()
    cases = [_prepare_case(obj, scale, plan, mode, resolution, spacing, direction)
             for obj in objects for scale in scale_variants(plan)]
    materials = sample_materials(plan)

    targets: List[Tuple[int, Optional[_SolveJob], Optional[VoxelGrid]]] = []
    skipped = 0
    if mode == RECONSTRUCTION:
        targets = [(i, None, case.grid) for i, case in enumerate(cases)]
    else:
        jobs = [_SolveJob(i, m, ForceSpec(force, loc, direction))
                for i, case in enumerate(cases)
                for m in materials
                for force in force_magnitudes(plan, case.f_max)
                for loc in range(plan.location_count)]
        with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
            results = list(pool.map(lambda job: _run_job(cases[job.case_index], job), jobs))
        for job, (target, cause) in zip(jobs, results):
            if target is None:
                skipped += 1
                logger.warning("skipped %s E=%.4g nu=%.4g F=%.4g loc=%d: %s",
                               cases[job.case_index].object_id, job.material.youngs_modulus,
                               job.material.poissons_ratio, job.force.magnitude,
                               job.force.location_index, cause)
                continue
            targets.append((job.case_index, job, target))
        if jobs and skipped / len(jobs) > MAX_SKIP_RATE:
            raise GenerationError(f"{skipped} of {len(jobs)} simulations failed "
                                  f"(more than {MAX_SKIP_RATE:.0%})")

    poses = enumerate_rotations(plan.rotations_per_axis) if mode != FULL3D else [CameraPose()]
    partial_views: Dict[int, List[VoxelGrid]] = {}
    shifts: Dict[int, np.ndarray] = {}

    manifest = DatasetManifest(plan=plan, mode=mode, resolution=resolution, spacing=spacing,
                               seed=seed, skipped=skipped, root=out,
                               splits={name: [] for name in SPLITS})
    manifest.objects = [{"object_id": c.object_id, "scale": list(c.scale), "f_max": c.f_max}
                        for c in cases]
    offset = 0
    index = 0
    for case_index, job, target in targets:
        case = cases[case_index]
        if mode != FULL3D and case_index not in partial_views:
            centered, shift = recenter(case.grid)
            shifts[case_index] = shift
            partial_views[case_index] = [depth_to_partial_grid(render_depth(centered, pose)) for pose in poses]
        for pose_index, pose in enumerate(poses):
            if mode == FULL3D:
                input_grid, target_grid, kind = case.grid, target, FULL3D
            else:
                moved = transform_grid(target, np.eye(3), shifts[case_index])
                input_grid = partial_views[case_index][pose_index]
                target_grid, kind = rotate_grid(moved, pose), PARTIAL
            if job is None:
                material, force, condition = MaterialParams(E_MIN_GPA, 0.0), ForceSpec(0.0), None
            else:
                material, force = job.material, job.force
                condition = encode_condition(material, force, case.f_max, plan.encoding_mode,
                                             plan.location_count)
            metadata = RecordMetadata(
                object_id=case.object_id,
                youngs_modulus=material.youngs_modulus,
                poissons_ratio=material.poissons_ratio,
                force=force.magnitude,
                location_index=force.location_index,
                scale=case.scale,
                rotation=pose.angles,
                seed=record_seed(seed, index),
                f_max=case.f_max,
                location_count=plan.location_count,
                encoding_mode=plan.encoding_mode,
                direction=tuple(direction),
            )
            data = record_to_bytes(SampleRecord(input_grid, target_grid, condition, kind, metadata))
            manifest.record_path(index).write_bytes(data)
            manifest.offsets.append(offset)
            manifest.sizes.append(len(data))
            manifest.splits[split_of(seed, index)].append(index)
            offset += len(data)
            index += 1

    (out / "manifest.json").write_text(json.dumps(manifest.to_dict(), indent=2), encoding="utf-8")
    logger.info("generated %d records (%d skipped) in %.1fs", index, skipped,
                time.perf_counter() - started)
    return manifest


# ---------------------------------------------------------------------------
# Loading for training

@dataclass
class RecordArrays:
    """Stacked records of one split, ready for tensor conversion"""
    inputs: np.ndarray
    targets: np.ndarray
    conditions: np.ndarray
    metadata: List[RecordMetadata]
    indices: List[int]

    def __len__(self) -> int:
        return len(self.indices)

    def subset(self, keep: Iterable[int]) -> "RecordArrays":
        keep = list(keep)
        return RecordArrays(self.inputs[keep], self.targets[keep], self.conditions[keep],
                            [self.metadata[i] for i in keep], [self.indices[i] for i in keep])


def reencode(metadata: RecordMetadata, encoding_mode: str) -> np.ndarray:
    condition = encode_condition(metadata.material(), metadata.force_spec(), metadata.f_max,
                                 encoding_mode, metadata.location_count)
    return condition.to_array()


def load_split(manifest: DatasetManifest, split: Optional[str] = "train",
               encoding_mode: Optional[str] = None) -> RecordArrays:
    """
    Load the records of a split (None = every record); conditions are
    re-encoded from raw metadata with the requested location encoding.
    """
    if split is None:
        indices = list(range(manifest.record_count))
    elif split in manifest.splits:
        indices = list(manifest.splits[split])
    else:
        raise ConfigError(f"unknown split {split!r}")
    mode = encoding_mode or manifest.plan.encoding_mode
    n = manifest.resolution
    n_condition = 0 if manifest.mode == RECONSTRUCTION else condition_length(mode, manifest.plan.location_count)
    inputs = np.zeros((len(indices), n, n, n), dtype=np.float32)
    targets = np.zeros_like(inputs)
    conditions = np.zeros((len(indices), n_condition), dtype=np.float32)
    metadata = []
    for row, index in enumerate(indices):
        record = load_record(manifest, index)
        inputs[row] = record.input_grid.values
        targets[row] = record.target_grid.values
        if n_condition:
            conditions[row] = reencode(record.metadata, mode)
        metadata.append(record.metadata)
    return RecordArrays(inputs, targets, conditions, metadata, indices)
