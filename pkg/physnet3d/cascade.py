"""
Cascaded prediction from a single partial view.

partial grid → reconstructor → binarize → PCA alignment → PhysNet →
inverse alignment back to the camera frame.
"""
import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch

from .dataset import PARTIAL, RECONSTRUCTION, DatasetManifest, RecordArrays, load_split
from .errors import ConfigError, DimensionError, EvaluationError, ParameterError
from .physnet import NetworkConfig, PhysNet, load_weights, predict, save_weights
from .trainer import (ArmResult, EvaluationResult, MetricLog, TrainConfig, build_model, fit,
                      train_on_manifest, dataset_metadata)
from .voxel import (DEFAULT_THRESHOLD, BINARY, RigidAlignment, VoxelGrid, apply_alignment, binarize, iou,
                    pca_align)

logger = logging.getLogger(__name__)

PIPELINE_FILE = "pipeline.json"
RECONSTRUCTOR_FILE = "reconstructor.pnw"
DEFORMER_FILE = "deformer.pnw"

PathLike = Union[str, Path]


@dataclass
class ReconstructionResult:
    grid: VoxelGrid
    low_confidence: bool = False


class ReconstructionBackend(Protocol):
    """Anything that completes a partial grid into a full probabilistic grid"""
    resolution: int

    def reconstruct(self, partial: VoxelGrid) -> ReconstructionResult:
        ...


class NetworkReconstructor:
    """Unconditioned encoder-decoder trained on reconstruction only"""

    def __init__(self, model: PhysNet):
        if model.config.condition_length != 0:
            raise ConfigError("a reconstruction network takes no condition")
        self.model = model

    @property
    def resolution(self) -> int:
        return self.model.config.grid_resolution

    def reconstruct(self, partial: VoxelGrid) -> ReconstructionResult:
        low_confidence = partial.occupied_count() == 0
        if low_confidence:
            logger.warning("reconstructing an empty partial grid; result flagged low-confidence")
        return ReconstructionResult(predict(self.model, partial, None, deterministic=True), low_confidence)


class IdentityReconstructor:
    """Bypass: the input is already a full grid"""

    def __init__(self, resolution: int):
        self.resolution = resolution

    def reconstruct(self, partial: VoxelGrid) -> ReconstructionResult:
        if partial.resolution != self.resolution:
            raise DimensionError(f"input resolution {partial.resolution} does not match {self.resolution}")
        return ReconstructionResult(partial.copy(), partial.occupied_count() == 0)


@dataclass
class CascadePipeline:
    reconstructor: ReconstructionBackend
    deformer: PhysNet
    threshold: float = DEFAULT_THRESHOLD
    align: bool = True
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ParameterError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.reconstructor.resolution != self.deformer.config.grid_resolution:
            raise DimensionError("reconstructor and deformation network must share one resolution")

    @property
    def resolution(self) -> int:
        return self.deformer.config.grid_resolution


@dataclass
class CascadeResult:
    grid: VoxelGrid
    alignment: RigidAlignment
    aligned_prediction: VoxelGrid
    unaligned: bool = False
    low_confidence: bool = False


def _is_identity(alignment: RigidAlignment) -> bool:
    return bool(np.array_equal(alignment.rotation, np.eye(3)) and not np.any(alignment.translation))


def align_reconstruction(reconstructor: ReconstructionBackend, partial: VoxelGrid, threshold: float,
                         align: bool = True) -> Tuple[VoxelGrid, RigidAlignment, ReconstructionResult]:
    """Reconstruct, binarize and rotate onto principal axes (identity when degenerate)"""
    result = reconstructor.reconstruct(partial)
    full = binarize(result.grid, threshold)
    if not align:
        return full, RigidAlignment.identity(), result
    aligned, alignment = pca_align(full)
    if alignment.degenerate:
        return full, RigidAlignment.identity(degenerate=True), result
    return aligned, alignment, result


def cascaded_predict(partial: VoxelGrid, y, pipeline: CascadePipeline,
                     deterministic: bool = True) -> CascadeResult:
    """Predict the deformed full shape in the camera frame of the partial view"""
    if partial.resolution != pipeline.resolution:
        raise DimensionError(f"input resolution {partial.resolution} does not match pipeline "
                             f"resolution {pipeline.resolution}")
    aligned, alignment, reconstruction = align_reconstruction(pipeline.reconstructor, partial,
                                                              pipeline.threshold, pipeline.align)
    prediction = predict(pipeline.deformer, aligned, y, deterministic=deterministic)
    grid = prediction if _is_identity(alignment) else apply_alignment(prediction, alignment, inverse=True)
    return CascadeResult(grid, alignment, prediction, alignment.degenerate, reconstruction.low_confidence)


def evaluate_pipeline(pipeline: CascadePipeline, arrays: RecordArrays,
                      p: Optional[float] = None) -> EvaluationResult:
    """Camera-frame IOU of cascaded predictions against the record targets"""
    p = p or pipeline.threshold
    scores = []
    for k in range(len(arrays)):
        partial = VoxelGrid(arrays.inputs[k], kind=BINARY)
        result = cascaded_predict(partial, arrays.conditions[k], pipeline)
        scores.append(iou(result.grid, VoxelGrid(arrays.targets[k], kind=BINARY), p))
    return EvaluationResult(float(np.mean(scores)), scores, list(arrays.indices))


def direct_pipeline(model: PhysNet) -> CascadePipeline:
    """A single network wrapped as a pipeline with no reconstruction and no alignment"""
    return CascadePipeline(IdentityReconstructor(model.config.grid_resolution), model, align=False)


def score_held_out(arms: Sequence[Tuple[ArmResult, CascadePipeline]], held_out: RecordArrays,
                   p: float = DEFAULT_THRESHOLD) -> None:
    """
    Overwrite each arm's final IOU with the camera-frame IOU of its pipeline
    on one shared held-out split, so every arm is scored by the same rule.

    Raises:
        EvaluationError: the held-out split is empty
    """
    if len(held_out) == 0:
        raise EvaluationError("no held-out records to score the arms on")
    for arm, pipeline in arms:
        arm.final_iou = evaluate_pipeline(pipeline, held_out, p).mean_iou


# ---------------------------------------------------------------------------
# Training

def _reconstructor_config(config: NetworkConfig) -> NetworkConfig:
    return replace(config, condition_length=0, variational=False)


def train_reconstructor(manifest: DatasetManifest, net_cfg: NetworkConfig, train_cfg: TrainConfig,
                        out_dir: Optional[PathLike] = None) -> Tuple[NetworkReconstructor, MetricLog]:
    """Partial view → undeformed full grid, weighted BCE plus the WGAN-GP critic"""
    if manifest.mode != RECONSTRUCTION:
        raise ConfigError(f"reconstructor needs a reconstruction dataset, got mode {manifest.mode!r}")
    train_cfg = replace(train_cfg, model_variant="reconstructor")
    model, log = train_on_manifest(manifest, _reconstructor_config(net_cfg), train_cfg, out_dir)
    return NetworkReconstructor(model), log


def train_direct_partial(manifest: DatasetManifest, net_cfg: NetworkConfig, train_cfg: TrainConfig,
                         out_dir: Optional[PathLike] = None,
                         encoding_mode: Optional[str] = None) -> Tuple[PhysNet, MetricLog]:
    """Plain PhysNet trained end-to-end on partial views"""
    if manifest.mode != PARTIAL:
        raise ConfigError(f"direct partial training needs a partial dataset, got mode {manifest.mode!r}")
    return train_on_manifest(manifest, net_cfg, replace(train_cfg, model_variant="direct_partial"), out_dir,
                             encoding_mode)


def aligned_arrays(reconstructor: ReconstructionBackend, arrays: RecordArrays,
                   threshold: float = DEFAULT_THRESHOLD) -> RecordArrays:
    """Replace inputs by aligned reconstructions and move targets by the same transform"""
    inputs = np.zeros_like(arrays.inputs)
    targets = np.zeros_like(arrays.targets)
    for k in range(len(arrays)):
        partial = VoxelGrid(arrays.inputs[k], kind=BINARY)
        aligned, alignment, _ = align_reconstruction(reconstructor, partial, threshold)
        inputs[k] = aligned.values
        target = VoxelGrid(arrays.targets[k], kind=BINARY)
        targets[k] = target.values if _is_identity(alignment) else apply_alignment(target, alignment).values
    return RecordArrays(inputs, targets, arrays.conditions.copy(), list(arrays.metadata), list(arrays.indices))


def train_cascade_deformer(reconstructor: ReconstructionBackend, manifest: DatasetManifest, net_cfg: NetworkConfig,
                           train_cfg: TrainConfig, out_dir: Optional[PathLike] = None) -> Tuple[PhysNet, MetricLog]:
    if manifest.mode != PARTIAL:
        raise ConfigError(f"cascade deformer needs a partial dataset, got mode {manifest.mode!r}")
    train_cfg = replace(train_cfg, model_variant="cascade_deformer")
    train_arrays = aligned_arrays(reconstructor, load_split(manifest, "train"), train_cfg.threshold)
    val_arrays = aligned_arrays(reconstructor, load_split(manifest, "validation"), train_cfg.threshold)
    model = build_model(net_cfg, train_cfg.seed, train_cfg.device)
    metadata = dataset_metadata(manifest, manifest.plan.encoding_mode, train_cfg.model_variant)
    return fit(model, train_arrays, val_arrays, train_cfg, out_dir, metadata)


def concat_curves(first: MetricLog, second: MetricLog) -> Tuple[MetricLog, int]:
    """Append the second phase after the first; returns the joined log and the phase boundary"""
    boundary = first.rows[-1].iteration if first.rows else 0
    rows = list(first.rows) + [replace(row, iteration=row.iteration + boundary) for row in second.rows]
    return MetricLog(rows), boundary


def train_cascade(reconstruction_manifest: DatasetManifest, partial_manifest: DatasetManifest,
                  scale, seed: int, out_dir: Optional[PathLike] = None) -> Tuple[CascadePipeline, MetricLog, int]:
    """
    Two training phases sharing the experiment's iteration budget: the
    reconstructor first, then the deformation stage on its aligned outputs.
    """
    half = max(1, scale.iterations // 2)
    out = Path(out_dir) if out_dir is not None else None
    reconstructor, first = train_reconstructor(
        reconstruction_manifest, scale.network_config(0, "reconstructor"),
        scale.train_config(seed, "reconstructor", half), out / "reconstructor" if out else None)
    deformer, second = train_cascade_deformer(
        reconstructor, partial_manifest, scale.network_config(partial_manifest.condition_length),
        scale.train_config(seed, "cascade_deformer", scale.iterations - half), out / "deformer" if out else None)
    log, boundary = concat_curves(first, second)
    pipeline = CascadePipeline(reconstructor, deformer,
                               metadata=dataset_metadata(partial_manifest, partial_manifest.plan.encoding_mode,
                                                          "cascade"))
    if out is not None:
        save_pipeline(pipeline, out / "pipeline")
    return pipeline, log, boundary


# ---------------------------------------------------------------------------
# Bundles

def save_pipeline(pipeline: CascadePipeline, out_dir: PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    descriptor: Dict[str, Any] = {
        "threshold": pipeline.threshold,
        "align": pipeline.align,
        "resolution": pipeline.resolution,
        "deformer": DEFORMER_FILE,
        "metadata": pipeline.metadata,
    }
    if isinstance(pipeline.reconstructor, NetworkReconstructor):
        save_weights(pipeline.reconstructor.model, out / RECONSTRUCTOR_FILE, {"variant": "reconstructor"})
        descriptor["reconstructor"] = RECONSTRUCTOR_FILE
    else:
        descriptor["reconstructor"] = None
    save_weights(pipeline.deformer, out / DEFORMER_FILE, pipeline.metadata)
    (out / PIPELINE_FILE).write_text(json.dumps(descriptor, indent=2, sort_keys=True), encoding="utf-8")
    return out


def load_pipeline(path: PathLike, device: Union[str, torch.device] = "cpu") -> CascadePipeline:
    root = Path(path)
    descriptor_path = root / PIPELINE_FILE
    if not descriptor_path.exists():
        raise ConfigError(f"no {PIPELINE_FILE} in {root}")
    descriptor = json.loads(descriptor_path.read_text(encoding="utf-8"))
    deformer, metadata = load_weights(root / descriptor["deformer"], device=device)
    if descriptor.get("reconstructor"):
        model, _ = load_weights(root / descriptor["reconstructor"], device=device)
        reconstructor = NetworkReconstructor(model)
    else:
        reconstructor = IdentityReconstructor(deformer.config.grid_resolution)
    return CascadePipeline(reconstructor, deformer, float(descriptor["threshold"]),
                           bool(descriptor.get("align", True)), descriptor.get("metadata", metadata))
