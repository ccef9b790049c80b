"""
Cascade Test Script - reconstruction, PCA alignment and the deformation stage chained together
"""

import logging
import sys
from pathlib import Path

import numpy as np
import pytest
import torch

project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from physnet3d.cascade import (CascadePipeline, IdentityReconstructor, NetworkReconstructor,  # noqa: E402
                               aligned_arrays, cascaded_predict, concat_curves, direct_pipeline,
                               evaluate_pipeline, load_pipeline, save_pipeline, score_held_out, train_cascade,
                               train_direct_partial, train_reconstructor)
from physnet3d.dataset import (FULL3D, PARTIAL, RECONSTRUCTION, DatasetManifest, ObjectSpec,  # noqa: E402
                               RecordArrays, SamplingPlan, generate_dataset)
from physnet3d.errors import ConfigError, DimensionError, EvaluationError, ParameterError  # noqa: E402
from physnet3d.physnet import NetworkConfig, PhysNet, predict  # noqa: E402
from physnet3d.trainer import ArmResult, ExperimentScale, MetricLog, MetricRow, TrainConfig  # noqa: E402
from physnet3d.voxel import VoxelGrid, apply_alignment  # noqa: E402


def network(condition_length=4, seed=0):
    torch.manual_seed(seed)
    return PhysNet(NetworkConfig(8, condition_length=condition_length, conv_levels=2, base_channels=2,
                                 max_channels=4, latent_dim=4, flatten_dim=4,
                                 variational=condition_length > 0))


def box(lo, hi, n=8):
    mask = np.zeros((n, n, n), dtype=bool)
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return VoxelGrid.from_mask(mask, 0.01)


CONDITION = [0.2, 0.6, 0.5, 0.0]


def test_identity_pipeline_matches_plain_prediction():
    deformer = network()
    pipeline = CascadePipeline(IdentityReconstructor(8), deformer, align=False)
    grid = box((2, 2, 0), (6, 6, 4))
    result = cascaded_predict(grid, CONDITION, pipeline)
    assert np.array_equal(result.grid.values, predict(deformer, grid, CONDITION).values)
    assert not result.unaligned


def test_degenerate_alignment_falls_back_to_identity():
    pipeline = CascadePipeline(IdentityReconstructor(8), network())
    cube = box((2, 2, 2), (6, 6, 6))
    result = cascaded_predict(cube, CONDITION, pipeline)
    assert result.unaligned
    assert np.array_equal(result.alignment.rotation, np.eye(3))
    assert np.array_equal(result.grid.values, result.aligned_prediction.values)


def test_prediction_returns_to_camera_frame():
    pipeline = CascadePipeline(IdentityReconstructor(8), network())
    elongated = box((3, 1, 2), (5, 7, 6))
    result = cascaded_predict(elongated, CONDITION, pipeline)
    assert not result.unaligned
    assert not np.array_equal(result.alignment.rotation, np.eye(3))
    expected = apply_alignment(result.aligned_prediction, result.alignment, inverse=True)
    assert np.array_equal(result.grid.values, expected.values)


def test_pipeline_validation():
    with pytest.raises(DimensionError):
        CascadePipeline(IdentityReconstructor(16), network())
    with pytest.raises(ParameterError):
        CascadePipeline(IdentityReconstructor(8), network(), threshold=1.0)
    with pytest.raises(ConfigError):
        NetworkReconstructor(network(4))
    pipeline = CascadePipeline(IdentityReconstructor(8), network())
    with pytest.raises(DimensionError):
        cascaded_predict(VoxelGrid.empty(16), CONDITION, pipeline)


def test_empty_partial_is_low_confidence(caplog):
    reconstructor = NetworkReconstructor(network(0))
    with caplog.at_level(logging.WARNING):
        result = reconstructor.reconstruct(VoxelGrid.empty(8))
    assert result.low_confidence
    assert result.grid.resolution == 8
    assert "low-confidence" in caplog.text


def test_aligned_arrays_move_targets_with_inputs():
    elongated = box((3, 1, 2), (5, 7, 6)).values
    arrays = RecordArrays(elongated[None].copy(), elongated[None].copy(),
                          np.array([CONDITION], dtype=np.float32), [None], [0])
    aligned = aligned_arrays(IdentityReconstructor(8), arrays)
    assert np.array_equal(aligned.inputs, aligned.targets)
    coords = np.argwhere(aligned.inputs[0] > 0.5)
    extents = coords.max(axis=0) - coords.min(axis=0) + 1
    assert tuple(extents) == (6, 4, 2)


def test_evaluate_pipeline_scores_every_record():
    grid = box((2, 2, 0), (6, 6, 4)).values
    arrays = RecordArrays(np.stack([grid, grid]), np.stack([grid, grid]),
                          np.array([CONDITION, CONDITION], dtype=np.float32), [None, None], [4, 9])
    pipeline = CascadePipeline(IdentityReconstructor(8), network())
    result = evaluate_pipeline(pipeline, arrays)
    assert result.indices == [4, 9]
    assert len(result.per_record) == 2
    assert 0.0 <= result.mean_iou <= 1.0


def test_arms_are_scored_by_one_rule():
    """Identical logs and identical networks give identical held-out scores"""
    grid = box((2, 2, 0), (6, 6, 4)).values
    held_out = RecordArrays(np.stack([grid, grid]), np.stack([grid, grid]),
                            np.array([CONDITION, CONDITION], dtype=np.float32), [None, None], [0, 1])
    deformer = network()
    log = MetricLog([MetricRow(1, 0, 0, 0, 0, 0.99, 0)])
    direct = ArmResult("direct", 1, log.final_iou(), 0.99, None, log)
    cascaded = ArmResult("cascaded", 1, log.final_iou(), 0.99, None, log, boundary=1)
    pipeline = CascadePipeline(IdentityReconstructor(8), deformer, align=False)
    score_held_out([(direct, direct_pipeline(deformer)), (cascaded, pipeline)], held_out)
    assert direct.final_iou == cascaded.final_iou
    assert direct.final_iou == evaluate_pipeline(pipeline, held_out).mean_iou

    with pytest.raises(EvaluationError):
        score_held_out([(direct, pipeline)], held_out.subset([]))


def test_concat_curves():
    first = MetricLog([MetricRow(i, 0, 0, 0, 0, 0.1 * i, 0) for i in (1, 2)])
    second = MetricLog([MetricRow(i, 0, 0, 0, 0, 0.5, 0) for i in (1, 2, 3)])
    log, boundary = concat_curves(first, second)
    assert boundary == 2
    assert log.iterations() == [1, 2, 3, 4, 5]


def test_pipeline_bundle_round_trip(tmp_path):
    pipeline = CascadePipeline(NetworkReconstructor(network(0, seed=1)), network(4, seed=2),
                               metadata={"encoding_mode": "real"})
    save_pipeline(pipeline, tmp_path)
    restored = load_pipeline(tmp_path)
    assert isinstance(restored.reconstructor, NetworkReconstructor)
    assert restored.metadata == {"encoding_mode": "real"}
    partial = box((2, 2, 0), (6, 3, 4))
    a = cascaded_predict(partial, CONDITION, pipeline)
    b = cascaded_predict(partial, CONDITION, restored)
    assert np.array_equal(a.grid.values, b.grid.values)

    bypass = CascadePipeline(IdentityReconstructor(8), network())
    save_pipeline(bypass, tmp_path / "bypass")
    assert isinstance(load_pipeline(tmp_path / "bypass").reconstructor, IdentityReconstructor)
    with pytest.raises(ConfigError):
        load_pipeline(tmp_path / "missing")


def test_training_entry_points_check_dataset_mode():
    config, train_config = NetworkConfig(8), TrainConfig(max_iterations=1)
    with pytest.raises(ConfigError):
        train_reconstructor(DatasetManifest(SamplingPlan(), FULL3D, 8, 0.01, 0), config, train_config)
    with pytest.raises(ConfigError):
        train_direct_partial(DatasetManifest(SamplingPlan(), RECONSTRUCTION, 8, 0.01, 0), config, train_config)


def test_two_phase_cascade_training(tmp_path):
    plan = SamplingPlan(e_count=1, nu_count=1, nu_fixed=0.3, force_count=2, location_count=1,
                        rotations_per_axis=2)
    objects = [ObjectSpec("block")]
    reconstruction = generate_dataset(plan, objects, RECONSTRUCTION, tmp_path / "recon", resolution=8)
    partial = generate_dataset(plan, objects, PARTIAL, tmp_path / "partial", resolution=8)
    scale = ExperimentScale(resolution=8, iterations=2, eval_interval=1, base_channels=2, batch_size=2)
    pipeline, log, boundary = train_cascade(reconstruction, partial, scale, seed=1, out_dir=tmp_path / "run")
    assert boundary == 1
    assert log.iterations() == [1, 2]
    assert pipeline.reconstructor.model.config.condition_length == 0
    assert pipeline.deformer.config.condition_length == 4
    assert (tmp_path / "run" / "pipeline" / "pipeline.json").exists()
    restored = load_pipeline(tmp_path / "run" / "pipeline")
    assert restored.resolution == 8


def main():
    print("🧪 Cascade Pipeline Test")
    print("=" * 60)
    sys.exit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()
