"""
Voxel Test Script - grids, IOU, depth camera, PCA alignment and file formats
Run with pytest, or directly: python test_voxel.py
"""

import logging
import math
import sys
from pathlib import Path

import numpy as np
import pytest

project_root = Path(__file__).parent
sys.path.insert(0, str(project_root))

from physnet3d.errors import DimensionError, FormatError, ParameterError  # noqa: E402
from physnet3d.voxel import (BINARY, GRID_MAGIC, PROBABILISTIC, CameraPose, DepthImage,  # noqa: E402
                             RigidAlignment, VoxelGrid, apply_alignment, binarize, depth_from_bytes,
                             depth_to_bytes, depth_to_partial_grid, enumerate_rotations, grid_from_bytes,
                             grid_to_bytes, iou, load_grid, pca_align, recenter, render_depth,
                             rotate_grid, save_grid, sniff_magic)


def box_grid(n, lo, hi, spacing=1.0):
    mask = np.zeros((n, n, n), dtype=bool)
    mask[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]] = True
    return VoxelGrid.from_mask(mask, spacing)


def test_grid_validation():
    """Cubic power-of-two shapes only, values in [0, 1]"""
    with pytest.raises(DimensionError):
        VoxelGrid(np.zeros((8, 8, 4)))
    with pytest.raises(DimensionError):
        VoxelGrid(np.zeros((6, 6, 6)))
    with pytest.raises(ParameterError):
        VoxelGrid(np.full((4, 4, 4), 0.5), kind=BINARY)
    with pytest.raises(ParameterError):
        VoxelGrid(np.full((4, 4, 4), 1.5), kind=PROBABILISTIC)
    grid = VoxelGrid.empty(8, spacing=0.01)
    assert grid.resolution == 8
    assert grid.occupied_count() == 0
    assert not grid.is_grounded()


def test_iou_matches_brute_force():
    """Vectorized IOU agrees with a per-cell count on random 8³ pairs"""
    rng = np.random.default_rng(7)
    p = 0.8
    for _ in range(1000):
        a = VoxelGrid(rng.random((8, 8, 8)).astype(np.float32), kind=PROBABILISTIC)
        b = VoxelGrid.from_mask(rng.random((8, 8, 8)) > 0.6)
        inter = union = 0
        for value, truth in zip(a.values.ravel(), b.values.ravel()):
            predicted = value > p
            occupied = truth == 1.0
            inter += predicted and occupied
            union += predicted or occupied
        expected = 1.0 if union == 0 else inter / union
        assert abs(iou(a, b, p) - expected) < 1e-12


def test_iou_edge_cases():
    full = box_grid(8, (2, 2, 0), (6, 6, 4))
    assert iou(full, full) == 1.0
    assert iou(VoxelGrid.empty(8), VoxelGrid.empty(8)) == 1.0
    assert iou(VoxelGrid.empty(8), full) == 0.0
    with pytest.raises(DimensionError):
        iou(full, VoxelGrid.empty(16))
    with pytest.raises(ParameterError):
        iou(full, full, 1.0)
    with pytest.raises(ParameterError):
        iou(full, full, 0.0)


def test_binarize_is_strict():
    values = np.zeros((4, 4, 4), dtype=np.float32)
    values[0, 0, 0] = 0.8
    values[1, 0, 0] = 0.81
    out = binarize(VoxelGrid(values, kind=PROBABILISTIC), 0.8)
    assert out.kind == BINARY
    assert out.values[0, 0, 0] == 0.0
    assert out.values[1, 0, 0] == 1.0


def test_enumerate_rotations_order():
    poses = enumerate_rotations(5)
    assert len(poses) == 125
    assert poses[0].is_identity
    assert poses[1].angles == pytest.approx((0.0, 0.0, 2.0 * math.pi / 5))
    assert poses[5].angles == pytest.approx((0.0, 2.0 * math.pi / 5, 0.0))
    assert len(enumerate_rotations(1)) == 1
    with pytest.raises(ParameterError):
        enumerate_rotations(0)


def test_camera_pose_range():
    with pytest.raises(ParameterError):
        CameraPose((2.0 * math.pi, 0.0, 0.0))
    pose = CameraPose.from_angles(-math.pi / 2, 0.0, 4.0 * math.pi)
    assert pose.angles[0] == pytest.approx(1.5 * math.pi)
    assert pose.angles[2] == pytest.approx(0.0)


def test_rotate_quarter_turn_about_z():
    mask = np.zeros((8, 8, 8), dtype=bool)
    mask[6, 3, 1] = True
    rotated = rotate_grid(VoxelGrid.from_mask(mask), CameraPose((0.0, 0.0, math.pi / 2)))
    assert rotated.occupied_count() == 1
    assert rotated.values[4, 6, 1] == 1.0


def test_render_depth_front_surface():
    grid = box_grid(8, (2, 3, 0), (6, 6, 4), spacing=0.01)
    depth = render_depth(grid, CameraPose())
    assert depth.width == depth.height == 8
    assert depth.depths[3, 1] == pytest.approx(0.03)
    assert math.isinf(depth.depths[0, 0])
    assert depth.hit_count() == 16


def test_partial_grid_is_visible_shell():
    grid = box_grid(16, (4, 5, 0), (12, 9, 6), spacing=0.01)
    partial = depth_to_partial_grid(render_depth(grid, CameraPose()))
    expected = np.zeros((16, 16, 16), dtype=bool)
    expected[4:12, 5, 0:6] = True
    assert np.array_equal(partial.mask(), expected)
    assert np.all(grid.mask()[partial.mask()])


def test_partial_grid_lies_inside_rotated_solid():
    """Every visible surface cell is a cell of the solid seen from that pose"""
    grid = box_grid(16, (5, 6, 4), (11, 10, 12), spacing=0.01)
    rng = np.random.default_rng(11)
    for ax, ay, az in rng.uniform(0.0, 2.0 * math.pi, size=(12, 3)):
        pose = CameraPose.from_angles(ax, ay, az)
        partial = depth_to_partial_grid(render_depth(grid, pose)).mask()
        solid = rotate_grid(grid, pose).mask()
        assert partial.any()
        assert np.all(solid[partial])


def test_partial_grid_clamps_far_depths(caplog):
    depths = np.full((4, 4), np.inf)
    depths[1, 2] = 10.0
    with caplog.at_level(logging.WARNING):
        partial = depth_to_partial_grid(DepthImage(depths, CameraPose(), 1.0))
    assert partial.values[1, 3, 2] == 1.0
    assert "clamped" in caplog.text
    with pytest.raises(DimensionError):
        depth_to_partial_grid(DepthImage(np.zeros((4, 2))))


def test_recenter_moves_box_to_center():
    grid = box_grid(16, (0, 0, 0), (4, 4, 4))
    centered, shift = recenter(grid)
    assert centered.occupied_count() == grid.occupied_count()
    assert np.array_equal(shift, [6.0, 6.0, 6.0])
    assert centered.values[6, 6, 6] == 1.0


def test_pca_align_orders_axes():
    grid = box_grid(16, (6, 4, 5), (8, 12, 9))
    aligned, alignment = pca_align(grid)
    assert not alignment.degenerate
    assert np.allclose(alignment.rotation @ alignment.rotation.T, np.eye(3))
    assert np.linalg.det(alignment.rotation) == pytest.approx(1.0)
    coords = np.argwhere(aligned.mask())
    extents = coords.max(axis=0) - coords.min(axis=0) + 1
    assert tuple(extents) == (8, 4, 2)
    restored = apply_alignment(aligned, alignment, inverse=True)
    assert np.array_equal(restored.mask(), grid.mask())


def test_pca_align_is_idempotent():
    aligned, _ = pca_align(box_grid(16, (6, 4, 5), (8, 12, 9)))
    again, alignment = pca_align(aligned)
    assert np.allclose(alignment.rotation, np.eye(3))
    assert np.array_equal(again.mask(), aligned.mask())


def test_pca_align_undoes_quarter_turn():
    grid = box_grid(16, (6, 4, 5), (8, 12, 9))
    turned = rotate_grid(grid, CameraPose((0.0, 0.0, math.pi / 2)))
    assert not np.array_equal(turned.mask(), grid.mask())
    assert turned.occupied_count() == grid.occupied_count()
    aligned, _ = pca_align(grid)
    aligned_turned, _ = pca_align(turned)
    assert np.array_equal(aligned_turned.mask(), aligned.mask())


def test_pca_align_degenerate_inputs():
    tiny = box_grid(8, (1, 1, 1), (2, 2, 4))
    same, alignment = pca_align(tiny)
    assert alignment.degenerate
    assert np.array_equal(same.values, tiny.values)

    cube = box_grid(16, (4, 4, 4), (8, 8, 8))
    _, alignment = pca_align(cube)
    assert alignment.degenerate
    assert np.allclose(alignment.rotation @ alignment.rotation.T, np.eye(3))


def test_alignment_inverse():
    rotation = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])
    a = RigidAlignment(rotation, np.array([1.0, 2.0, 3.0]))
    b = a.inverse()
    point = np.array([0.5, -2.0, 4.0])
    assert np.allclose(b.rotation @ (a.rotation @ point + a.translation) + b.translation, point)


def test_grid_file_format(tmp_path):
    mask = np.zeros((8, 8, 8), dtype=bool)
    mask[0, 0, 0] = True
    data = grid_to_bytes(VoxelGrid.from_mask(mask, 0.01))
    assert data[:4] == GRID_MAGIC
    assert len(data) == 16 + 64
    assert data[16] == 0x80

    values = np.random.default_rng(0).random((4, 4, 4)).astype(np.float32)
    probabilistic = grid_from_bytes(grid_to_bytes(VoxelGrid(values, 0.5, PROBABILISTIC)))
    assert probabilistic.kind == PROBABILISTIC
    assert np.array_equal(probabilistic.values, values)

    path = tmp_path / "shape.vxg"
    save_grid(VoxelGrid.from_mask(mask), path)
    assert sniff_magic(path) == GRID_MAGIC
    assert np.array_equal(load_grid(path).mask(), mask)


def test_grid_format_errors():
    data = grid_to_bytes(VoxelGrid.empty(8))
    with pytest.raises(FormatError):
        grid_from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        grid_from_bytes(data[:-1])
    with pytest.raises(FormatError):
        grid_from_bytes(data[:10])


def test_depth_file_format():
    depths = np.full((4, 4), np.inf)
    depths[2, 1] = 0.25
    image = DepthImage(depths, CameraPose((0.0, math.pi / 2, 0.0)), 0.05)
    restored = depth_from_bytes(depth_to_bytes(image))
    assert restored.hit_count() == 1
    assert restored.depths[2, 1] == pytest.approx(0.25)
    assert restored.camera.angles[1] == pytest.approx(math.pi / 2)
    with pytest.raises(FormatError):
        depth_from_bytes(b"VXG1" + depth_to_bytes(image)[4:])


def main():
    print("🧪 Voxel Utilities Test")
    print("=" * 60)
    sys.exit(pytest.main([__file__, "-q"]))


if __name__ == "__main__":
    main()
