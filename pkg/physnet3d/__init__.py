"""
Initialize physnet3d package
"""

from .errors import (PhysNetError, ParameterError, DimensionError, ShapeError, FormatError, RangeError,
                     SingularMaterialError, UngroundedError, GroundingError, SolverError, SizeError,
                     GenerationError, WeightsError, ConfigError, NonFiniteLossError, EvaluationError,
                     ExperimentError)
from .config import Settings, get_settings, setup_logging
from .voxel import (VoxelGrid, DepthImage, CameraPose, RigidAlignment, iou, binarize, enumerate_rotations,
                    render_depth, depth_to_partial_grid, pca_align, rotate_grid, apply_alignment,
                    save_grid, load_grid, save_depth, load_depth)
from .elastic import (MaterialParams, ForceSpec, HexMesh, DisplacementField, build_hex_mesh,
                      element_stiffness, solve_displacement, deform_and_revoxelize, calibrate_max_force)
from .dataset import (ConditionVector, SamplingPlan, SampleRecord, DatasetManifest, ObjectSpec,
                      encode_condition, decode_condition, sample_materials, build_primitive,
                      generate_dataset, load_manifest, load_split)
from .physnet import (NetworkConfig, LatentCode, ModelWeights, PhysNet, reparameterize, loss_ae,
                      loss_prior, loss_generator, loss_discriminator, predict, save_weights, load_weights)
from .trainer import (TrainConfig, TrainState, MetricLog, ExperimentScale, ExperimentReport, train,
                      evaluate, train_baseline_icgan, run_experiment)
from .cascade import (NetworkReconstructor, IdentityReconstructor, CascadePipeline, train_reconstructor,
                      cascaded_predict, train_direct_partial, save_pipeline, load_pipeline)

__version__ = "0.1.0"

__all__ = [
    'PhysNetError', 'ParameterError', 'DimensionError', 'ShapeError', 'FormatError', 'RangeError',
    'SingularMaterialError', 'UngroundedError', 'GroundingError', 'SolverError', 'SizeError',
    'GenerationError', 'WeightsError', 'ConfigError', 'NonFiniteLossError', 'EvaluationError',
    'ExperimentError',
    'Settings', 'get_settings', 'setup_logging',
    'VoxelGrid', 'DepthImage', 'CameraPose', 'RigidAlignment', 'iou', 'binarize', 'enumerate_rotations',
    'render_depth', 'depth_to_partial_grid', 'pca_align', 'rotate_grid', 'apply_alignment',
    'save_grid', 'load_grid', 'save_depth', 'load_depth',
    'MaterialParams', 'ForceSpec', 'HexMesh', 'DisplacementField', 'build_hex_mesh',
    'element_stiffness', 'solve_displacement', 'deform_and_revoxelize', 'calibrate_max_force',
    'ConditionVector', 'SamplingPlan', 'SampleRecord', 'DatasetManifest', 'ObjectSpec',
    'encode_condition', 'decode_condition', 'sample_materials', 'build_primitive',
    'generate_dataset', 'load_manifest', 'load_split',
    'NetworkConfig', 'LatentCode', 'ModelWeights', 'PhysNet', 'reparameterize', 'loss_ae',
    'loss_prior', 'loss_generator', 'loss_discriminator', 'predict', 'save_weights', 'load_weights',
    'TrainConfig', 'TrainState', 'MetricLog', 'ExperimentScale', 'ExperimentReport', 'train',
    'evaluate', 'train_baseline_icgan', 'run_experiment',
    'NetworkReconstructor', 'IdentityReconstructor', 'CascadePipeline', 'train_reconstructor',
    'cascaded_predict', 'train_direct_partial', 'save_pipeline', 'load_pipeline',
]
