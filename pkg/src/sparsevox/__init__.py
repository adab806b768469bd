"""Sparse voxel transformer engine with dense reference oracles."""

from .attention import BevMap, attend_window, pillar_compress, scale_aware_attention
from .backbone import BlockStats, backbone_forward, mssvt_block_forward
from .config import CropRange, PipelineConfig, VoteConfig, VoxelizationSpec, load_config, preset, save_config
from .errors import (ConfigError, DimensionError, DuplicateVoxelError, FormatError, NumericError,
                     OutOfRangeError, ParseError, SparseVoxError)
from .pointcloud import PointCloud, crop_points, load_points, voxelize
from .sampling import (ChessboardSpec, balanced_multiwindow_sample, farthest_point_sample,
                       knn_interpolate, sample_queries_cbs)
from .voting import (GroundTruthBoxes, assign_targets, center_voting, focal_objectness_loss,
                     vote_forward, vote_loss)
from .voxel_hash import SparseVoxelGrid, build_hash, load_grid, lookup, lookup_many, save_grid
from .weights import ModelWeights, init_weights, load_weights, save_weights
from .windowing import WindowSet, gather_window_voxels, partition_query_windows

__version__ = "0.1.0"
