"""End-to-end helpers: synthetic grids and the voxelize -> forward -> vote chain."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backbone import BlockStats, backbone_forward
from .config import PipelineConfig
from .pointcloud import PointCloud, voxelize
from .scenes import SceneParams, synthetic_scene
from .voting import GroundTruthBoxes, VotingReport, center_voting
from .voxel_hash import SparseVoxelGrid, build_hash
from .weights import ModelWeights


@dataclass
class PipelineResult:
    voxels: SparseVoxelGrid
    refined: SparseVoxelGrid
    merged: SparseVoxelGrid
    block_stats: list[BlockStats]
    voting: VotingReport


def run_pipeline(cloud: PointCloud, cfg: PipelineConfig, weights: ModelWeights,
                 boxes: GroundTruthBoxes | None = None, mode: str = "predicted",
                 workers: int = 1) -> PipelineResult:
    grid = voxelize(cloud, cfg.voxelization, cfg.channels)
    refined, stats = backbone_forward(grid, cfg, weights.blocks, workers)
    merged, report = center_voting(refined, cfg, weights.vote, weights.context, boxes, mode, workers)
    return PipelineResult(grid, refined, merged, stats, report)


def synthetic_grid(num_voxels: int, cfg: PipelineConfig, seed: int = 0,
                   params: SceneParams | None = None) -> SparseVoxelGrid:
    """Voxelized synthetic scene trimmed to exactly ``num_voxels`` voxels.

    Point density is chosen so the raw scene overshoots the target; a seeded
    subset of voxels is then kept (original key order preserved).
    """
    spec = cfg.voxelization
    crop = spec.crop_range
    if params is None:
        ground_cells = spec.extent[0] * spec.extent[1]
        # expected occupied cells for P uniform points is G (1 - exp(-P/G))
        frac = min(0.95, 1.3 * num_voxels / ground_cells)
        pts = int(-ground_cells * np.log1p(-frac)) + 1
        params = SceneParams(num_boxes=12, ground_points=pts)
    cloud, _ = synthetic_scene(seed, crop, params)
    grid = voxelize(cloud, spec, cfg.channels)
    if grid.num_voxels < num_voxels:
        raise ValueError(f"scene has only {grid.num_voxels} voxels, {num_voxels} requested")
    keep = np.sort(np.random.default_rng(seed).choice(grid.num_voxels, num_voxels, replace=False))
    return build_hash(grid.coords[keep], grid.features[keep], grid.extent, grid.batch,
                      grid.voxel_size, grid.origin)
