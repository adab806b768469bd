"""Seeded synthetic LiDAR-like scenes: box-shaped objects plus a ground plane.

Object points lie on box surfaces (sides and top), which reproduces the
property that occupied voxels hug object surfaces while object centers stay
empty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CropRange
from .pointcloud import PointCloud
from .voting import GroundTruthBoxes


@dataclass(frozen=True)
class SceneParams:
    num_boxes: int = 8
    points_per_box: int = 1500
    ground_points: int = 20000
    ground_z: float = -1.6
    size_range: tuple = ((3.5, 1.6, 1.4), (5.0, 2.1, 1.8))
    region: tuple | None = None  # (xmin, ymin, xmax, ymax); defaults to the crop range
    margin: float = 3.0


def _box_surface_points(rng, center, size, yaw, n):
    l, w, h = size
    # face areas: +-x (w*h), +-y (l*h), top (l*w); bottom is occluded
    areas = np.array([w * h, w * h, l * h, l * h, l * w])
    face = rng.choice(5, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array([l, w, h])
    local = u.copy()
    local[face == 0, 0] = l / 2
    local[face == 1, 0] = -l / 2
    local[face == 2, 1] = w / 2
    local[face == 3, 1] = -w / 2
    local[face == 4, 2] = h / 2
    c, s = np.cos(yaw), np.sin(yaw)
    world = np.empty_like(local)
    world[:, 0] = c * local[:, 0] - s * local[:, 1]
    world[:, 1] = s * local[:, 0] + c * local[:, 1]
    world[:, 2] = local[:, 2]
    return world + center


def synthetic_scene(seed: int, crop: CropRange, params: SceneParams = SceneParams()):
    """Return ``(cloud, boxes)``; every point lies inside ``crop``."""
    rng = np.random.default_rng(seed)
    lo = np.array(crop.min_xyz)
    hi = np.array(crop.max_xyz)
    if params.region is None:
        rx0, ry0, rx1, ry1 = lo[0], lo[1], hi[0], hi[1]
    else:
        rx0, ry0, rx1, ry1 = params.region
    ground_z = min(max(params.ground_z, lo[2] + 0.05), hi[2] - 0.05)

    size_lo, size_hi = np.array(params.size_range[0]), np.array(params.size_range[1])
    centers, sizes, yaws = [], [], []
    for _ in range(params.num_boxes * 50):
        if len(centers) == params.num_boxes:
            break
        size = rng.uniform(size_lo, size_hi)
        radius = np.hypot(size[0], size[1]) / 2
        xy = rng.uniform([rx0 + params.margin, ry0 + params.margin],
                         [rx1 - params.margin, ry1 - params.margin])
        if any(np.hypot(*(xy - c[:2])) < radius + r + 0.5 for c, r in
               zip(centers, [np.hypot(s[0], s[1]) / 2 for s in sizes])):
            continue
        z = ground_z + size[2] / 2 + 0.05
        if z + size[2] / 2 >= hi[2]:
            continue
        centers.append(np.array([xy[0], xy[1], z]))
        sizes.append(size)
        yaws.append(rng.uniform(-np.pi, np.pi))
    boxes = GroundTruthBoxes(np.array(centers).reshape(-1, 3), np.array(sizes).reshape(-1, 3),
                             np.array(yaws))

    parts = [_box_surface_points(rng, c, s, y, params.points_per_box)
             for c, s, y in zip(boxes.centers, boxes.sizes, boxes.yaw)]
    ground = np.column_stack([
        rng.uniform(rx0, rx1, params.ground_points),
        rng.uniform(ry0, ry1, params.ground_points),
        ground_z + rng.normal(0, 0.02, params.ground_points),
    ])
    parts.append(ground)
    xyz = np.concatenate(parts)
    keep = np.all((xyz >= lo) & (xyz < hi), axis=1)
    xyz = xyz[keep]
    intensity = rng.uniform(0, 1, size=(xyz.shape[0], 1))
    return PointCloud(xyz, intensity), boxes
