"""Center voting: shift surface voxels toward object centers and fill the centers in.

Stages: per-seed offset and objectness MLPs, re-voxelization of the vote
points, context attention with keys from the refined grid, and merging the
enriched vote voxels back into the grid.

Offsets and positions are in voxel units using the cell convention, so the
center of voxel ``i`` is ``i + 0.5``.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass

import numpy as np

from .backbone import attend_query_windows
from .config import PipelineConfig
from .errors import NumericError, ParseError
from .voxel_hash import SparseVoxelGrid, build_hash, flatten_keys, lookup_many
from .weights import BlockWeights, VoteModuleWeights
from .windowing import partition_query_windows

PROB_CLAMP = 1e-7


class NoForegroundWarning(UserWarning):
    """A vote loss was requested for a scene without foreground voxels."""


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _mlp(f, w1, b1, w2, b2):
    pre = f @ np.asarray(w1, np.float64) + b1
    hid = np.maximum(pre, 0.0)
    return pre, hid, hid @ np.asarray(w2, np.float64) + b2


def vote_forward(f, w: VoteModuleWeights):
    """Offsets (N, 3) and objectness probabilities (N,) for seed features (N, C).

    A single feature vector gives a (3,) offset and a scalar probability.
    """
    f = np.asarray(f, dtype=np.float64)
    single = f.ndim == 1
    f2 = f.reshape(1, -1) if single else f
    if not np.isfinite(f2).all():
        raise NumericError("non-finite seed feature")
    _, _, dx = _mlp(f2, w.off_w1, w.off_b1, w.off_w2, w.off_b2)
    _, _, logit = _mlp(f2, w.obj_w1, w.obj_b1, w.obj_w2, w.obj_b2)
    p = sigmoid(logit[:, 0])
    if single:
        return dx[0], float(p[0])
    return dx, p


def vote_loss(dx, dx_target, fg) -> float:
    """Mean L2 offset error over foreground seeds; 0 (with a warning) without any."""
    dx = np.asarray(dx, dtype=np.float64)
    err = np.linalg.norm(dx - np.asarray(dx_target, dtype=np.float64), axis=1)
    fg = np.asarray(fg, dtype=bool)
    n_fg = int(fg.sum())
    if n_fg == 0:
        warnings.warn("no foreground seeds; vote loss defined as 0", NoForegroundWarning, stacklevel=2)
        return 0.0
    return float(err[fg].sum() / n_fg)


def vote_loss_grad(dx, dx_target, fg) -> np.ndarray:
    diff = np.asarray(dx, dtype=np.float64) - np.asarray(dx_target, dtype=np.float64)
    fg = np.asarray(fg, dtype=bool)
    grad = np.zeros_like(diff)
    n_fg = int(fg.sum())
    if n_fg == 0:
        return grad
    norm = np.linalg.norm(diff, axis=1)
    ok = fg & (norm > 0)
    grad[ok] = diff[ok] / norm[ok, None] / n_fg
    return grad


def _focal_parts(p, labels, alpha):
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1 - PROB_CLAMP)
    pos = np.asarray(labels).astype(bool)
    p_t = np.where(pos, p, 1 - p)
    a_t = np.where(pos, alpha, 1 - alpha)
    return p, pos, p_t, a_t


def focal_objectness_loss(p, labels, alpha: float = 0.25, gamma: float = 2.0) -> float:
    """Mean focal loss ``-a_t (1 - p_t)^gamma log(p_t)``."""
    _, _, p_t, a_t = _focal_parts(p, labels, alpha)
    return float(np.mean(-a_t * (1 - p_t) ** gamma * np.log(p_t)))


def focal_loss_grad(p, labels, alpha: float = 0.25, gamma: float = 2.0) -> np.ndarray:
    """d(mean focal loss)/dp; zero where ``p`` sits in the clamped region."""
    raw = np.asarray(p, dtype=np.float64)
    p, pos, p_t, a_t = _focal_parts(raw, labels, alpha)
    d_pt = a_t * (gamma * (1 - p_t) ** (gamma - 1) * np.log(p_t) - (1 - p_t) ** gamma / p_t)
    grad = np.where(pos, d_pt, -d_pt) / p.size
    inside = (raw > PROB_CLAMP) & (raw < 1 - PROB_CLAMP)
    return np.where(inside, grad, 0.0)


def vote_mlp_backward(f, w: VoteModuleWeights, grad_offset, grad_prob) -> dict[str, np.ndarray]:
    """Backpropagate upstream gradients through both MLPs.

    Args:
        f: (N, C) seed features.
        grad_offset: dL/d(offset), (N, 3).
        grad_prob: dL/d(probability), (N,).

    Returns:
        Gradient per parameter name of ``w`` plus ``"f"`` for the features.
    """
    f = np.asarray(f, dtype=np.float64)
    g_off = np.asarray(grad_offset, dtype=np.float64)
    g_p = np.asarray(grad_prob, dtype=np.float64)
    grads = {}

    pre, hid, _ = _mlp(f, w.off_w1, w.off_b1, w.off_w2, w.off_b2)
    grads["off_w2"] = hid.T @ g_off
    grads["off_b2"] = g_off.sum(axis=0)
    d_pre = (g_off @ np.asarray(w.off_w2, np.float64).T) * (pre > 0)
    grads["off_w1"] = f.T @ d_pre
    grads["off_b1"] = d_pre.sum(axis=0)
    g_f = d_pre @ np.asarray(w.off_w1, np.float64).T

    pre, hid, logit = _mlp(f, w.obj_w1, w.obj_b1, w.obj_w2, w.obj_b2)
    p = sigmoid(logit[:, 0])
    d_logit = (g_p * p * (1 - p))[:, None]
    grads["obj_w2"] = hid.T @ d_logit
    grads["obj_b2"] = d_logit.sum(axis=0)
    d_pre = (d_logit @ np.asarray(w.obj_w2, np.float64).T) * (pre > 0)
    grads["obj_w1"] = f.T @ d_pre
    grads["obj_b1"] = d_pre.sum(axis=0)
    grads["f"] = g_f + d_pre @ np.asarray(w.obj_w1, np.float64).T
    return grads


def vote_objective(f, w: VoteModuleWeights, dx_target, fg, alpha=0.25, gamma=2.0) -> float:
    """Offset regression loss plus focal objectness loss with foreground as label."""
    dx, p = vote_forward(f, w)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NoForegroundWarning)
        reg = vote_loss(dx, dx_target, fg)
    return reg + focal_objectness_loss(p, fg, alpha, gamma)


def vote_objective_grads(f, w: VoteModuleWeights, dx_target, fg, alpha=0.25, gamma=2.0):
    dx, p = vote_forward(f, w)
    return vote_mlp_backward(f, w, vote_loss_grad(dx, dx_target, fg),
                             focal_loss_grad(p, fg, alpha, gamma))


@dataclass
class GroundTruthBoxes:
    """Upright boxes rotated by ``yaw`` about the vertical axis, metric units."""

    centers: np.ndarray  # (B, 3)
    sizes: np.ndarray  # (B, 3) length, width, height
    yaw: np.ndarray  # (B,)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.sizes = np.asarray(self.sizes, dtype=np.float64).reshape(-1, 3)
        self.yaw = np.asarray(self.yaw, dtype=np.float64).reshape(-1)
        if not (self.centers.shape[0] == self.sizes.shape[0] == self.yaw.shape[0]):
            raise ValueError("box arrays disagree in length")
        if (self.sizes <= 0).any():
            raise ValueError("box sizes must be positive")

    def __len__(self) -> int:
        return self.centers.shape[0]

    def contains(self, points) -> np.ndarray:
        """(P, B) mask of points inside each box, boundary included."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        d = pts[:, None, :] - self.centers[None, :, :]
        cos, sin = np.cos(self.yaw), np.sin(self.yaw)
        along = cos * d[..., 0] + sin * d[..., 1]
        across = -sin * d[..., 0] + cos * d[..., 1]
        half = self.sizes / 2
        return ((np.abs(along) <= half[:, 0]) & (np.abs(across) <= half[:, 1])
                & (np.abs(d[..., 2]) <= half[:, 2]))


def load_boxes_csv(path) -> GroundTruthBoxes:
    """Read boxes from CSV with header ``cx,cy,cz,l,w,h,yaw``."""
    cols = ["cx", "cy", "cz", "l", "w", "h", "yaw"]
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [c.strip() for c in reader.fieldnames] != cols:
            raise ParseError(f"{path}: header must be {','.join(cols)}", row=1)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            try:
                rows.append([float(row[c]) for c in cols])
            except (TypeError, ValueError):
                raise ParseError(f"{path}: bad box record", row=lineno) from None
    arr = np.asarray(rows, dtype=np.float64).reshape(-1, 7)
    return GroundTruthBoxes(arr[:, :3], arr[:, 3:6], arr[:, 6])


def save_boxes_csv(boxes: GroundTruthBoxes, path) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["cx", "cy", "cz", "l", "w", "h", "yaw"])
        for c, s, y in zip(boxes.centers, boxes.sizes, boxes.yaw):
            out.writerow([*map(repr, map(float, c)), *map(repr, map(float, s)), repr(float(y))])


def assign_targets(coords, voxel_size, origin, boxes: GroundTruthBoxes):
    """Foreground mask and center offsets (voxel units) for voxel coords.

    A voxel is foreground when its center lies inside a box; when several
    boxes contain it, the smallest box by volume wins. Background offsets
    are zero.
    """
    coords = np.asarray(coords, dtype=np.int64).reshape(-1, 3)
    vs = np.asarray(voxel_size, dtype=np.float64)
    org = np.asarray(origin, dtype=np.float64)
    n = coords.shape[0]
    fg = np.zeros(n, dtype=bool)
    target = np.zeros((n, 3), dtype=np.float64)
    if n == 0 or len(boxes) == 0:
        return fg, target
    centers_m = org + (coords + 0.5) * vs
    order = np.argsort(np.prod(boxes.sizes, axis=1), kind="stable")
    inside = boxes.contains(centers_m)[:, order]
    fg = inside.any(axis=1)
    owner = order[np.argmax(inside, axis=1)]
    box_vox = (boxes.centers - org) / vs
    target[fg] = box_vox[owner[fg]] - (coords[fg] + 0.5)
    return fg, target


@dataclass
class VoteSet:
    positions: np.ndarray  # (V, 3) float64 voxel units
    features: np.ndarray  # (V, C)
    source: np.ndarray  # (V,) seed voxel index

    def __len__(self) -> int:
        return self.positions.shape[0]


def generate_votes(refined: SparseVoxelGrid, w: VoteModuleWeights | None = None,
                   threshold: float = 0.5, fg_mask=None, offsets=None) -> VoteSet:
    """One vote per retained seed at ``center + offset`` carrying the seed feature.

    Seeds are retained by ``fg_mask`` when given, otherwise by predicted
    objectness ``p >= threshold``. ``offsets`` overrides the predicted offsets
    (ground-truth evaluation).
    """
    n = refined.num_voxels
    pred_dx = p = None
    if w is not None and n:
        pred_dx, p = vote_forward(refined.features, w)
    if fg_mask is not None:
        keep = np.asarray(fg_mask, dtype=bool)
    elif p is not None:
        keep = p >= threshold
    else:
        keep = np.zeros(n, dtype=bool)
    if offsets is None:
        if pred_dx is None and keep.any():
            raise ValueError("need vote weights or explicit offsets")
        offsets = pred_dx if pred_dx is not None else np.zeros((n, 3))
    src = np.flatnonzero(keep)
    pos = refined.coords[src] + 0.5 + np.asarray(offsets, dtype=np.float64)[src]
    return VoteSet(pos, refined.features[src], src)


def revoxelize_votes(votes: VoteSet, like: SparseVoxelGrid) -> tuple[SparseVoxelGrid, int]:
    """Mean-pool vote features into voxels of ``like``'s geometry.

    Votes outside the extent are clamped to the border voxel; the count of
    clamped votes is returned alongside the grid.
    """
    c = like.channels
    if len(votes) == 0:
        return build_hash(np.zeros((0, 3), np.int64), np.zeros((0, c), np.float32), like.extent,
                          like.batch, like.voxel_size, like.origin), 0
    raw = np.floor(votes.positions).astype(np.int64)
    vox = np.clip(raw, 0, np.asarray(like.extent) - 1)
    clamped = int(np.any(vox != raw, axis=1).sum())
    keys = flatten_keys(vox, like.extent, like.batch)
    uniq, first, inverse, counts = np.unique(keys, return_index=True, return_inverse=True,
                                             return_counts=True)
    sums = np.zeros((uniq.size, c))
    np.add.at(sums, inverse, np.asarray(votes.features, dtype=np.float64))
    feats = (sums / counts[:, None]).astype(np.float32)
    grid = build_hash(vox[first], feats, like.extent, like.batch, like.voxel_size, like.origin)
    return grid, clamped


def context_aggregate(votes_grid: SparseVoxelGrid, refined: SparseVoxelGrid,
                      cfg: PipelineConfig, w: BlockWeights, workers: int = 1) -> SparseVoxelGrid:
    """Enrich vote voxels with attention over keys sampled from the refined grid.

    Every vote voxel is a query (no chessboard sampling).
    """
    if votes_grid.num_voxels == 0:
        return votes_grid
    windows = partition_query_windows(votes_grid, cfg.query_window)
    everyone = np.ones(votes_grid.num_voxels, dtype=bool)
    idx, feats, _, _, _ = attend_query_windows(votes_grid, windows, everyone, refined, cfg, w,
                                               None, workers)
    out = votes_grid.features.copy()
    out[idx] = feats
    return votes_grid.with_features(out)


@dataclass
class MergeReport:
    inserted: int
    replaced: int


def merge_voxels(enriched: SparseVoxelGrid, refined: SparseVoxelGrid, rule: str = "replace"):
    """Write vote voxels into the refined grid.

    Empty sites get a new voxel; occupied sites are replaced by the vote
    feature (``rule="replace"``) or averaged with it (``rule="mean"``).
    Existing voxels keep their position and order; new ones are appended.
    """
    if rule not in ("replace", "mean"):
        raise ValueError(f"unknown merge rule {rule!r}")
    if enriched.num_voxels == 0:
        return refined.with_features(refined.features.copy()), MergeReport(0, 0)
    hit = lookup_many(refined, enriched.coords)
    occupied = hit >= 0
    feats = refined.features.copy()
    if rule == "replace":
        feats[hit[occupied]] = enriched.features[occupied]
    else:
        feats[hit[occupied]] = (0.5 * (feats[hit[occupied]].astype(np.float64)
                                       + enriched.features[occupied])).astype(np.float32)
    coords = np.concatenate([refined.coords, enriched.coords[~occupied]])
    feats = np.concatenate([feats, enriched.features[~occupied]])
    merged = build_hash(coords, feats, refined.extent, refined.batch, refined.voxel_size,
                        refined.origin)
    return merged, MergeReport(int((~occupied).sum()), int(occupied.sum()))


@dataclass
class VotingReport:
    num_votes: int
    num_vote_voxels: int
    clamped: int
    merge: MergeReport


def center_voting(refined: SparseVoxelGrid, cfg: PipelineConfig, vote_w: VoteModuleWeights,
                  context_w: BlockWeights, boxes: GroundTruthBoxes | None = None,
                  mode: str = "predicted", workers: int = 1):
    """Vote, re-voxelize, enrich and merge.

    ``mode="oracle"`` uses ground-truth foreground and offsets from ``boxes``;
    ``mode="predicted"`` uses the vote MLPs and the objectness threshold.
    """
    if mode == "oracle":
        if boxes is None:
            raise ValueError("oracle mode needs ground-truth boxes")
        if refined.voxel_size is None or refined.origin is None:
            raise ValueError("oracle mode needs a grid with known voxel size and origin")
        fg, target = assign_targets(refined.coords, refined.voxel_size, refined.origin, boxes)
        votes = generate_votes(refined, None, fg_mask=fg, offsets=target)
    elif mode == "predicted":
        votes = generate_votes(refined, vote_w, cfg.vote.threshold)
    else:
        raise ValueError(f"unknown voting mode {mode!r}")
    s, clamped = revoxelize_votes(votes, refined)
    s2 = context_aggregate(s, refined, cfg, context_w, workers)
    merged, rep = merge_voxels(s2, refined, cfg.vote.merge)
    return merged, VotingReport(len(votes), s.num_voxels, clamped, rep)
