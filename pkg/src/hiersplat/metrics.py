"""Evaluation metrics: ATE RMSE, depth L1, PSNR, SSIM, per-level mIoU."""

from __future__ import annotations

import numpy as np

from .errors import EmptyMask, LengthMismatch, LevelOutOfRange, ShapeMismatch
from .geometry import RigidPose
from .losses import ssim_index
from .semantic_tree import SemanticTree, path_of


def align_rigid(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least-squares rotation + translation mapping src points onto dst."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cov = (dst - mu_d).T @ (src - mu_s)
    U, _, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:
        S[2, 2] = -1
    R = U @ S @ Vt
    t = mu_d - R @ mu_s
    return R, t


def ate_rmse(
    estimated: list[tuple[float, RigidPose]],
    ground_truth: list[tuple[float, RigidPose]],
) -> float:
    """Aligned absolute trajectory error, RMSE of positions, centimeters."""
    if len(estimated) != len(ground_truth):
        raise LengthMismatch(f"{len(estimated)} vs {len(ground_truth)} poses")
    if not estimated:
        raise LengthMismatch("empty trajectories")
    est = np.stack([p.trans for _, p in estimated])
    gt = np.stack([p.trans for _, p in ground_truth])
    R, t = align_rigid(est, gt)
    resid = gt - (est @ R.T + t)
    return float(np.sqrt((resid**2).sum(axis=1).mean())) * 100.0


def depth_l1(rendered: np.ndarray, gt: np.ndarray, validity: np.ndarray) -> float:
    """Mean absolute depth error over valid pixels, centimeters."""
    if rendered.shape != gt.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {gt.shape}")
    if not validity.any():
        raise EmptyMask("no valid depth pixels")
    return float(np.abs(rendered[validity] - gt[validity]).mean()) * 100.0


def psnr(rendered: np.ndarray, gt: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for [0, 1] images, capped at 99."""
    if rendered.shape != gt.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {gt.shape}")
    mse = float(((rendered - gt) ** 2).mean())
    if mse < 1e-10:
        return 99.0
    return float(10.0 * np.log10(1.0 / mse))


def ssim(rendered: np.ndarray, gt: np.ndarray) -> float:
    if rendered.shape != gt.shape:
        raise ShapeMismatch(f"{rendered.shape} vs {gt.shape}")
    return ssim_index(rendered, gt)


def _level_lut(tree: SemanticTree, level: int) -> np.ndarray:
    """class id -> global node index at the level (-1 for ids not in the tree)."""
    max_id = max(tree.class_ids)
    lut = np.full(max_id + 1, -1, dtype=np.int64)
    for cid in tree.class_ids:
        nodes = tree.nodes_of_path(path_of(tree, cid))
        lut[cid] = nodes[level]
    return lut


def miou(
    pred_classes: np.ndarray,
    gt_classes: np.ndarray,
    tree: SemanticTree,
    level: int,
    include_absent: bool = False,
) -> float:
    """Mean IoU at a tree level, percent.

    Both label maps hold original class ids; they are lifted to the
    requested level through the hierarchy. Pixels whose ground-truth class
    is not in the tree are ignored. By default the mean runs over node ids
    present in the ground truth; `include_absent` averages over every node
    at the level instead.
    """
    if not (0 <= level < tree.num_levels):
        raise LevelOutOfRange(f"level {level} outside 0..{tree.depth}")
    lut = _level_lut(tree, level)
    max_id = lut.shape[0] - 1
    gt_nodes = lut[np.clip(gt_classes, 0, max_id)]
    gt_nodes[(gt_classes < 0) | (gt_classes > max_id)] = -1
    pred_nodes = lut[np.clip(pred_classes, 0, max_id)]
    pred_nodes[(pred_classes < 0) | (pred_classes > max_id)] = -1
    care = gt_nodes >= 0
    node_ids = (
        np.arange(len(tree.levels[level])) if include_absent else np.unique(gt_nodes[care])
    )
    ious = []
    for nid in node_ids:
        gt_m = care & (gt_nodes == nid)
        pr_m = care & (pred_nodes == nid)
        union = int((gt_m | pr_m).sum())
        if union == 0:
            if include_absent:
                continue  # absent everywhere: no evidence either way
            continue
        ious.append(int((gt_m & pr_m).sum()) / union)
    if not ious:
        return 0.0
    return float(np.mean(ious)) * 100.0
