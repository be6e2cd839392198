import math

import numpy as np
import pytest

from hiersplat.geometry import Intrinsics, RigidPose
from hiersplat.gaussian_map import GaussianMap
from hiersplat.scene_synth import toy_taxonomy
from hiersplat.semantic_tree import SemanticTree, TreeNode


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def toy_tree():
    return toy_taxonomy()


@pytest.fixture
def small_intrinsics():
    return Intrinsics(20.0, 20.0, 3.5, 3.5, 8, 8)


def random_pose(rng: np.random.Generator, translation_scale: float = 1.0) -> RigidPose:
    return RigidPose(rng.normal(size=4), rng.normal(size=3) * translation_scale)


def random_map(
    rng: np.random.Generator,
    count: int,
    sem_width: int = 4,
    depth_range: tuple[float, float] = (1.0, 4.0),
    spread: float = 0.6,
) -> GaussianMap:
    """Splats scattered in front of the identity camera."""
    g = GaussianMap(sem_width)
    g.mu = np.column_stack(
        [
            rng.uniform(-spread, spread, count),
            rng.uniform(-spread, spread, count),
            rng.uniform(*depth_range, count),
        ]
    )
    g.radius = rng.uniform(0.05, 0.35, count)
    g.opacity = rng.uniform(0.15, 0.85, count)
    g.color = rng.uniform(0.0, 1.0, (count, 3))
    g.sem = rng.normal(0.0, 1.0, (count, sem_width))
    g.birth_frame = np.zeros(count, dtype=np.int64)
    return g


def balanced_tree(branching: int, depth: int) -> SemanticTree:
    """Balanced `branching`-ary tree with branching**depth leaf classes."""
    levels = [[TreeNode(f"n0_{i}", None) for i in range(branching)]]
    for level in range(1, depth):
        prev = len(levels[level - 1])
        levels.append(
            [TreeNode(f"n{level}_{p}_{c}", p) for p in range(prev) for c in range(branching)]
        )
    leaf_classes = {i + 1: i for i in range(len(levels[-1]))}
    return SemanticTree(levels, leaf_classes)


def rotation_angle_deg(a: RigidPose, b: RigidPose) -> float:
    from hiersplat.geometry import quat_conjugate, quat_multiply

    dq = quat_multiply(quat_conjugate(a.quat), b.quat)
    return math.degrees(2.0 * math.acos(min(abs(dq[3]), 1.0)))
