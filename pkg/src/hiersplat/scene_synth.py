"""Deterministic synthetic RGB-D-semantic sequences with an analytic oracle.

Scenes are closed rooms containing boxes and spheres. Every pixel is
ray-cast analytically (closest hit), so depth is exact to the geometry and
labels are exact class ids; this is the independent ground truth that the
splatting renderer is validated against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import Intrinsics, RigidPose, matrix_to_quat
from .semantic_tree import SemanticTree, TreeNode

_EPS = 1e-9
_LIGHT = np.array([0.33, -0.45, 0.83])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)
_AMBIENT = 0.35


@dataclass(frozen=True)
class ObjectSpec:
    shape: str  # "box" | "sphere"
    center: tuple[float, float, float]
    size: tuple[float, float, float] | float  # box half-extents or sphere radius
    color: tuple[float, float, float]
    class_id: int
    yaw: float = 0.0  # rotation about world z, radians (boxes only)


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str  # "orbit" | "lawnmower" | "static"
    target: tuple[float, float, float]
    # orbit
    center: tuple[float, float, float] = (0.0, 0.0, 0.0)
    radius: float = 1.5
    height: float = 1.5
    angle_start: float = 0.0
    angle_end: float = math.pi / 3
    # lawnmower / static
    eye: tuple[float, float, float] = (0.0, 0.0, 0.0)
    sweep: float = 1.0
    rows: int = 2


@dataclass
class SceneSpec:
    room_size: tuple[float, float, float]
    objects: list[ObjectSpec]
    trajectory: TrajectorySpec
    resolution: tuple[int, int]  # (W, H)
    frame_count: int
    seed: int = 0
    hfov_deg: float = 75.0
    wall_class: int | None = None
    floor_class: int | None = None
    ceiling_class: int | None = None
    wall_color: tuple[float, float, float] = (0.75, 0.72, 0.66)
    floor_color: tuple[float, float, float] = (0.45, 0.36, 0.28)
    ceiling_color: tuple[float, float, float] = (0.85, 0.85, 0.88)

    @property
    def room_visible(self) -> bool:
        return self.wall_class is not None


@dataclass
class OracleFrame:
    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, 0 where no hit
    labels: np.ndarray  # (H, W) int32 class ids, 0 background
    pose: RigidPose


def intrinsics_for(spec: SceneSpec) -> Intrinsics:
    W, H = spec.resolution
    fx = (W / 2.0) / math.tan(math.radians(spec.hfov_deg) / 2.0)
    return Intrinsics(fx, fx, (W - 1) / 2.0, (H - 1) / 2.0, W, H)


def look_at(eye: np.ndarray, target: np.ndarray) -> RigidPose:
    """Camera-to-world pose with +z forward, +y down, world up +z."""
    eye = np.asarray(eye, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - eye
    f = f / np.linalg.norm(f)
    up = np.array([0.0, 0.0, 1.0])
    r = np.cross(f, up)
    if np.linalg.norm(r) < 1e-9:  # looking straight up/down
        r = np.array([1.0, 0.0, 0.0])
    r = r / np.linalg.norm(r)
    d = np.cross(f, r)
    R = np.stack([r, d, f], axis=1)
    return RigidPose(matrix_to_quat(R), eye)


def trajectory_poses(spec: SceneSpec) -> list[RigidPose]:
    t = spec.trajectory
    n = spec.frame_count
    poses = []
    if t.kind == "orbit":
        for i in range(n):
            s = i / max(n - 1, 1)
            # smoothstep easing: velocity is continuous, so a constant
            # velocity predictor stays accurate along the whole arc
            s = s * s * (3.0 - 2.0 * s)
            a = t.angle_start + (t.angle_end - t.angle_start) * s
            eye = np.array(t.center) + np.array(
                [t.radius * math.cos(a), t.radius * math.sin(a), 0.0]
            )
            eye[2] = t.height
            poses.append(look_at(eye, np.array(t.target)))
    elif t.kind == "lawnmower":
        per_row = max(n // max(t.rows, 1), 1)
        for i in range(n):
            row = min(i // per_row, t.rows - 1)
            u = (i % per_row) / max(per_row - 1, 1)
            if row % 2 == 1:
                u = 1.0 - u
            eye = np.array(t.eye) + np.array([t.sweep * (u - 0.5), 0.35 * row, 0.0])
            poses.append(look_at(eye, np.array(t.target)))
    elif t.kind == "static":
        pose = look_at(np.array(t.eye), np.array(t.target))
        poses = [pose] * n
    else:
        raise ValueError(f"unknown trajectory kind {t.kind!r}")
    return poses


def _ray_dirs(K: Intrinsics, pose: RigidPose) -> np.ndarray:
    """World-space direction per pixel, scaled so t equals camera z-depth."""
    u = np.arange(K.width, dtype=np.float64)[None, :]
    v = np.arange(K.height, dtype=np.float64)[:, None]
    x = (u - K.cx) / K.fx * np.ones((K.height, 1))
    y = (v - K.cy) / K.fy * np.ones((1, K.width))
    cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    return cam @ pose.rotation_matrix().T


def _yaw_matrix(yaw: float) -> np.ndarray:
    c, s = math.cos(yaw), math.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _intersect_box(o, d, obj: ObjectSpec):
    """Slab test against an oriented box; returns (t, normal_world, hit)."""
    Rz = _yaw_matrix(obj.yaw)
    op = (o - np.asarray(obj.center)) @ Rz  # into box frame (Rz^T applied)
    dp = d @ Rz
    h = np.asarray(obj.size, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dp
    t1 = (-h - op) * inv
    t2 = (h - op) * inv
    # where the ray is parallel to a slab, it hits iff the origin is inside it
    parallel = np.abs(dp) < 1e-12
    inside = np.abs(op) <= h
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), np.maximum(t1, t2))
    tmin = lo.max(axis=-1)
    tmax = hi.min(axis=-1)
    hit = (tmax >= tmin) & (tmax > _EPS)
    t = np.where(tmin > _EPS, tmin, tmax)
    axis_near = np.argmax(lo, axis=-1)
    axis_far = np.argmin(hi, axis=-1)
    axis = np.where(tmin > _EPS, axis_near, axis_far)
    sign = -np.sign(np.take_along_axis(dp, axis[..., None], axis=-1)[..., 0])
    n_box = np.zeros(d.shape)
    np.put_along_axis(n_box, axis[..., None], sign[..., None], axis=-1)
    normal = n_box @ Rz.T
    return np.where(hit, t, np.inf), normal, hit


def _intersect_sphere(o, d, obj: ObjectSpec):
    c = np.asarray(obj.center)
    r = float(obj.size) if np.isscalar(obj.size) else float(obj.size[0])
    oc = o - c
    a = (d * d).sum(axis=-1)
    b = 2.0 * (d * oc).sum(axis=-1)
    c0 = (oc * oc).sum() - r * r
    disc = b * b - 4 * a * c0
    hit = disc > 0
    sq = np.sqrt(np.where(hit, disc, 0.0))
    t_near = (-b - sq) / (2 * a)
    t_far = (-b + sq) / (2 * a)
    t = np.where(t_near > _EPS, t_near, t_far)
    hit = hit & (t > _EPS)
    point = o + t[..., None] * d
    normal = (point - c) / r
    return np.where(hit, t, np.inf), normal, hit


def _intersect_room(o, d, spec: SceneSpec):
    """Exit point of rays from inside the room box; normals point inward."""
    size = np.asarray(spec.room_size, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    t_exit = np.where(d > 1e-12, (size - o) * inv, np.where(d < -1e-12, (0.0 - o) * inv, np.inf))
    axis = np.argmin(t_exit, axis=-1)
    t = np.take_along_axis(t_exit, axis[..., None], axis=-1)[..., 0]
    sign = np.sign(np.take_along_axis(d, axis[..., None], axis=-1)[..., 0])
    normal = np.zeros(d.shape)
    np.put_along_axis(normal, axis[..., None], -sign[..., None], axis=-1)
    hit = np.isfinite(t) & (t > _EPS)
    return np.where(hit, t, np.inf), normal, axis, sign, hit


def _shade(albedo: np.ndarray, normal: np.ndarray) -> np.ndarray:
    lam = np.clip((normal * _LIGHT).sum(axis=-1), 0.0, 1.0)
    return np.clip(albedo * (_AMBIENT + (1 - _AMBIENT) * lam)[..., None], 0.0, 1.0)


def render_oracle_frame(spec: SceneSpec, K: Intrinsics, pose: RigidPose) -> OracleFrame:
    H, W = K.height, K.width
    o = pose.trans
    d = _ray_dirs(K, pose)
    best_t = np.full((H, W), np.inf)
    color = np.zeros((H, W, 3))
    labels = np.zeros((H, W), dtype=np.int32)
    normal = np.zeros((H, W, 3))

    if spec.room_visible:
        t, n, axis, sign, hit = _intersect_room(o, d, spec)
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
        normal[closer] = n[closer]
        floor = closer & (axis == 2) & (sign < 0)
        ceiling = closer & (axis == 2) & (sign > 0)
        wall = closer & (axis != 2)
        labels[floor] = spec.floor_class
        labels[ceiling] = spec.ceiling_class
        labels[wall] = spec.wall_class
        color[floor] = spec.floor_color
        color[ceiling] = spec.ceiling_color
        color[wall] = spec.wall_color

    for obj in spec.objects:
        if obj.shape == "box":
            t, n, hit = _intersect_box(o, d, obj)
        elif obj.shape == "sphere":
            t, n, hit = _intersect_sphere(o, d, obj)
        else:
            raise ValueError(f"unknown shape {obj.shape!r}")
        closer = hit & (t < best_t)
        best_t = np.where(closer, t, best_t)
        normal[closer] = n[closer]
        labels[closer] = obj.class_id
        color[closer] = obj.color

    hit_any = np.isfinite(best_t)
    shaded = _shade(color, normal)
    shaded[~hit_any] = 0.0
    labels[~hit_any] = 0
    depth = np.where(hit_any, best_t, 0.0)
    return OracleFrame(shaded, depth, labels, pose)


def generate(spec: SceneSpec) -> tuple[list[OracleFrame], SemanticTree]:
    """Ray-cast the whole sequence; also returns the toy class hierarchy."""
    K = intrinsics_for(spec)
    frames = [render_oracle_frame(spec, K, pose) for pose in trajectory_poses(spec)]
    return frames, toy_taxonomy()


# -- the toy taxonomy ---------------------------------------------------------

TOY_CLASSES = {
    1: "wall",
    2: "floor",
    3: "ceiling",
    4: "rug",
    5: "door",
    6: "window",
    7: "shelf",
    8: "lamp",
    9: "cushion",
    10: "ball",
    11: "plant",
    12: "cloth",
    13: "crate",
    14: "table",
    15: "vase",
    16: "screen",
}


def toy_taxonomy() -> SemanticTree:
    """16 classes over 3 levels; fixture hierarchy for synthetic scenes."""
    level0 = [TreeNode("Structures", None), TreeNode("Furnishings", None)]
    level1 = [
        TreeNode("BuiltSurfaces", 0),
        TreeNode("Fixtures", 0),
        TreeNode("SoftItems", 1),
        TreeNode("HardItems", 1),
    ]
    groups = {
        0: ["wall", "floor", "ceiling", "rug"],
        1: ["door", "window", "shelf", "lamp"],
        2: ["cushion", "ball", "plant", "cloth"],
        3: ["crate", "table", "vase", "screen"],
    }
    name_to_id = {v: k for k, v in TOY_CLASSES.items()}
    leaves, leaf_classes = [], {}
    for parent, names in groups.items():
        for name in names:
            leaf_classes[name_to_id[name]] = len(leaves)
            leaves.append(TreeNode(name, parent))
    return SemanticTree([level0, level1, leaves], leaf_classes)


def default_scene(
    frame_count: int = 50,
    resolution: tuple[int, int] = (64, 64),
    trajectory_kind: str = "orbit",
    seed: int = 0,
) -> SceneSpec:
    """A furnished room exercising all 16 toy classes.

    The camera orbits close to a furniture cluster looking slightly down,
    which keeps depths in the 0.8-4 m band where the splat footprint
    resolves geometry well at small image sizes.
    """
    objects = [
        ObjectSpec("box", (2.3, 2.9, 0.02), (0.85, 0.7, 0.02), (0.75, 0.15, 0.12), 4),
        ObjectSpec("box", (4.465, 1.9, 1.0), (0.035, 0.5, 1.0), (0.5, 0.3, 0.14), 5),
        ObjectSpec("box", (2.9, 4.46, 1.45), (0.6, 0.04, 0.5), (0.35, 0.75, 0.95), 6),
        ObjectSpec("box", (4.2, 2.9, 0.85), (0.26, 0.5, 0.85), (0.4, 0.26, 0.16), 7),
        ObjectSpec("sphere", (3.3, 4.1, 1.9), 0.19, (0.95, 0.85, 0.35), 8),
        ObjectSpec("sphere", (2.9, 2.25, 0.4), 0.23, (0.2, 0.55, 0.85), 9),
        ObjectSpec("sphere", (2.0, 3.65, 0.26), 0.26, (0.9, 0.45, 0.1), 10),
        ObjectSpec("sphere", (3.5, 3.7, 0.55), 0.34, (0.15, 0.6, 0.2), 11),
        ObjectSpec("box", (2.15, 3.6, 0.5), (0.28, 0.24, 0.05), (0.85, 0.3, 0.55), 12, yaw=0.4),
        ObjectSpec("box", (2.2, 2.35, 0.3), (0.3, 0.3, 0.3), (0.55, 0.35, 0.2), 13, yaw=0.25),
        ObjectSpec("box", (2.65, 3.15, 0.36), (0.5, 0.4, 0.36), (0.35, 0.22, 0.14), 14),
        ObjectSpec("sphere", (2.7, 3.1, 0.88), 0.16, (0.3, 0.75, 0.75), 15),
        ObjectSpec("box", (2.35, 4.2, 1.05), (0.45, 0.05, 0.3), (0.12, 0.12, 0.16), 16, yaw=-0.15),
    ]
    trajectory = TrajectorySpec(
        kind=trajectory_kind,
        target=(2.5, 3.1, 0.55),
        center=(2.25, 2.8, 0.0),
        radius=1.35,
        height=1.8,
        angle_start=math.radians(205.0),
        angle_end=math.radians(245.0),
        eye=(1.9, 1.5, 1.5),
        sweep=1.0,
        rows=2,
    )
    return SceneSpec(
        room_size=(4.5, 4.5, 2.6),
        objects=objects,
        trajectory=trajectory,
        resolution=resolution,
        frame_count=frame_count,
        seed=seed,
        hfov_deg=45.0,
        wall_class=1,
        floor_class=2,
        ceiling_class=3,
    )
