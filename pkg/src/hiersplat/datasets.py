"""On-disk frame sequence format and trajectory I/O.

Dataset directory: `manifest.json`, `color/NNNNNN.png` (8-bit RGB),
`depth/NNNNNN.png` (16-bit, value * depth_scale = meters, 0 = invalid),
`sem/NNNNNN.png` (16-bit class ids), optional `prior/NNNNNN.png`,
optional `gt_traj.txt` in `timestamp tx ty tz qx qy qz qw` line format.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import CorruptImage, MissingFile, ParseError
from .geometry import Intrinsics, RigidPose


@dataclass
class Frame:
    index: int
    color: np.ndarray  # (H, W, 3) float in [0, 1]
    depth: np.ndarray | None  # (H, W) float meters, 0 invalid
    labels: np.ndarray | None  # (H, W) int32 class ids

    @property
    def valid_depth(self) -> np.ndarray:
        if self.depth is None:
            return np.zeros(self.color.shape[:2], dtype=bool)
        return self.depth > 0


@dataclass
class DatasetManifest:
    root: Path
    intrinsics: Intrinsics
    frame_count: int
    depth_scale: float
    paths: dict[str, str]
    gt_trajectory: str | None = None

    def subdir(self, kind: str) -> Path | None:
        rel = self.paths.get(kind)
        return self.root / rel if rel else None

    def frame_path(self, kind: str, index: int) -> Path:
        sub = self.subdir(kind)
        if sub is None:
            raise MissingFile(f"dataset has no {kind} stream")
        return sub / f"{index:06d}.png"


def write_manifest(manifest: DatasetManifest):
    doc = {
        "intrinsics": manifest.intrinsics.to_dict(),
        "frame_count": manifest.frame_count,
        "depth_scale": manifest.depth_scale,
        "paths": manifest.paths,
    }
    if manifest.gt_trajectory:
        doc["gt_trajectory"] = manifest.gt_trajectory
    (manifest.root / "manifest.json").write_text(json.dumps(doc, indent=2) + "\n", "utf-8")


def load_manifest(root: str | Path) -> DatasetManifest:
    root = Path(root)
    path = root / "manifest.json"
    if not path.exists():
        raise MissingFile(f"no manifest.json under {root}")
    doc = json.loads(path.read_text("utf-8"))
    if doc["depth_scale"] <= 0:
        raise ParseError("depth_scale must be positive")
    return DatasetManifest(
        root=root,
        intrinsics=Intrinsics.from_dict(doc["intrinsics"]),
        frame_count=int(doc["frame_count"]),
        depth_scale=float(doc["depth_scale"]),
        paths=dict(doc["paths"]),
        gt_trajectory=doc.get("gt_trajectory"),
    )


def _read_png(path: Path) -> np.ndarray:
    if not path.exists():
        raise MissingFile(str(path))
    try:
        return np.asarray(Image.open(path))
    except Exception as exc:  # pillow raises several types for bad files
        raise CorruptImage(f"{path}: {exc}") from exc


def load_frame(manifest: DatasetManifest, index: int) -> Frame:
    if not (0 <= index < manifest.frame_count):
        raise MissingFile(f"frame {index} outside 0..{manifest.frame_count - 1}")
    color = _read_png(manifest.frame_path("color", index)).astype(np.float64) / 255.0
    depth = None
    if manifest.subdir("depth") is not None:
        raw = _read_png(manifest.frame_path("depth", index)).astype(np.float64)
        depth = raw * manifest.depth_scale
    labels = None
    if manifest.subdir("sem") is not None:
        labels = _read_png(manifest.frame_path("sem", index)).astype(np.int32)
    return Frame(index, color, depth, labels)


def write_dataset(
    root: str | Path,
    frames,  # iterable with .color/.depth/.labels/.pose
    intrinsics: Intrinsics,
    depth_scale: float = 0.0002,
    with_trajectory: bool = True,
) -> DatasetManifest:
    """Quantize and store oracle frames in the dataset layout."""
    root = Path(root)
    paths = {"color": "color", "depth": "depth", "sem": "sem"}
    for sub in paths.values():
        (root / sub).mkdir(parents=True, exist_ok=True)
    poses = []
    count = 0
    for i, fr in enumerate(frames):
        rgb = np.clip(np.round(fr.color * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(rgb).save(root / "color" / f"{i:06d}.png")
        d16 = np.clip(np.round(fr.depth / depth_scale), 0, 65535).astype(np.uint16)
        Image.fromarray(d16).save(root / "depth" / f"{i:06d}.png")
        Image.fromarray(fr.labels.astype(np.uint16)).save(root / "sem" / f"{i:06d}.png")
        poses.append((float(i), fr.pose))
        count += 1
    gt = None
    if with_trajectory:
        gt = "gt_traj.txt"
        write_trajectory(root / gt, poses)
    manifest = DatasetManifest(root, intrinsics, count, depth_scale, paths, gt)
    write_manifest(manifest)
    return manifest


# -- trajectory text format ----------------------------------------------------


def write_trajectory(path: str | Path, poses: list[tuple[float, RigidPose]]):
    lines = []
    for ts, pose in poses:
        t = pose.trans
        q = pose.quat
        vals = [ts, t[0], t[1], t[2], q[0], q[1], q[2], q[3]]
        lines.append(" ".join(f"{v:.9g}" for v in vals))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_trajectory(path: str | Path) -> list[tuple[float, RigidPose]]:
    out = []
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ParseError(f"expected 8 fields, got {len(parts)}", line=lineno)
        try:
            ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
        except ValueError as exc:
            raise ParseError(str(exc), line=lineno) from exc
        out.append((ts, RigidPose(np.array([qx, qy, qz, qw]), np.array([tx, ty, tz]))))
    return out
