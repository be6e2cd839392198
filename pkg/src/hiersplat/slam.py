"""Alternating tracking / mapping over a frame stream, RGB-D or monocular.

Tracking minimizes the masked photometric + depth objective over the
camera pose with the map frozen; mapping optimizes all primitive fields,
the inter-level decoder, and (monocular) the per-frame depth-prior
scale/shift with the pose frozen. Both use a per-group Adam optimizer.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import gaussian_map as gm
from . import metrics as ev
from .datasets import DatasetManifest, Frame, load_frame, read_trajectory, write_trajectory
from .errors import EmptyMask, NonFiniteLoss, TrackingDiverged
from .geometry import Intrinsics, RigidPose, constant_velocity_predict
from .losses import (
    InterLevelDecoder,
    SemanticLossWeights,
    SemanticTargets,
    TrackMapWeights,
    init_decoder,
    mapping_loss,
    semantic_targets,
    tracking_loss,
)
from .mono_prior import (
    AffineAlignment,
    ImageSetSpec,
    PriorDepth,
    align_depth,
    refinement_grads,
    set_index_of,
)
from .rasterizer import ChannelGradients, RenderOptions, render, render_backward
from .semantic_tree import (
    BinaryLayout,
    OneHotLayout,
    SemanticTree,
    binary_layout,
    decode_batch,
    decoded_class_ids,
    flat_tree,
    one_hot_layout,
)


@dataclass
class LearningRates:
    pose: float = 1e-3
    mu: float = 1e-4
    radius: float = 2e-4
    opacity: float = 0.02
    color: float = 0.005
    sem: float = 0.1
    decoder: float = 0.005
    prior_affine: float = 2e-3


@dataclass
class SlamConfig:
    mode: str = "rgbd"  # rgbd | mono
    layout: str = "onehot"  # flat | onehot | binary
    tracking_iters: int = 40
    mapping_iters: int = 60
    bootstrap_map_iters: int | None = None  # frame-0 phase; defaults to mapping_iters
    map_every: int = 5
    dense_map_until: int = 0  # map every frame up to this index (gauge settling)
    pin_first_keyframe: bool = True  # keep frame 0 in the replay buffer as anchor
    seed: int = 0
    lr: LearningRates = field(default_factory=LearningRates)
    weights: TrackMapWeights = field(default_factory=TrackMapWeights)
    sem_weights: SemanticLossWeights = field(default_factory=SemanticLossWeights)
    map_config: gm.MapConfig = field(default_factory=gm.MapConfig)
    prior_spec: ImageSetSpec = field(default_factory=ImageSetSpec)
    prior_reg_weight: float = 0.1
    replay_keyframes: int = 0  # 0: map the current frame only
    cutoff_sigmas: float = 3.0
    early_exit_transmittance: float = 1e-4
    deterministic_reduction: bool = True
    eval_stride: int = 1

    def __post_init__(self):
        if self.tracking_iters < 1 or self.mapping_iters < 1:
            raise ValueError("iteration counts must be >= 1")

    def render_options(self) -> RenderOptions:
        # row-banded evaluation is only enabled when bit-determinism is waived
        return RenderOptions(
            cutoff_sigmas=self.cutoff_sigmas,
            early_exit_transmittance=self.early_exit_transmittance,
            row_bands=1 if self.deterministic_reduction else 4,
        )

    def to_dict(self) -> dict:
        def dc_dict(obj):
            return {f.name: getattr(obj, f.name) for f in fields(obj)}

        doc = dc_dict(self)
        for key in ("lr", "weights", "sem_weights", "map_config", "prior_spec"):
            doc[key] = dc_dict(doc[key])
        return doc

    @staticmethod
    def from_dict(doc: dict) -> "SlamConfig":
        doc = dict(doc)
        parts = {
            "lr": LearningRates,
            "weights": TrackMapWeights,
            "sem_weights": SemanticLossWeights,
            "map_config": gm.MapConfig,
            "prior_spec": ImageSetSpec,
        }
        kwargs = {}
        for key, value in doc.items():
            if key in parts:
                kwargs[key] = parts[key](**value) if isinstance(value, dict) else value
            else:
                kwargs[key] = value
        return SlamConfig(**kwargs)


class Adam:
    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps

    def step(self, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1**self.t)
        v_hat = self.v / (1 - self.beta2**self.t)
        return -self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def extend(self, n_rows: int):
        pad = (n_rows,) + self.m.shape[1:]
        self.m = np.concatenate([self.m, np.zeros(pad)])
        self.v = np.concatenate([self.v, np.zeros(pad)])

    def filter(self, keep: np.ndarray):
        self.m = self.m[keep]
        self.v = self.v[keep]


@dataclass
class Keyframe:
    index: int
    frame: Frame
    pose: RigidPose
    targets: SemanticTargets | None
    depth_target: np.ndarray | None  # mono: aligned prior snapshot


@dataclass
class SlamState:
    gmap: gm.GaussianMap
    trajectory: list[RigidPose]
    decoder: InterLevelDecoder | None
    tree: SemanticTree | None
    layout: OneHotLayout | BinaryLayout | None
    frame_count: int = 0
    alignments: dict[int, tuple[AffineAlignment, AffineAlignment]] = field(default_factory=dict)
    prior_sets: dict[int, int] = field(default_factory=dict)
    map_optimizers: dict[str, Adam] = field(default_factory=dict)
    decoder_optimizers: list[Adam] = field(default_factory=list)
    keyframes: list[Keyframe] = field(default_factory=list)
    loss_traces: list[list[float]] = field(default_factory=list)
    track_iter_ms: list[float] = field(default_factory=list)
    map_iter_ms: list[float] = field(default_factory=list)


def make_layout(tree: SemanticTree | None, mode: str):
    if tree is None:
        return None, 0
    if mode == "flat":
        ft = flat_tree({cid: tree.node_name(tree.depth, leaf) for cid, leaf in tree.leaf_classes.items()})
        layout = one_hot_layout(ft)
        return (ft, layout), layout.total_width
    if mode == "onehot":
        layout = one_hot_layout(tree)
        return (tree, layout), layout.total_width
    if mode == "binary":
        layout = binary_layout(tree)
        return (tree, layout), layout.total_width
    raise ValueError(f"unknown layout {mode!r}")


def init_state(config: SlamConfig, tree: SemanticTree | None) -> SlamState:
    pair, width = make_layout(tree, config.layout)
    eff_tree, layout = pair if pair else (None, None)
    decoder = None
    if eff_tree is not None:
        decoder = init_decoder(width, eff_tree.num_classes, seed=config.seed)
    gmap = gm.GaussianMap(width, config.layout)
    return SlamState(gmap, [], decoder, eff_tree, layout)


def _ensure_map_optimizers(state: SlamState, config: SlamConfig):
    lr = config.lr
    if not state.map_optimizers:
        P = state.gmap.count
        W = state.gmap.sem_width
        state.map_optimizers = {
            "mu": Adam((P, 3), lr.mu),
            "radius": Adam((P,), lr.radius),
            "opacity": Adam((P,), lr.opacity),
            "color": Adam((P, 3), lr.color),
            "sem": Adam((P, W), lr.sem),
        }
        if state.decoder is not None:
            state.decoder_optimizers = [
                Adam(p.shape, lr.decoder) for p in state.decoder.parameters()
            ]


def _grow_map_optimizers(state: SlamState, n_added: int):
    if n_added and state.map_optimizers:
        for opt in state.map_optimizers.values():
            opt.extend(n_added)


def _filter_map_optimizers(state: SlamState, keep: np.ndarray):
    for opt in state.map_optimizers.values():
        opt.filter(keep)


def track(state: SlamState, frame: Frame, K: Intrinsics, config: SlamConfig) -> RigidPose:
    """Pose for the frame: constant-velocity init + gradient refinement.

    The map stays frozen; the returned pose is the iterate with the lowest
    observed loss.
    """
    if state.gmap.count == 0:
        raise TrackingDiverged("map is empty")
    traj = state.trajectory
    if len(traj) >= 2:
        pose = constant_velocity_predict(traj[-1], traj[-2])
    else:
        pose = traj[-1]
    options = config.render_options()
    adam = Adam((6,), config.lr.pose)
    best_val, best_pose = math.inf, pose
    for it in range(config.tracking_iters + 1):
        t0 = time.perf_counter()
        rendered = render(state.gmap, pose, K, options)
        try:
            val, g_color, g_depth, g_sil = tracking_loss(rendered, frame, config.weights)
        except EmptyMask:
            if it == 0:
                raise TrackingDiverged("initial pose sees no mapped region") from None
            break  # wandered off; keep the best iterate
        if not math.isfinite(val):
            raise TrackingDiverged(f"non-finite tracking loss at iteration {it}")
        if val < best_val:
            best_val, best_pose = val, pose
        if it == config.tracking_iters:
            break
        grads = render_backward(
            state.gmap, pose, K,
            ChannelGradients(color=g_color, depth=g_depth, silhouette=g_sil),
            options,
        )
        pose = pose.retract(adam.step(grads.pose))
        state.track_iter_ms.append((time.perf_counter() - t0) * 1000.0)
    return best_pose


def map_update(
    state: SlamState,
    frame: Frame,
    pose: RigidPose,
    K: Intrinsics,
    config: SlamConfig,
    rng: np.random.Generator,
    frame_index: int,
    prior: PriorDepth | None = None,
) -> list[float]:
    """Densify, optimize all map parameters at a fixed pose, prune.

    Returns the per-iteration loss trace. In monocular mode the frame's
    affine alignment is refined jointly and the supervised depth is the
    aligned prior.
    """
    options = config.render_options()
    mono = prior is not None
    depth_frame = frame
    if mono:
        alignment, align_init = state.alignments[frame_index]
        depth_frame = Frame(frame.index, frame.color, alignment.apply(prior), frame.labels)
    _ensure_map_optimizers(state, config)
    rendered = render(state.gmap, pose, K, options)
    added = gm.densify(
        state.gmap, depth_frame, rendered, pose, K, config.map_config, rng, frame_index
    )
    _grow_map_optimizers(state, added)

    targets = None
    if state.tree is not None and frame.labels is not None and config.weights.w5 > 0:
        targets = semantic_targets(frame.labels, state.tree)

    current = Keyframe(
        frame_index, frame, pose, targets,
        depth_frame.depth if mono else None,
    )
    buffer = [current]
    if config.replay_keyframes > 0 and state.keyframes:
        recent = state.keyframes[-(config.replay_keyframes - 1):]
        if (
            config.pin_first_keyframe
            and state.keyframes[0].index == 0
            and all(kf.index != 0 for kf in recent)
        ):
            recent = [state.keyframes[0]] + recent[1:]
        buffer = recent + [current]

    aff_opt = Adam((2,), config.lr.prior_affine) if mono else None
    n_iters = config.mapping_iters
    if frame_index == 0 and config.bootstrap_map_iters:
        n_iters = config.bootstrap_map_iters
    trace: list[float] = []
    for it in range(n_iters):
        t0 = time.perf_counter()
        kf = buffer[it % len(buffer)]
        refine_this = mono and kf.index == frame_index
        if refine_this:
            alignment, align_init = state.alignments[frame_index]
            depth_target = alignment.apply(prior)
        else:
            depth_target = kf.depth_target
        rendered = render(state.gmap, kf.pose, K, options)
        res = mapping_loss(
            rendered,
            kf.frame,
            config.weights,
            depth_target=depth_target,
            decoder=state.decoder,
            targets=kf.targets,
            layout=state.layout,
            mode=config.layout,
            sem_weights=config.sem_weights,
            iteration=it,
        )
        if not math.isfinite(res.value):
            raise NonFiniteLoss(f"mapping loss diverged at iteration {it}")
        trace.append(res.value)
        grads = render_backward(
            state.gmap,
            kf.pose,
            K,
            ChannelGradients(
                color=res.grad_color,
                depth=res.grad_depth,
                silhouette=res.grad_silhouette,
                sem=res.grad_sem,
            ),
            options,
        )
        opts = state.map_optimizers
        state.gmap.mu += opts["mu"].step(grads.mu)
        state.gmap.radius += opts["radius"].step(grads.radius)
        state.gmap.opacity += opts["opacity"].step(grads.opacity)
        state.gmap.color += opts["color"].step(grads.color)
        if state.gmap.sem_width:
            state.gmap.sem += opts["sem"].step(grads.sem)
        state.gmap.clamp_params()
        if res.decoder_grads is not None:
            for opt, param, grad in zip(
                state.decoder_optimizers,
                state.decoder.parameters(),
                res.decoder_grads.parameters(),
            ):
                param += opt.step(grad)
        if refine_this:
            g_lam, g_tau = refinement_grads(
                res.grad_depth_target, prior, alignment, align_init, config.prior_reg_weight
            )
            d = aff_opt.step(np.array([g_lam, g_tau]))
            new = AffineAlignment(
                max(alignment.lam + d[0], 1e-6), alignment.tau + d[1], alignment.degenerate
            )
            state.alignments[frame_index] = (new, align_init)
        state.map_iter_ms.append((time.perf_counter() - t0) * 1000.0)

    keep = gm.prune_mask(state.gmap, config.map_config)
    if not keep.all():
        state.gmap.keep(keep)
        _filter_map_optimizers(state, keep)
    if config.replay_keyframes > 0:
        if mono:
            alignment, _ = state.alignments[frame_index]
            current.depth_target = alignment.apply(prior)
        state.keyframes.append(current)
        keep_from = max(0, len(state.keyframes) - config.replay_keyframes)
        trimmed = state.keyframes[keep_from:]
        if config.pin_first_keyframe and state.keyframes[0].index == 0 and trimmed[0].index != 0:
            trimmed = [state.keyframes[0]] + trimmed
        state.keyframes = trimmed
    state.loss_traces.append(trace)
    return trace


@dataclass
class RunResult:
    trajectory: list[tuple[float, RigidPose]]
    gmap: gm.GaussianMap
    state: SlamState
    metrics: dict


def _tracking_depth(frame: Frame, state: SlamState, index: int, prior: PriorDepth | None) -> Frame:
    if prior is None:
        return frame
    alignment, _ = state.alignments[index]
    return Frame(frame.index, frame.color, alignment.apply(prior), frame.labels)


def run(
    manifest: DatasetManifest,
    config: SlamConfig,
    tree: SemanticTree | None = None,
    prior_provider=None,
    out_dir: str | Path | None = None,
    progress=None,
) -> RunResult:
    """Process the whole sequence: frame 0 seeds the map and anchors the
    trajectory, every later frame is tracked, every map_every-th mapped."""
    if config.mode == "mono" and prior_provider is None:
        raise ValueError("monocular mode needs a prior provider")
    K = manifest.intrinsics
    rng = np.random.default_rng(config.seed)
    state = init_state(config, tree)
    options = config.render_options()

    gt_traj = None
    if manifest.gt_trajectory:
        gt_traj = read_trajectory(manifest.root / manifest.gt_trajectory)
    origin = gt_traj[0][1] if gt_traj else RigidPose.identity()

    timestamps: list[float] = []
    for i in range(manifest.frame_count):
        frame = load_frame(manifest, i)
        prior = prior_provider.get(i) if config.mode == "mono" else None
        if config.mode == "mono":
            state.prior_sets[i] = set_index_of(i, config.prior_spec)
        try:
            if i == 0:
                if prior is not None:
                    # bootstrap: raw prior fixes the metric gauge of the map
                    state.alignments[0] = (AffineAlignment(1.0, 0.0), AffineAlignment(1.0, 0.0))
                    frame_d = _tracking_depth(frame, state, 0, prior)
                else:
                    frame_d = frame
                state.gmap = gm.init_from_frame(
                    frame_d, origin, K, config.map_config,
                    state.gmap.sem_width, config.layout, rng, 0,
                )
                state.trajectory.append(origin)
                map_update(state, frame, origin, K, config, rng, 0, prior=prior)
            else:
                if prior is not None:
                    pred = (
                        constant_velocity_predict(state.trajectory[-1], state.trajectory[-2])
                        if len(state.trajectory) >= 2
                        else state.trajectory[-1]
                    )
                    pre = render(state.gmap, pred, K, options)
                    pre_depth = pre.depth
                    if config.weights.normalize_depth:
                        pre_depth = pre.depth / np.maximum(pre.silhouette, 1e-6)
                    try:
                        alignment = align_depth(
                            prior, pre_depth, pre.silhouette, threshold=config.weights.delta
                        )
                    except EmptyMask:
                        alignment = state.alignments[i - 1][0] if (i - 1) in state.alignments else AffineAlignment(1.0, 0.0)
                    state.alignments[i] = (alignment, AffineAlignment(alignment.lam, alignment.tau))
                frame_d = _tracking_depth(frame, state, i, prior)
                pose = track(state, frame_d, K, config)
                state.trajectory.append(pose)
                if i % config.map_every == 0 or i <= config.dense_map_until:
                    map_update(state, frame, pose, K, config, rng, i, prior=prior)
        except Exception as exc:
            raise type(exc)(f"frame {i}: {exc}") from exc
        state.frame_count += 1
        timestamps.append(float(i))
        if progress:
            progress(i, manifest.frame_count)

    trajectory = list(zip(timestamps, state.trajectory))
    metrics = compute_metrics(manifest, config, state, trajectory, gt_traj)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_trajectory(out_dir / "traj_est.txt", trajectory)
        gm.save_map(state.gmap, out_dir / "map.hspp")
        (out_dir / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n", "utf-8")
        (out_dir / "config.json").write_text(
            json.dumps(config.to_dict(), indent=2) + "\n", "utf-8"
        )
        (out_dir / "losses.json").write_text(
            json.dumps({"mapping_traces": state.loss_traces}, indent=2) + "\n", "utf-8"
        )
        if config.mode == "mono":
            report = prior_alignment_report(state)
            (out_dir / "prior_alignment.json").write_text(
                json.dumps(report, indent=2) + "\n", "utf-8"
            )
    return RunResult(trajectory, state.gmap, state, metrics)


def prior_alignment_report(state: SlamState) -> dict:
    per_frame = {
        str(i): {"set": state.prior_sets.get(i, 0), "lambda": a.lam, "tau": a.tau}
        for i, (a, _) in sorted(state.alignments.items())
    }
    by_set: dict[int, list[float]] = {}
    for i, (a, _) in state.alignments.items():
        by_set.setdefault(state.prior_sets.get(i, 0), []).append(a.lam)
    per_set = {str(s): {"lambda_mean": float(np.mean(v))} for s, v in sorted(by_set.items())}
    return {"per_frame": per_frame, "per_set": per_set}


def compute_metrics(
    manifest: DatasetManifest,
    config: SlamConfig,
    state: SlamState,
    trajectory: list[tuple[float, RigidPose]],
    gt_traj,
) -> dict:
    K = manifest.intrinsics
    options = config.render_options()
    psnrs, ssims, depth_l1s = [], [], []
    mious: list[list[float]] = []
    for i in range(0, manifest.frame_count, config.eval_stride):
        frame = load_frame(manifest, i)
        pose = trajectory[i][1]
        rendered = render(state.gmap, pose, K, options)
        psnrs.append(ev.psnr(rendered.color, frame.color))
        ssims.append(ev.ssim(rendered.color, frame.color))
        if frame.depth is not None and frame.valid_depth.any():
            depth_est = rendered.depth
            if config.weights.normalize_depth:
                depth_est = rendered.depth / np.maximum(rendered.silhouette, 1e-6)
            depth_l1s.append(ev.depth_l1(depth_est, frame.depth, frame.valid_depth))
        if state.tree is not None and frame.labels is not None:
            nodes = decode_batch(state.tree, state.layout, rendered.sem, config.layout)
            pred_classes = decoded_class_ids(state.tree, nodes[-1])
            mious.append(
                [
                    ev.miou(pred_classes, frame.labels, state.tree, level)
                    for level in range(state.tree.num_levels)
                ]
            )
    metrics = {
        "ate_rmse": None,
        "depth_l1": float(np.mean(depth_l1s)) if depth_l1s else None,
        "psnr": float(np.mean(psnrs)) if psnrs else None,
        "ssim": float(np.mean(ssims)) if ssims else None,
        "miou_per_level": (
            [float(np.mean([m[l] for m in mious])) for l in range(len(mious[0]))] if mious else []
        ),
        "runtime": {
            "track_ms_per_iter": float(np.mean(state.track_iter_ms)) if state.track_iter_ms else 0.0,
            "map_ms_per_iter": float(np.mean(state.map_iter_ms)) if state.map_iter_ms else 0.0,
        },
        "gaussian_count": state.gmap.count,
        "storage": {
            "geometry_bytes": gm.storage_report(state.gmap).geometry_bytes,
            "color_bytes": gm.storage_report(state.gmap).color_bytes,
            "semantic_bytes": gm.storage_report(state.gmap).semantic_bytes,
        },
    }
    if gt_traj is not None:
        metrics["ate_rmse"] = ev.ate_rmse(trajectory, gt_traj)
    return metrics
