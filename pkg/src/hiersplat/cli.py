"""Command-line surface: tree building, SLAM runs, evaluation, plotting.

Exit codes: 0 ok, 1 generic failure, 2 validation failure,
3 configuration / credential problem.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import datasets, gaussian_map, llm_client, metrics, mono_prior
from . import scene_synth, semantic_tree, slam, tree_builder
from .errors import CredentialMissing, HiersplatError
from .palette import colorize

EXIT_OK = 0
EXIT_GENERIC = 1
EXIT_VALIDATION = 2
EXIT_CONFIG = 3


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=96)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiersplat",
        description="Semantic Gaussian-splatting SLAM with hierarchical label coding.",
        formatter_class=_formatter,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    tree = sub.add_parser("tree", help="taxonomy operations", formatter_class=_formatter)
    tree_sub = tree.add_subparsers(dest="tree_command", required=True)
    tb = tree_sub.add_parser(
        "build", help="build a hierarchy from a class list", formatter_class=_formatter
    )
    tb.add_argument("--classes", required=True, help="class list file: 'id,name' or 'name' lines")
    tb.add_argument("--config", help="builder config JSON")
    tb.add_argument("--llm-endpoint", help="chat-completions endpoint URL")
    tb.add_argument("--mock", help="replay transcript JSON instead of a live endpoint")
    tb.add_argument("--record", help="record live exchanges to this transcript JSON")
    tb.add_argument("--shape-embeddings", help="CSV of precomputed class shape embeddings")
    tb.add_argument(
        "--synthetic-shapes", action="store_true", help="derive shape embeddings from class names"
    )
    tb.add_argument("--seed", type=int, default=0, help="clustering seed")
    tb.add_argument("--out", required=True, help="output tree JSON path")
    tb.add_argument(
        "--review", action="store_true", help="print the tree for inspection; write only on confirm"
    )

    slam_p = sub.add_parser("slam", help="SLAM runs", formatter_class=_formatter)
    slam_sub = slam_p.add_subparsers(dest="slam_command", required=True)
    sr = slam_sub.add_parser("run", help="run tracking and mapping", formatter_class=_formatter)
    sr.add_argument("--dataset", required=True, help="dataset directory with manifest.json")
    sr.add_argument("--mode", choices=["rgbd", "mono"], default="rgbd", help="input modality")
    sr.add_argument("--tree", help="semantic tree JSON; omit to run without semantics")
    sr.add_argument(
        "--layout", choices=["flat", "onehot", "binary"], default="onehot",
        help="semantic embedding layout",
    )
    sr.add_argument("--config", help="SlamConfig JSON; CLI flags override its fields")
    sr.add_argument("--out", required=True, help="output directory")
    sr.add_argument("--seed", type=int, help="random seed override")
    sr.add_argument(
        "--synthetic-prior", action="store_true",
        help="mono: distort dataset depth into priors instead of reading prior/",
    )

    ev = sub.add_parser("eval", help="recompute metrics from run artifacts", formatter_class=_formatter)
    ev.add_argument("--run", required=True, help="run output directory")
    ev.add_argument("--gt", required=True, help="dataset directory")
    ev.add_argument("--level", type=int, help="restrict mIoU to one tree level")
    ev.add_argument("--tree", help="semantic tree JSON (defaults to run config)")
    ev.add_argument("--out", help="write metrics JSON here instead of stdout")

    pl = sub.add_parser("plot", help="render figures from run artifacts", formatter_class=_formatter)
    pl.add_argument("--run", required=True, help="run output directory")
    pl.add_argument("--gt", help="dataset directory for comparisons")
    pl.add_argument("--level", type=int, help="semantic level for label maps (default: all)")
    pl.add_argument("--tree", help="semantic tree JSON (defaults to run config)")
    pl.add_argument("--out", required=True, help="output directory for PNGs")
    pl.add_argument("--frame", type=int, default=0, help="frame index to visualize")

    sy = sub.add_parser("synth", help="write a synthetic dataset", formatter_class=_formatter)
    sy.add_argument("--out", required=True, help="dataset directory to create")
    sy.add_argument("--frames", type=int, default=50, help="frame count")
    sy.add_argument("--size", type=int, default=64, help="square resolution")
    sy.add_argument(
        "--trajectory", choices=["orbit", "lawnmower", "static"], default="orbit",
        help="camera path",
    )
    sy.add_argument("--seed", type=int, default=0, help="scene seed")
    return parser


# -- tree build -----------------------------------------------------------------


def _read_classes(path: str) -> dict[int, str]:
    classes: dict[int, str] = {}
    auto = 1
    for raw in Path(path).read_text("utf-8").splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "," in line:
            cid, name = line.split(",", 1)
            classes[int(cid)] = name.strip()
        else:
            classes[auto] = line
            auto += 1
    return classes


def cmd_tree_build(args) -> int:
    classes = _read_classes(args.classes)
    cfg = tree_builder.BuilderConfig()
    if args.config:
        cfg = tree_builder.BuilderConfig(**json.loads(Path(args.config).read_text("utf-8")))
    if args.mock:
        llm = llm_client.ReplayClient(args.mock)
    elif args.llm_endpoint:
        llm = llm_client.HttpClient(args.llm_endpoint)
        if args.record:
            llm.recorder = llm_client.TranscriptRecorder(Path(args.record))
    else:
        print("error: need --llm-endpoint or --mock", file=sys.stderr)
        return EXIT_CONFIG
    if args.shape_embeddings:
        shapes = tree_builder.FileShapeProvider(args.shape_embeddings)
    elif args.synthetic_shapes:
        shapes = tree_builder.SyntheticShapeProvider(seed=args.seed)
    else:
        print("error: need --shape-embeddings or --synthetic-shapes", file=sys.stderr)
        return EXIT_CONFIG
    tree = tree_builder.build_tree(classes, cfg, llm, shapes, seed=args.seed)
    report = tree_builder.validate_tree(tree, sorted(classes))
    if args.review:
        print(json.dumps(semantic_tree.tree_to_dict(tree), indent=2))
        answer = input("write tree? [y/N] ").strip().lower()
        if answer not in ("y", "yes"):
            print("not written")
            return EXIT_OK
    semantic_tree.save_tree(tree, args.out)
    if not report.ok():
        print(f"validation failed: {report.summary()}", file=sys.stderr)
        return EXIT_VALIDATION
    print(f"wrote {args.out}: {tree.num_classes} classes, {tree.num_levels} levels")
    return EXIT_OK


# -- slam run ---------------------------------------------------------------------


def cmd_slam_run(args) -> int:
    manifest = datasets.load_manifest(args.dataset)
    if args.config:
        config = slam.SlamConfig.from_dict(json.loads(Path(args.config).read_text("utf-8")))
    else:
        config = slam.SlamConfig()
    config.mode = args.mode
    config.layout = args.layout
    if args.seed is not None:
        config.seed = args.seed
    tree = semantic_tree.load_tree(args.tree) if args.tree else None
    if tree is None and config.layout == "binary":
        print("error: binary layout needs --tree", file=sys.stderr)
        return EXIT_CONFIG
    provider = None
    if args.mode == "mono":
        if args.synthetic_prior:
            if manifest.subdir("depth") is None:
                print("error: --synthetic-prior needs dataset depth", file=sys.stderr)
                return EXIT_CONFIG
            provider = mono_prior.SyntheticPriorProvider(
                lambda i: datasets.load_frame(manifest, i).depth,
                spec=config.prior_spec,
                seed=config.seed,
            )
        elif manifest.subdir("prior") is not None and manifest.subdir("prior").is_dir():
            provider = mono_prior.DirectoryPriorProvider(manifest.subdir("prior"))
        else:
            print("error: mono mode needs a prior/ directory or --synthetic-prior", file=sys.stderr)
            return EXIT_CONFIG
    result = slam.run(manifest, config, tree=tree, prior_provider=provider, out_dir=args.out)
    print(json.dumps(result.metrics, indent=2))
    return EXIT_OK


# -- eval --------------------------------------------------------------------------


def _load_run(run_dir: Path, tree_path: str | None):
    config = slam.SlamConfig.from_dict(
        json.loads((run_dir / "config.json").read_text("utf-8"))
    )
    traj = datasets.read_trajectory(run_dir / "traj_est.txt")
    tree = semantic_tree.load_tree(tree_path) if tree_path else None
    pair, _ = slam.make_layout(tree, config.layout)
    eff_tree, layout = pair if pair else (None, None)
    gmap = gaussian_map.load_map(run_dir / "map.hspp", config.layout)
    return config, traj, eff_tree, layout, gmap


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    for artifact in ("config.json", "traj_est.txt", "map.hspp"):
        if not (run_dir / artifact).exists():
            print(f"error: missing artifact {artifact} under {run_dir}", file=sys.stderr)
            return EXIT_GENERIC
    manifest = datasets.load_manifest(args.gt)
    config, traj, tree, layout, gmap = _load_run(run_dir, args.tree)
    state = slam.SlamState(gmap, [p for _, p in traj], None, tree, layout)
    gt_traj = None
    if manifest.gt_trajectory:
        gt_traj = datasets.read_trajectory(manifest.root / manifest.gt_trajectory)
    result = slam.compute_metrics(manifest, config, state, traj, gt_traj)
    if args.level is not None and result["miou_per_level"]:
        result["miou"] = result["miou_per_level"][args.level]
    text = json.dumps(result, indent=2)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "metrics.json").write_text(text + "\n", "utf-8")
    else:
        print(text)
    return EXIT_OK


# -- plot --------------------------------------------------------------------------


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    from PIL import Image

    from .rasterizer import render
    from .semantic_tree import decode_batch

    run_dir = Path(args.run)
    if not (run_dir / "traj_est.txt").exists():
        print(f"error: no run artifacts under {run_dir}", file=sys.stderr)
        return EXIT_GENERIC
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config, traj, tree, layout, gmap = _load_run(run_dir, args.tree)

    losses_file = run_dir / "losses.json"
    if losses_file.exists():
        traces = json.loads(losses_file.read_text("utf-8"))["mapping_traces"]
        fig, ax = plt.subplots(figsize=(6, 4))
        for t in traces:
            ax.plot(t, alpha=0.6)
        ax.set_xlabel("iteration")
        ax.set_ylabel("mapping loss")
        fig.savefig(out / "loss_curves.png", dpi=110)
        plt.close(fig)

    if args.gt:
        manifest = datasets.load_manifest(args.gt)
        K = manifest.intrinsics
        idx = args.frame
        frame = datasets.load_frame(manifest, idx)
        rendered = render(gmap, traj[idx][1], K, config.render_options())
        pair = np.concatenate(
            [np.clip(rendered.color, 0, 1), frame.color], axis=1
        )
        Image.fromarray((pair * 255).astype(np.uint8)).save(out / f"render_vs_gt_{idx:06d}.png")
        if tree is not None:
            nodes = decode_batch(tree, layout, rendered.sem, config.layout)
            levels = [args.level] if args.level is not None else range(tree.num_levels)
            for level in levels:
                Image.fromarray(colorize(nodes[level] + 1)).save(
                    out / f"sem_level{level}_{idx:06d}.png"
                )
        if manifest.gt_trajectory:
            gt = datasets.read_trajectory(manifest.root / manifest.gt_trajectory)
            est = np.stack([p.trans for _, p in traj])
            ref = np.stack([p.trans for _, p in gt])
            fig, ax = plt.subplots(figsize=(5, 5))
            ax.plot(ref[:, 0], ref[:, 1], "k-", label="ground truth")
            ax.plot(est[:, 0], est[:, 1], "r--", label="estimate")
            ax.set_aspect("equal")
            ax.legend()
            fig.savefig(out / "trajectory.png", dpi=110)
            plt.close(fig)
    print(f"wrote plots to {out}")
    return EXIT_OK


# -- synth -------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = scene_synth.default_scene(
        frame_count=args.frames,
        resolution=(args.size, args.size),
        trajectory_kind=args.trajectory,
        seed=args.seed,
    )
    frames, tree = scene_synth.generate(spec)
    manifest = datasets.write_dataset(
        Path(args.out), frames, scene_synth.intrinsics_for(spec)
    )
    semantic_tree.save_tree(tree, Path(args.out) / "tree.json")
    print(f"wrote {manifest.frame_count} frames to {args.out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "tree":
            return cmd_tree_build(args)
        if args.command == "slam":
            return cmd_slam_run(args)
        if args.command == "eval":
            return cmd_eval(args)
        if args.command == "plot":
            return cmd_plot(args)
        if args.command == "synth":
            return cmd_synth(args)
        parser.error(f"unknown command {args.command}")
    except CredentialMissing as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except HiersplatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_GENERIC
    return EXIT_GENERIC


if __name__ == "__main__":
    sys.exit(main())
