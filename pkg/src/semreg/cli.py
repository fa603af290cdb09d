"""Command-line driver: synth, extract, match, register, train, eval.

Exit codes: 0 on success, 1 for validation and format problems (including
bad usage), 2 for I/O failures.  Every output file is deterministic under a
fixed seed; evaluation aggregates are thread-count independent.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time

import numpy as np

from . import config as cfgmod
from .checkpoint import load_checkpoint, save_checkpoint
from .errors import TrainingDivergedError, ValidationError
from .geometry import RigidTransform
from .instances import SemanticPointCloud, default_category_config, extract_instances
from .kitti import load_manifest, read_labels, read_poses, read_scan, relative_pose, write_labels, write_scan
from .matching import format_correspondences, hard_assign, soft_assign_graphs
from .graph import build_graph
from .networks import MatchingModel
from .pipeline import EvalPair, evaluate, format_report, register_pair
from .training import generate_scene_pair, make_training_pairs, train

__all__ = ["main"]


class _Parser(argparse.ArgumentParser):
    # usage problems are validation errors: exit 1, not argparse's default 2
    def error(self, message: str) -> None:  # type: ignore[override]
        self.print_usage(sys.stderr)
        raise ValidationError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="semreg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, checkpoint=False):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None, help="random seed (overrides config)")
        p.add_argument("--output", default=".", help="output directory")
        p.add_argument("--threads", type=int, default=1, help="worker threads")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="model weights file")

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    common(p)

    p = sub.add_parser("extract", help="dump semantic instances of one scan")
    p.add_argument("scan")
    p.add_argument("labels")
    common(p)

    p = sub.add_parser("match", help="dump instance correspondences of a pair")
    p.add_argument("scan_x")
    p.add_argument("labels_x")
    p.add_argument("scan_y")
    p.add_argument("labels_y")
    common(p, checkpoint=True)

    p = sub.add_parser("register", help="estimate the rigid transform of a pair")
    p.add_argument("scan_x")
    p.add_argument("labels_x")
    p.add_argument("scan_y")
    p.add_argument("labels_y")
    common(p, checkpoint=True)

    p = sub.add_parser("train", help="train a matching model on synthetic pairs")
    common(p)

    p = sub.add_parser("eval", help="evaluate registration over a dataset")
    p.add_argument("--manifest", help="sequence manifest; omit for synthetic pairs")
    common(p, checkpoint=True)

    p = sub.add_parser("defaults", help="print a config file with every default")
    return parser


def _load_mapping(args) -> dict[str, str]:
    mapping = cfgmod.load_config(args.config) if args.config else {}
    cfgmod.validate_keys(mapping)
    return mapping


def _load_model(args, mapping) -> MatchingModel:
    model = MatchingModel(cfgmod.feature_config(mapping))
    expected = {name: p.data.shape for name, p in model.params.items()}
    model.load_state_dict(load_checkpoint(args.checkpoint, expected))
    return model


def _read_pair(args) -> tuple[SemanticPointCloud, SemanticPointCloud]:
    cloud_x = read_scan(args.scan_x)
    cloud_y = read_scan(args.scan_y)
    return (
        SemanticPointCloud(cloud_x, read_labels(args.labels_x, len(cloud_x))),
        SemanticPointCloud(cloud_y, read_labels(args.labels_y, len(cloud_y))),
    )


def _transform_line(transform: RigidTransform) -> str:
    return " ".join(f"{v:.12g}" for v in np.hstack([transform.rotation, transform.translation[:, None]]).ravel())


def _cmd_synth(args) -> int:
    mapping = _load_mapping(args)
    gen = cfgmod.scene_gen_config(mapping)
    count = int(mapping.get("num_pairs", cfgmod.CLI_KEYS["num_pairs"]))
    seed = args.seed if args.seed is not None else 0
    os.makedirs(args.output, exist_ok=True)
    gt_lines = []
    for i in range(count):
        rng = np.random.default_rng(seed * 1_000_000 + i)
        scene_x, scene_y, gt, _ = generate_scene_pair(rng, gen)
        write_scan(os.path.join(args.output, f"pair{i:04d}_x.bin"), scene_x.cloud)
        write_labels(os.path.join(args.output, f"pair{i:04d}_x.label"), scene_x.labels)
        write_scan(os.path.join(args.output, f"pair{i:04d}_y.bin"), scene_y.cloud)
        write_labels(os.path.join(args.output, f"pair{i:04d}_y.label"), scene_y.labels)
        gt_lines.append(_transform_line(gt))
    with open(os.path.join(args.output, "gt.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(gt_lines) + "\n")
    print(f"wrote {count} pairs to {args.output}")
    return 0


def _cmd_extract(args) -> int:
    mapping = _load_mapping(args)
    pipe = cfgmod.pipeline_config(mapping)
    cloud = read_scan(args.scan)
    spc = SemanticPointCloud(cloud, read_labels(args.labels, len(cloud)))
    result = extract_instances(spc, default_category_config(), pipe.k_shape_points)
    os.makedirs(args.output, exist_ok=True)
    path = os.path.join(args.output, "instances.txt")
    with open(path, "w", encoding="utf-8") as fh:
        for inst in result.instances:
            c = inst.centroid
            fh.write(
                f"{inst.id} {inst.category_name} {inst.category_index} "
                f"{inst.point_count} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}\n"
            )
    print(f"{len(result.instances)} instances -> {path}")
    return 0


def _cmd_match(args) -> int:
    mapping = _load_mapping(args)
    pipe = cfgmod.pipeline_config(mapping)
    model = _load_model(args, mapping)
    scene_x, scene_y = _read_pair(args)
    cats = default_category_config()
    inst_x = extract_instances(scene_x, cats, pipe.k_shape_points).instances
    inst_y = extract_instances(scene_y, cats, pipe.k_shape_points).instances
    if not inst_x or not inst_y:
        raise ValidationError("a side has no instances; nothing to match")
    soft = soft_assign_graphs(
        model,
        build_graph(list(inst_x), pipe.k_neighbors),
        build_graph(list(inst_y), pipe.k_neighbors),
        pipe.match_config(),
    )
    corr = hard_assign(soft, pipe.score_threshold)
    os.makedirs(args.output, exist_ok=True)
    path = os.path.join(args.output, "correspondences.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_correspondences(corr))
    print(f"{len(corr)} correspondences -> {path}")
    return 0


def _cmd_register(args) -> int:
    mapping = _load_mapping(args)
    pipe = cfgmod.pipeline_config(mapping)
    model = _load_model(args, mapping)
    scene_x, scene_y = _read_pair(args)
    result = register_pair(scene_x, scene_y, model, pipe)
    os.makedirs(args.output, exist_ok=True)
    diag_path = os.path.join(args.output, "diagnostics.txt")
    with open(diag_path, "w", encoding="utf-8") as fh:
        fh.write(
            f"instances_x {len(result.instances_x)}\n"
            f"instances_y {len(result.instances_y)}\n"
            f"correspondences {result.num_correspondences}\n"
            f"sinkhorn_iterations {result.sinkhorn_iterations}\n"
            f"sinkhorn_converged {result.sinkhorn_converged}\n"
            f"icp_converged {result.icp_converged}\n"
            f"icp_rms {result.icp_rms}\n"
            f"skipped {result.skipped}\n"
            f"skip_reason {result.skip_reason}\n"
        )
    if result.skipped:
        raise ValidationError(f"pair skipped: {result.skip_reason} (see {diag_path})")
    path = os.path.join(args.output, "transform.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(_transform_line(result.best) + "\n")
    print(f"transform -> {path}")
    return 0


def _cmd_train(args) -> int:
    mapping = _load_mapping(args)
    gen = cfgmod.scene_gen_config(mapping)
    tcfg = cfgmod.train_config(mapping)
    if args.seed is not None:
        tcfg = dataclasses.replace(tcfg, seed=args.seed)
    num_pairs = int(mapping.get("num_pairs", cfgmod.CLI_KEYS["num_pairs"]))
    num_val = int(mapping.get("num_val_pairs", cfgmod.CLI_KEYS["num_val_pairs"]))
    started = time.time()
    pairs = make_training_pairs(
        num_pairs, gen, None, tcfg.k_shape_points, tcfg.k_neighbors, tcfg.beta,
        base_seed=tcfg.seed,
    )
    val_pairs = make_training_pairs(
        num_val, gen, None, tcfg.k_shape_points, tcfg.k_neighbors, tcfg.beta,
        base_seed=tcfg.seed + 1,
    ) if num_val else None
    model = MatchingModel(cfgmod.feature_config(mapping), seed=tcfg.seed)
    history = train(model, pairs, tcfg, val_pairs)
    os.makedirs(args.output, exist_ok=True)
    ckpt_path = os.path.join(args.output, "model.sgm")
    save_checkpoint(model.state_dict(), ckpt_path)
    hist_path = os.path.join(args.output, "history.txt")
    with open(hist_path, "w", encoding="utf-8") as fh:
        fh.write("epoch mean_loss learning_rate val_precision val_recall\n")
        for h in history:
            fh.write(
                f"{h.epoch} {h.mean_loss:.6f} {h.learning_rate:.8g} "
                f"{h.val_inlier_precision} {h.val_inlier_recall}\n"
            )
    elapsed = time.time() - started
    print(
        f"trained {len(history)} epochs on {num_pairs} pairs in {elapsed:.1f}s; "
        f"loss {history[0].mean_loss:.4f} -> {history[-1].mean_loss:.4f}; "
        f"checkpoint -> {ckpt_path}"
    )
    return 0


def _manifest_items(args, mapping) -> list[EvalPair]:
    stride = int(mapping.get("stride", cfgmod.CLI_KEYS["stride"]))
    manifest = load_manifest(args.manifest, stride)
    extrinsic = cfgmod.extrinsic_from(mapping)
    items: list[EvalPair] = []
    for seq, a, b in manifest.pairs():
        poses = read_poses(seq.pose_file)
        cloud_a, cloud_b = read_scan(seq.scans[a]), read_scan(seq.scans[b])
        items.append(
            EvalPair(
                SemanticPointCloud(cloud_a, read_labels(seq.labels[a], len(cloud_a))),
                SemanticPointCloud(cloud_b, read_labels(seq.labels[b], len(cloud_b))),
                # gt moves frame-a points into frame b
                relative_pose(poses[b], poses[a], extrinsic),
                name=f"{os.path.basename(seq.scan_dir)}:{a}->{b}",
            )
        )
    return items


def _synthetic_items(args, mapping) -> list[EvalPair]:
    gen = cfgmod.scene_gen_config(mapping)
    count = int(mapping.get("num_eval_pairs", cfgmod.CLI_KEYS["num_eval_pairs"]))
    seed = args.seed if args.seed is not None else 0
    items = []
    for i in range(count):
        rng = np.random.default_rng((seed + 1) * 1_000_000 + i)
        scene_x, scene_y, gt, _ = generate_scene_pair(rng, gen)
        items.append(EvalPair(scene_x, scene_y, gt, name=f"synth{i:04d}"))
    return items


def _cmd_eval(args) -> int:
    mapping = _load_mapping(args)
    pipe = cfgmod.pipeline_config(mapping)
    model = _load_model(args, mapping)
    items = _manifest_items(args, mapping) if args.manifest else _synthetic_items(args, mapping)
    if not items:
        raise ValidationError("no pairs to evaluate")
    report = evaluate(items, model, pipe, threads=args.threads)
    os.makedirs(args.output, exist_ok=True)
    with open(os.path.join(args.output, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_report(report))
    with open(os.path.join(args.output, "pairs.jsonl"), "w", encoding="utf-8") as fh:
        for p in report.pairs:
            record = {k: (float(v) if isinstance(v, (np.floating, np.integer)) else v)
                      for k, v in dataclasses.asdict(p).items()}
            fh.write(json.dumps(record) + "\n")
    summary = {k: (float(v) if isinstance(v, (np.floating, np.integer)) else v) for k, v in (
        ("num_total", report.num_total),
        ("num_skipped", report.num_skipped),
        ("num_evaluated", report.num_evaluated),
        ("mean_rre_deg", report.mean_rre_deg),
        ("std_rre_deg", report.std_rre_deg),
        ("mean_rte_m", report.mean_rte_m),
        ("std_rte_m", report.std_rte_m),
        ("median_rre_deg", report.median_rre_deg),
        ("median_rte_m", report.median_rte_m),
        ("registration_recall", report.registration_recall),
        ("mean_inlier_precision", report.mean_inlier_precision),
        ("mean_inlier_recall", report.mean_inlier_recall),
        ("num_empty_predictions", report.num_empty_predictions),
    )}
    with open(os.path.join(args.output, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    sys.stdout.write(format_report(report))
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "extract": _cmd_extract,
    "match": _cmd_match,
    "register": _cmd_register,
    "train": _cmd_train,
    "eval": _cmd_eval,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command == "defaults":
            sys.stdout.write(cfgmod.default_config_text())
            return 0
        return _COMMANDS[args.command](args)
    except (ValueError, TrainingDivergedError) as exc:
        # ValidationError, FormatError, SchemaError and kin derive from ValueError
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
