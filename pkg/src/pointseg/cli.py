"""Command-line entry point: ``pointseg <command> [options]``.

Exit codes::

    0   success
    2   benchmark finished but some cell timed out or exceeded the memory budget
    64  usage error (bad flag, unknown method or ablation id)
    65  input data does not fit the checkpoint (channel mismatch, malformed file)
    66  config or input file unreadable, or config invalid
    70  training diverged (non-finite loss or gradient)
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import os
import sys
from typing import List, Optional


from . import __version__
from . import checkpoint as ckpt
from .aggregation import dump_attention_matrix
from .bench import DEFAULT_TIME_BUDGET, normalize_methods, run_decimation_benchmark
from .cloud import (
    PointCloud,
    SceneSpec,
    generate_scene,
    parse_kitti_bin,
    parse_kitti_labels,
    parse_ply,
    serialize_kitti_bin,
    serialize_kitti_labels,
    write_ply,
)
from .config import load_config
from .errors import (
    ArgumentError,
    ConfigError,
    DataError,
    FormatError,
    ParseError,
    PointSegError,
    TrainingDiverged,
    UnsupportedFormatError,
)
from .experiments import ABLATIONS, ToyTask, ablation_config, toy_config
from .network import NetworkConfig, build_network
from .optim import AdamState
from .samplers import DEFAULT_IDIS_T, DEFAULT_MEMORY_BUDGET, DecimationPlan
from .train import evaluate, inverse_frequency_weights, train

EXIT_OK = 0
EXIT_PARTIAL = 2
EXIT_USAGE = 64
EXIT_DATA = 65
EXIT_NOINPUT = 66
EXIT_SOFTWARE = 70


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat()


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seeds: dict
    outputs: List[str]
    started: str
    finished: str = ""
    status: str = "ok"
    error: Optional[str] = None
    tool_version: str = __version__

    def write(self, path):
        self.finished = _now()
        with open(path, "w", encoding="utf-8") as f:
            json.dump(dataclasses.asdict(self), f, indent=2, sort_keys=True)
            f.write("\n")


def manifest_path(primary_output: str) -> str:
    if os.path.isdir(primary_output):
        return os.path.join(primary_output, "manifest.json")
    return primary_output + ".manifest.json"


def _ints(text: str) -> List[int]:
    try:
        return [int(float(x)) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------------------
# cloud files


def read_cloud(path: str, labels_path: Optional[str] = None) -> PointCloud:
    with open(path, "rb") as f:
        data = f.read()
    if path.lower().endswith(".ply"):
        cloud = parse_ply(data)
    elif path.lower().endswith(".bin"):
        cloud = parse_kitti_bin(data)
    else:
        raise UnsupportedFormatError(f"{path}: expected a .ply or KITTI .bin file")
    if labels_path:
        with open(labels_path, "rb") as f:
            labels = parse_kitti_labels(f.read())
        cloud = PointCloud(cloud.positions, cloud.attributes, labels)
    return cloud


def _with_n_class(cloud: PointCloud, n_class: int) -> PointCloud:
    if cloud.labels is None:
        raise DataError("cloud has no labels")
    return PointCloud(cloud.positions, cloud.attributes, cloud.labels, n_class)


def _scenes_from_args(args, n_class: int, train_set: bool):
    files = args.data.split(",") if args.data else []
    if files:
        return [_with_n_class(read_cloud(p), n_class) for p in files]
    task = _task_from_args(args, n_class)
    return task.datasets()[0 if train_set else 1]


def _task_from_args(args, n_class: int) -> ToyTask:
    return ToyTask(n_points=args.n_points, n_class=n_class, noise_sigma=args.noise,
                   train_scenes=args.train_scenes, heldout_scenes=args.heldout_scenes,
                   train_seed=args.scene_seed, heldout_seed=args.scene_seed + 1000)


def _load_network(path):
    params, meta = ckpt.load(path)
    if "config" not in meta:
        raise FormatError(f"{path}: checkpoint carries no network config")
    net = build_network(NetworkConfig.from_dict(meta["config"]))
    net.load_state_dict(params)
    return net, meta


# ---------------------------------------------------------------------------
# commands


def cmd_bench(args) -> int:
    try:
        methods = normalize_methods(args.methods.split(","))
    except ArgumentError as e:
        raise UsageError(str(e)) from None
    sizes = sorted(_ints(args.sizes))
    plan = DecimationPlan(args.steps, args.ratio)
    manifest = RunManifest("bench", {"sizes": sizes, "methods": methods, "steps": plan.steps,
                                     "ratio": plan.ratio, "time_budget": args.time_budget,
                                     "memory_budget": args.memory_budget, "fps_start": args.fps_start,
                                     "idis_t": args.idis_t, "idis_invert": args.idis_invert,
                                     "crs_tau": args.crs_tau},
                           {"seed": args.seed}, [args.out], _now())

    def progress(row):
        print(f"{row.method:>4} n={row.n_points:<9} {row.elapsed_s:10.4f} s "
              f"{row.peak_bytes:>12} B  {row.status}", file=sys.stderr)

    report = run_decimation_benchmark(
        sizes, plan, methods, seed=args.seed, time_budget=args.time_budget,
        memory_budget=args.memory_budget, fps_start=args.fps_start, idis_t=args.idis_t,
        idis_invert=args.idis_invert, crs_tau=args.crs_tau, progress=progress)
    report.write_csv(args.out)
    if report.has_failures:
        manifest.status = "partial"
    manifest.write(manifest_path(args.out))
    return EXIT_PARTIAL if report.has_failures else EXIT_OK


def _network_config(args, n_class_default=3) -> NetworkConfig:
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.config:
        return load_config(args.config, **overrides)
    return toy_config(n_class=n_class_default, **overrides)


def cmd_train(args) -> int:
    cfg = _network_config(args)
    os.makedirs(args.out_dir, exist_ok=True)
    ckpt_path = os.path.join(args.out_dir, "model.ckpt")
    report_path = os.path.join(args.out_dir, "report.jsonl")
    manifest = RunManifest("train", cfg.to_dict(), {"seed": cfg.seed, "scene_seed": args.scene_seed},
                           [ckpt_path, report_path], _now())
    scenes = _scenes_from_args(args, cfg.n_class, train_set=True)
    net = build_network(cfg)
    weights = inverse_frequency_weights(scenes, cfg.n_class) if args.class_weights else None
    with open(report_path, "w", encoding="utf-8") as log:
        def on_epoch(rec):
            log.write(json.dumps(dataclasses.asdict(rec)) + "\n")
            log.flush()
            print(f"epoch {rec.epoch:3d}  loss {rec.loss:.4f}  lr {rec.lr:.6f}  miou {rec.miou:.4f}",
                  file=sys.stderr)

        try:
            train(net, scenes, args.epochs, AdamState(lr=args.lr), class_weights=weights,
                  on_epoch=on_epoch)
        except TrainingDiverged as e:
            manifest.status, manifest.error = "diverged", str(e)
            manifest.outputs = [report_path]
            manifest.write(manifest_path(args.out_dir))
            print(f"error: {e}", file=sys.stderr)
            return EXIT_SOFTWARE
    ckpt.save(ckpt_path, net.state_dict(), {"config": cfg.to_dict(), "tool_version": __version__})
    manifest.write(manifest_path(args.out_dir))
    return EXIT_OK


def cmd_infer(args) -> int:
    net, _ = _load_network(args.checkpoint)
    cloud = read_cloud(args.input)
    if cloud.d_in != net.cfg.d_in:
        print(f"error: checkpoint expects {net.cfg.d_in} input channels, "
              f"{args.input} provides {cloud.d_in}", file=sys.stderr)
        return EXIT_DATA
    labels = net.predict(cloud)
    if args.out.lower().endswith(".csv"):
        with open(args.out, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["label"])
            w.writerows([[int(x)] for x in labels])
    else:
        with open(args.out, "wb") as f:
            f.write(serialize_kitti_labels(labels))
    RunManifest("infer", net.cfg.to_dict(), {"seed": net.cfg.seed}, [args.out], _now()).write(
        manifest_path(args.out))
    return EXIT_OK


def cmd_eval(args) -> int:
    net, _ = _load_network(args.checkpoint)
    scenes = _scenes_from_args(args, net.cfg.n_class, train_set=False)
    for s in scenes:
        if s.d_in != net.cfg.d_in:
            print(f"error: checkpoint expects {net.cfg.d_in} input channels, got {s.d_in}",
                  file=sys.stderr)
            return EXIT_DATA
    metrics = evaluate(net, scenes)
    with open(args.out, "w", encoding="utf-8") as f:
        json.dump(metrics.to_dict(), f, indent=2)
        f.write("\n")
    print(f"miou {metrics.miou:.4f}  oa {metrics.oa:.4f}  macc {metrics.macc:.4f}", file=sys.stderr)
    RunManifest("eval", net.cfg.to_dict(), {"seed": net.cfg.seed, "scene_seed": args.scene_seed},
                [args.out], _now()).write(manifest_path(args.out))
    return EXIT_OK


def cmd_ablate(args) -> int:
    if args.ablation not in ABLATIONS:
        raise UsageError(f"unknown ablation {args.ablation!r}; choose from {', '.join(ABLATIONS)}")
    base = _network_config(args)
    cfg = ablation_config(args.ablation, base)
    task = _task_from_args(args, cfg.n_class)
    train_set, heldout = task.datasets()
    net = build_network(cfg)
    train(net, train_set, args.epochs, AdamState(lr=args.lr))
    metrics = evaluate(net, heldout)
    new_file = not os.path.exists(args.out) or os.path.getsize(args.out) == 0
    with open(args.out, "a", encoding="utf-8", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new_file:
            w.writerow(["ablation", "seed", "epochs", "miou", "oa", "macc"])
        w.writerow([args.ablation, cfg.seed, args.epochs, f"{metrics.miou:.6f}",
                    f"{metrics.oa:.6f}", f"{metrics.macc:.6f}"])
    print(f"{args.ablation}: held-out miou {metrics.miou:.4f}", file=sys.stderr)
    RunManifest("ablate", {**cfg.to_dict(), "ablation": args.ablation, "epochs": args.epochs},
                {"seed": cfg.seed, "scene_seed": args.scene_seed}, [args.out], _now()).write(
        manifest_path(args.out))
    return EXIT_OK


def cmd_dump_attn(args) -> int:
    if args.checkpoint:
        net, _ = _load_network(args.checkpoint)
    else:
        net = build_network(_network_config(args))
    paths = dump_attention_matrix(net.attention_score_params(), args.out_dir)
    for p in paths:
        print(p)
    RunManifest("dump-attn", net.cfg.to_dict(), {"seed": net.cfg.seed}, paths, _now()).write(
        os.path.join(args.out_dir, "manifest.json"))
    return EXIT_OK


def cmd_gen_scene(args) -> int:
    spec = SceneSpec(args.n_points, args.n_class, extent=args.extent, noise_sigma=args.noise,
                     seed=args.seed)
    cloud = generate_scene(spec)
    outputs = [args.out]
    if args.out.lower().endswith(".bin"):
        with open(args.out, "wb") as f:
            f.write(serialize_kitti_bin(cloud))
        label_path = os.path.splitext(args.out)[0] + ".label"
        with open(label_path, "wb") as f:
            f.write(serialize_kitti_labels(cloud.labels))
        outputs.append(label_path)
    else:
        with open(args.out, "wb") as f:
            f.write(write_ply(cloud))
    RunManifest("gen-scene", dataclasses.asdict(spec), {"seed": args.seed}, outputs, _now()).write(
        manifest_path(args.out))
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _add_task_args(p):
    p.add_argument("--data", help="comma-separated labeled .ply files instead of synthetic scenes")
    p.add_argument("--n-points", type=int, default=4096)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--train-scenes", type=int, default=20)
    p.add_argument("--heldout-scenes", type=int, default=5)
    p.add_argument("--scene-seed", type=int, default=0,
                   help="first training scene seed; held-out scenes start at +1000")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pointseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("bench", help="time and memory of the samplers under a decimation plan")
    p.add_argument("--sizes", default="1000,10000,100000")
    p.add_argument("--methods", default="rs,fps,idis,crs")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--ratio", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--time-budget", type=float, default=DEFAULT_TIME_BUDGET)
    p.add_argument("--memory-budget", type=int, default=DEFAULT_MEMORY_BUDGET)
    p.add_argument("--fps-start", type=int, default=0)
    p.add_argument("--idis-t", type=int, default=DEFAULT_IDIS_T)
    p.add_argument("--idis-invert", action="store_true")
    p.add_argument("--crs-tau", type=float, default=1.0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("train", help="train on synthetic scenes or labeled files")
    p.add_argument("--config")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--class-weights", action="store_true", help="inverse-frequency loss weights")
    _add_task_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="label every point of a cloud")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True, help=".csv or KITTI .label output")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="segmentation metrics on held-out scenes or labeled files")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    _add_task_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train one ablated variant and append its score")
    p.add_argument("ablation")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--seed", type=int)
    p.add_argument("--lr", type=float, default=0.01)
    _add_task_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-attn", help="write attention-score matrices as CSV")
    p.add_argument("--checkpoint")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("gen-scene", help="write a synthetic labeled scene (.ply or KITTI .bin)")
    p.add_argument("--n-points", type=int, default=4096)
    p.add_argument("--n-class", type=int, default=3)
    p.add_argument("--extent", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_scene)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"pointseg: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NOINPUT
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SOFTWARE
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NOINPUT
    except (ParseError, FormatError, UnsupportedFormatError, DataError, ArgumentError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except PointSegError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_SOFTWARE


if __name__ == "__main__":
    sys.exit(main())
