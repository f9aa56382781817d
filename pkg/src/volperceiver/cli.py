"""Command-line entry point.

Exit codes: 0 success, 1 validation failure (bad input, failed check),
2 runtime error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("volperceiver")


class ValidationError(Exception):
    """Bad user input; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    from .train import TrainConfig
    p.add_argument("--config", type=Path, help="key = value config file; flags override it")
    group = p.add_argument_group("config fields")
    for f in dataclasses.fields(TrainConfig):
        kind = {"int": int, "float": float}.get(f.type, str)
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=kind, default=None,
                           help=f"(default {f.default!r})")


def _config_from_args(args):
    from .train import TrainConfig
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    overrides = {f.name: getattr(args, f.name) for f in dataclasses.fields(TrainConfig)
                 if getattr(args, f.name, None) is not None}
    return config.replace(**overrides) if overrides else config


def cmd_prepare_data(args) -> int:
    from .data import SplitSpec, convert_images, synth_dataset, write_mmrt
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.top:
        if not args.dsm or not args.scene_id:
            raise ValidationError("converting real imagery needs --top, --dsm and --scene-id")
        scene = convert_images(args.scene_id, args.top, args.dsm, args.bands.split(","), args.labels)
        write_mmrt(out / f"{scene.scene_id}.mmrt", scene)
        print(f"wrote {out / (scene.scene_id + '.mmrt')}")
        return EXIT_OK
    total = args.train + args.val + args.test
    if total <= 0:
        raise ValidationError("need at least one scene")
    scenes = synth_dataset(args.seed, total, args.size)
    for scene in scenes:
        write_mmrt(out / f"{scene.scene_id}.mmrt", scene)
    ids = [s.scene_id for s in scenes]
    a, b = args.train, args.train + args.val
    (out / "split.txt").write_text(SplitSpec(ids[:a], ids[a:b], ids[b:]).dump())
    print(f"wrote {len(scenes)} scenes and split.txt to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .plotting import plot_loss_curve
    from .train import train
    config = _config_from_args(args)
    record, _ = train(config, run_dir=args.out, evaluate_splits=("train", "val", "test"))
    plot_loss_curve(record.losses, Path(args.out) / "loss_curve.png")
    print(f"config hash {record.config_hash}")
    print(f"final loss {record.losses[-1]:.6f} after {len(record.losses)} steps in {record.wall_time:.1f}s")
    for split, report in record.reports.items():
        print(f"{split}: mean F1 {report.mean_f1:.4f} mIoU {report.miou:.4f} AA {report.aa:.4f}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .train import evaluate
    out = Path(args.out) if args.out else Path(args.run_dir) / f"eval_{args.split}"
    report = evaluate(args.run_dir, args.split, out, previews=args.previews)
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data import read_mmrt, stack_modalities
    from .train import TrainConfig, CONFIG_NAME, predict_tile
    config = TrainConfig.load(Path(args.run_dir) / CONFIG_NAME)
    scene = read_mmrt(args.tile)
    try:
        features = stack_modalities(scene, config.recipe)
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"{args.tile}: {exc}") from exc
    if features.shape[1:] != (config.tile_size, config.tile_size):
        raise ValidationError(f"tile is {features.shape[1]}x{features.shape[2]}, "
                              f"model expects {config.tile_size}x{config.tile_size}")
    stem = Path(args.out) if args.out else Path(args.tile).with_suffix("")
    mask = predict_tile(args.run_dir, features, stem)
    counts = np.bincount(mask.reshape(-1), minlength=config.num_classes)
    print(f"wrote {stem}.pgm and {stem}.ppm; pixels per class: {counts.tolist()}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .plotting import plot_comparison
    from .train import compare_preprocessors, comparison_csv
    config = _config_from_args(args)
    kinds = [k.strip() for k in args.kinds.split(",") if k.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    rows = compare_preprocessors(config, kinds, seeds, small_class=args.small_class, split=args.split)
    text = comparison_csv(rows, args.small_class)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(text)
    plot_comparison(rows, out / "comparison.png", args.small_class)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradchecks import run_scope
    try:
        results = run_scope(args.scope, seed=args.seed)
    except KeyError as exc:
        raise ValidationError(exc.args[0]) from exc
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_INVALID


def cmd_class_stats(args) -> int:
    from .plotting import plot_class_proportions
    from .train import class_stats, class_stats_csv
    config = _config_from_args(args)
    stats = class_stats(config)
    text = class_stats_csv(stats, config.class_names)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "class_stats.csv").write_text(text)
        plot_class_proportions(stats, config.class_names, out / "class_proportions.png")
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="volperceiver", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("prepare-data", help="write synthetic scenes (or convert imagery) to MMRT")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--train", type=int, default=8)
    p.add_argument("--val", type=int, default=0)
    p.add_argument("--test", type=int, default=4)
    p.add_argument("--top", help="orthophoto to convert instead of generating scenes")
    p.add_argument("--dsm")
    p.add_argument("--labels")
    p.add_argument("--scene-id")
    p.add_argument("--bands", default="IR,R,G", help="orthophoto channel names in file order")
    p.set_defaults(func=cmd_prepare_data)

    p = sub.add_parser("train", help="train a model and write a run directory")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="metrics CSV and colour previews for a saved run")
    p.add_argument("run_dir")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out")
    p.add_argument("--previews", type=int, default=4)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="segment one MMRT tile into PGM + PPM")
    p.add_argument("run_dir")
    p.add_argument("tile")
    p.add_argument("--out", help="output stem (default: next to the tile)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("compare-preprocessors", help="train several preprocessors over seeds and rank them")
    _add_config_flags(p)
    p.add_argument("--kinds", default="identity,single_conv2d,unet2d,unet3d")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--small-class", default="car")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--scope", default="all", help="op name, attention, end-to-end or all")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("class-stats", help="per-split class proportions")
    _add_config_flags(p)
    p.add_argument("--out")
    p.set_defaults(func=cmd_class_stats)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - top-level guard
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
