"""Command-line entry point: ``lcnerf {train,eval,render,bench,make-fixture}``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from ..errors import ConfigError, DatasetError, DivergenceError, DomainError, SpecError, StateError
from ..imaging import write_png
from ..rays import CameraModel
from .bench import benchmark, load_matrix
from .config import _SECTIONS, RunConfig, load_config
from .data import _checked_pose, load_synthetic_dataset
from .fixtures import SCENES, make_fixture
from .train import evaluate, load_run, render_view, resolve_box, run_training

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
_KNOWN_ERRORS = (ConfigError, DatasetError, DivergenceError, DomainError, SpecError, StateError)


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run-config TOML; flags below override it")
    for sec_name, cls in _SECTIONS.items():
        group = p.add_argument_group(f"[{sec_name}]")
        for f in dataclasses.fields(cls):
            group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}",
                               default=None, metavar=type(f.default).__name__
                               if f.default is not dataclasses.MISSING else "list")


def config_from_args(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_") and v is not None}
    return cfg.with_overrides(overrides) if overrides else cfg


def _load_data(cfg: RunConfig, dataset: str | None = None):
    path = dataset or cfg.run.dataset
    if not path:
        raise ConfigError("no dataset given (set run.dataset or pass --dataset)")
    return load_synthetic_dataset(path, cfg.run.downsample, cfg.depth.keypoints or None)


def _fmt_row(row) -> str:
    return (f"{row.label} it={row.iteration} {row.seconds:.2f}s "
            f"train={row.train_psnr:.2f}dB test={row.test_psnr:.2f}dB")


def cmd_train(args) -> int:
    cfg = config_from_args(args)
    data = _load_data(cfg)
    out = Path(args.out or cfg.run.output_dir)
    result = run_training(cfg, data, out)
    for row in result.metrics:
        print(_fmt_row(row))
    print(f"wrote {out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg, _, _ = load_run(args.run)
    data = load_synthetic_dataset(args.dataset or cfg.run.dataset, cfg.run.downsample)
    res = evaluate(args.run, data, args.split, args.out)
    views = data.splits[args.split]
    for view, score in zip(views, res.per_view):
        print(f"{args.split}/{view.name}: {score:.3f} dB")
    print(f"mean: {res.mean_psnr:.3f} dB")
    return EXIT_OK


def _poses_from_manifest(path: Path, width: int, height: int) -> list[tuple[str, CameraModel]]:
    meta = json.loads(path.read_text())
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise DatasetError(f"{path}: needs camera_angle_x and frames")
    fx = 0.5 * width / math.tan(0.5 * float(meta["camera_angle_x"]))
    out = []
    for i, fr in enumerate(meta["frames"]):
        pose = _checked_pose(fr["transform_matrix"], f"{path}:{i}")
        name = Path(fr.get("file_path", f"view_{i}")).name or f"view_{i}"
        out.append((name, CameraModel.from_matrix(pose, width, height, fx)))
    return out


def cmd_render(args) -> int:
    """Render camera poses from a manifest at the run's training resolution."""
    cfg, fld, meta = load_run(args.run)
    w, h = meta["train_resolution"]
    box = resolve_box(cfg)
    out = Path(args.out)
    for name, cam in _poses_from_manifest(Path(args.poses), w, h):
        rgb, depth, _ = render_view(fld, cam, cfg, box, meta["white_background"])
        write_png(rgb, out / f"{name}.png")
        write_png(np.clip(depth / cfg.sampler.far, 0.0, 1.0), out / f"{name}_depth.png")
        np.save(out / f"{name}_depth.npy", depth)
        print(f"rendered {name}")
    return EXIT_OK


def cmd_bench(args) -> int:
    matrix = load_matrix(args.matrix)
    res = benchmark(matrix, args.out, workers=args.workers)
    for row in res.rows:
        print(_fmt_row(row))
    for label, err in res.failures.items():
        print(f"FAILED {label}: {err}", file=sys.stderr)
    print(f"wrote {res.csv_path}")
    return EXIT_OK if res.ok else EXIT_FAILED


def cmd_make_fixture(args) -> int:
    out = make_fixture(args.out, args.scene, args.n_train, args.n_test, args.n_val, args.size,
                       args.keypoint_fraction, args.seed)
    print(f"wrote {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lcnerf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("train", help="train one config and write a run directory")
    _add_config_flags(p)
    p.add_argument("--out", help="run directory (default: run.output_dir)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="render and score a split with a trained run")
    p.add_argument("--run", required=True, help="run directory written by 'train'")
    p.add_argument("--dataset", help="dataset directory (default: the run's dataset)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="write RGB and depth images here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="render poses from a camera manifest")
    p.add_argument("--run", required=True)
    p.add_argument("--poses", required=True, help="transforms-style JSON with camera_angle_x")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("bench", help="run a config matrix and write bench.csv")
    p.add_argument("--matrix", required=True, help="matrix TOML")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=0, help="run configs in N processes")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("make-fixture", help="render an analytic toy scene to disk")
    p.add_argument("--out", required=True)
    p.add_argument("--scene", default="spheres", choices=sorted(SCENES))
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=2)
    p.add_argument("--n-val", type=int, default=1)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--keypoint-fraction", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _KNOWN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
