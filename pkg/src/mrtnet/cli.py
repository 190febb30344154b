"""Command-line entry point: ``mrtnet <command> [options]``.

Every RunConfig field is available as ``--section.key VALUE`` on the
commands that take a configuration. Errors print a single line of the form
``error: <kind>: <message>`` to stderr and exit non-zero.
"""
from __future__ import annotations

import argparse
import sys
from dataclasses import fields
from typing import Optional, Sequence


from . import harness
from .config import SECTIONS, RunConfig
from .spatial import TREE_KINDS


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run manifest (sectioned key = value file)")
    group = p.add_argument_group("configuration overrides")
    for name, section in SECTIONS.items():
        for f in fields(section):
            group.add_argument(f"--{name}.{f.name}", dest=f"cfg:{name}.{f.name}", metavar=f.type.upper(),
                               help=f"[{name}] {f.name}")


def _config(args, task: Optional[str] = None) -> RunConfig:
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg:") and v is not None}
    if args.config:
        return RunConfig.load(args.config).with_overrides(overrides)
    task = overrides.pop("run.task", None) or task or "classifier"
    return RunConfig.for_task(task, **overrides)


def cmd_train(args) -> int:
    cfg = _config(args)
    res = harness.train(cfg)
    last = res.history[-1] if res.history else None
    print(f"checkpoint {res.checkpoint}")
    if last is not None:
        comps = " ".join(f"{k}={v:.6g}" for k, v in sorted(last.components.items()))
        print(f"epoch {last.epoch} loss={last.loss:.6g} {comps}")
    return 0


def cmd_eval(args) -> int:
    rep = harness.evaluate(args.checkpoint, tta=args.tta)
    print(rep.table, end="")
    return 0


def cmd_generate(args) -> int:
    for path in harness.generate(args.checkpoint, args.count, args.seed, args.out):
        print(path)
    return 0


def cmd_interpolate(args) -> int:
    a = harness.read_points(args.shape_a, args.points)
    b = harness.read_points(args.shape_b, args.points)
    _, dist = harness.interpolate(args.checkpoint, a, b, args.steps, args.out)
    print(harness.format_table(["step", "chamfer to step 0"], [[str(i), f"{d:.6f}"] for i, d in enumerate(dist)]),
          end="")
    return 0


def cmd_probe(args) -> int:
    cfg = _config(args, task="classifier") if (args.config or _has_overrides(args)) else None
    if cfg is not None and cfg.run.task != "classifier":
        cfg = cfg.with_overrides({"run.task": "classifier"})
    rows = harness.probe(args.checkpoint, cfg, epochs=args.epochs)
    print(harness.probe_table(rows), end="")
    return 0


def cmd_ablate(args) -> int:
    cfg = _config(args)
    rows = harness.ablate(cfg, args.variants, args.out)
    print(harness.ablation_table(rows), end="")
    return 0


def cmd_sort_dump(args) -> int:
    pts = harness.read_points(args.input, args.points, args.seed)
    harness.sort_dump(pts, args.tree, args.seed, args.out)
    print(args.out)
    return 0


def _has_overrides(args) -> bool:
    return any(k.startswith("cfg:") and v is not None for k, v in vars(args).items())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mrtnet", description="Multiresolution tree networks for point clouds")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a classifier, vae or segmenter")
    _add_config_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on its test split")
    p.add_argument("checkpoint")
    p.add_argument("--tta", type=int, default=None, help="test-time versions (default: manifest value)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("generate", help="decode random latent codes to XYZ files")
    p.add_argument("checkpoint")
    p.add_argument("--count", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="generated")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("interpolate", help="decode a linear path between two encodings")
    p.add_argument("checkpoint")
    p.add_argument("shape_a", help="XYZ file or OFF/OBJ mesh")
    p.add_argument("shape_b", help="XYZ file or OFF/OBJ mesh")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--points", type=int, default=None, help="surface samples when a mesh is given")
    p.add_argument("--out", default="interpolation")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("probe", help="linear probe on frozen vae-encoder features")
    p.add_argument("checkpoint")
    p.add_argument("--epochs", type=int, default=30)
    _add_config_flags(p)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", help="train variants with shared seeds and compare")
    p.add_argument("--variants", nargs="+", default=["full", "single-res"], choices=harness.ABLATION_VARIANTS)
    p.add_argument("--out", default=None)
    _add_config_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sort-dump", help="write a spatially sorted cloud as index-annotated XYZ")
    p.add_argument("input", help="XYZ file or OFF/OBJ mesh")
    p.add_argument("out")
    p.add_argument("--tree", choices=TREE_KINDS, default="kd")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--points", type=int, default=None, help="surface samples when a mesh is given")
    p.set_defaults(func=cmd_sort_dump)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, RuntimeError) as exc:
        message = " ".join(str(exc).split())
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
