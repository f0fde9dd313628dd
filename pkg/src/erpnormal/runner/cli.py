"""Command-line entry point: ``erpnormal <subcommand> ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .. import fileio
from ..d2n import D2NConfig, depth_to_normal
from ..sphere_geom import ErpGridSpec
from ..synthdata import make_dataset


def _cmd_gen(args):
    path = make_dataset(args.n, args.seed, ErpGridSpec.from_height(args.height), args.out,
                        invalid_fraction=args.invalid_fraction)
    print(f"wrote {path}")


def _cmd_train(args):
    from .config import load_config
    from .trainer import train

    cfg = load_config(args.config)
    result = train(cfg)
    print(f"stopped ({result.stop_reason}); final validation:")
    print(result.final_report.pretty("final"))
    print(f"checkpoint: {result.last_checkpoint}")


def _cmd_eval(args):
    from .evaluate import evaluate

    report = evaluate(args.ckpt, args.data, args.out, split=args.split)
    print(report.pretty(Path(args.ckpt).stem))


def _cmd_predict(args):
    from .evaluate import predict

    normal, vis = predict(args.ckpt, args.image, args.out)
    print(f"wrote {normal} and {vis}")


def _cmd_d2n(args):
    depth = fileio.read_depth(args.depth)
    H, W = depth.shape
    cfg = D2NConfig(num_triangles=args.triangles, neighborhood_radius=args.radius, seed=args.seed)
    normal, valid = depth_to_normal(depth, ErpGridSpec(H, W), cfg)
    out = Path(args.out)
    if out.suffix.lower() != ".png":
        out.mkdir(parents=True, exist_ok=True)
        fileio.write_mask(out / "mask.png", valid)
        out = out / "normal.png"
    fileio.write_normal16(out, normal)
    print(f"wrote {out} ({100 * valid.mean():.2f}% valid)")


def _cmd_gradcheck(args):
    from .config import load_config
    from .gradcheck import gradcheck

    cfg = load_config(args.config)
    report = gradcheck(cfg.model, cfg.loss, seed=cfg.seed, scales=cfg.supervised_scales)
    print(report.format())
    return 0 if report.passed() else 1


def _cmd_ablate(args):
    from .ablate import ablate, ablation_table
    from .config import load_config

    cfg = load_config(args.config)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    rows = ablate(cfg, variants, out_dir=args.out)
    print(ablation_table(rows))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="erpnormal", description="Panoramic surface-normal estimation toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log every training step to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen", help="render a synthetic dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--height", type=int, default=64)
    s.add_argument("--out", required=True)
    s.add_argument("--invalid-fraction", type=float, default=0.0)
    s.set_defaults(func=_cmd_gen)

    s = sub.add_parser("train", help="train from a config file")
    s.add_argument("--config", required=True)
    s.set_defaults(func=_cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint and write a CSV report")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--split", default="test")
    s.set_defaults(func=_cmd_eval)

    s = sub.add_parser("predict", help="predict normals for one panorama")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--image", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=_cmd_predict)

    s = sub.add_parser("d2n", help="convert a depth.bin into a normal map")
    s.add_argument("--depth", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--triangles", type=int, default=D2NConfig.num_triangles)
    s.add_argument("--radius", type=int, default=D2NConfig.neighborhood_radius)
    s.add_argument("--seed", type=int, default=D2NConfig.seed)
    s.set_defaults(func=_cmd_d2n)

    s = sub.add_parser("gradcheck", help="finite-difference check of every parameter group")
    s.add_argument("--config", required=True)
    s.set_defaults(func=_cmd_gradcheck)

    s = sub.add_parser("ablate", help="train and compare ablation variants")
    s.add_argument("--config", required=True)
    s.add_argument("--variants", default="baseline,+decoder,+decoder+embed")
    s.add_argument("--out", default=None)
    s.set_defaults(func=_cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = logging.StreamHandler()
    handler.setLevel(logging.INFO if args.verbose else logging.WARNING)
    handler.setFormatter(logging.Formatter("%(message)s"))
    logging.getLogger("erpnormal").addHandler(handler)
    try:
        return args.func(args) or 0
    except (OSError, ValueError, KeyError, FloatingPointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
