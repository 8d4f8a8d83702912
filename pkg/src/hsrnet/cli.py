"""``hsrnet`` command line: make-gt, synth, train, eval, predict, ablate, inspect.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .autodiff.checkpoint import FormatError
from .autodiff.tensor import Tensor
from .data import PROFILES, Sample, load_dataset, save_dataset, synth_dataset
from .density import PYRAMID_SCALES, Adaptive, Fixed, PointAnnotations, make_density, make_pyramid
from .pipeline import (
    ABLATION_AXES,
    NonFiniteLoss,
    ablate,
    evaluate,
    load_checkpoint,
    load_config,
    pad16,
    train,
    write_ablation,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)  # partial flags are errors too
        super().__init__(*args, **kwargs)

    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def cmd_make_gt(args) -> int:
    if args.sigma is not None and (args.k is not None or args.beta is not None):
        raise UsageError("--sigma cannot be combined with --k/--beta")
    mode = Fixed(args.sigma) if args.sigma is not None else Adaptive(args.k or 3, args.beta or 0.3)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    images = fileio.list_images(args.images)
    for img in images:
        ann_path = Path(args.ann) / f"{img.stem}.csv"
        if not ann_path.exists():
            raise FileNotFoundError(f"missing annotation file: {ann_path}")
        w, h = fileio.image_size(img)
        d = make_density(PointAnnotations(fileio.read_points(ann_path), w, h), mode)
        fileio.write_dmap(out / f"{img.stem}.dmap", d)
        if args.pyramid:
            for scale, level in zip(PYRAMID_SCALES, make_pyramid(d).maps):
                fileio.write_dmap(out / f"{img.stem}.s{scale}.dmap", level)
    print(f"wrote {len(images)} density map(s) to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    save_dataset(synth_dataset(args.n, args.profile, args.seed), args.out)
    print(f"wrote {args.n} {args.profile} image(s) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    data = load_dataset(args.data)
    res = train(cfg, data, out_dir=args.out, resume=args.resume)
    last = res.history[-1] if res.history else None
    if last is not None:
        print(f"steps={res.adam.t} final_l0={last.l0:.6g} final_total={last.total:.6g}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, cfg = load_checkpoint(args.ckpt)
    rep = evaluate(model, load_dataset(args.data), bins=args.bins, k=cfg.k, beta=cfg.beta)
    rep.write(args.report)
    print(f"MAE={rep.mae:.4f} MSE={rep.mse:.4f} " + " ".join(f"GAME{i}={g:.4f}" for i, g in enumerate(rep.game)))
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _, _ = load_checkpoint(args.ckpt)
    img = fileio.read_image(args.image)
    s = Sample(img, PointAnnotations(np.zeros((0, 2)), img.shape[2], img.shape[1]))
    padded, _ = pad16(s)
    d0 = model(Tensor(padded[None])).d0.data[0, 0, :s.height, :s.width]
    fileio.write_dmap(args.out, d0)
    if args.heatmap:
        fileio.write_pgm_heatmap(args.heatmap, d0)
    print(f"{float(d0.sum(dtype=np.float64)):.2f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    rows = ablate(cfg, args.axis, load_dataset(args.data), bins=args.bins)
    write_ablation(args.report, rows)
    for r in rows:
        print(f"{r.name:<16} final_l0={r.final_l0:.6g} mae={r.report.mae:.4f} mse={r.report.mse:.4f}")
    return EXIT_OK


def cmd_inspect(args) -> int:
    model, adam, cfg = load_checkpoint(args.ckpt)
    total = 0
    for name, p in model.params.items():
        total += p.data.size
        print(f"{name:<32} {'x'.join(map(str, p.shape))}")
    print(f"parameters: {len(model.params)} tensors, {total} values")
    lams = model.lambdas()
    if lams is not None:
        print("lambda: " + " ".join(f"{v:.6f}" for v in lams))
    if adam is not None:
        print(f"adam step: {adam.t}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hsrnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("make-gt", help="density maps from dot annotations")
    g.add_argument("--images", required=True)
    g.add_argument("--ann", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--k", type=int)
    g.add_argument("--beta", type=float)
    g.add_argument("--sigma", type=float)
    g.add_argument("--pyramid", action="store_true")
    g.set_defaults(func=cmd_make_gt)

    s = sub.add_parser("synth", help="generate a synthetic crowd dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--profile", choices=PROFILES, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train from a key = value config")
    t.add_argument("--config", required=True)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="MAE / MSE / GAME on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--bins", type=int, default=5)
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("predict", help="density map and count for one image")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--heatmap")
    r.set_defaults(func=cmd_predict)

    a = sub.add_parser("ablate", help="architecture / ratio / SFM-order sweeps")
    a.add_argument("--config", required=True)
    a.add_argument("--axis", choices=ABLATION_AXES, required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--report", required=True)
    a.add_argument("--bins", type=int, default=5)
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", help="list checkpoint parameters and lambda values")
    i.add_argument("--ckpt", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except UsageError as e:
        print(f"hsrnet: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteLoss as e:
        print(f"hsrnet: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, fileio.DataFormatError, FormatError, ValueError, KeyError) as e:
        print(f"hsrnet: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
