"""Train once, then report held-out MAE grouped into crowd-density bins.

    python3 scripts/density_levels.py --bins 5 --out runs/levels
"""

import argparse
from pathlib import Path

from hsrnet import TrainConfig, evaluate, synth_dataset, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--bins", type=int, default=5)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", default="runs/levels")
    args = ap.parse_args()

    train_set = synth_dataset(30, "sparse", args.seed) + synth_dataset(30, "dense", args.seed + 1)
    test_set = synth_dataset(20, "gradient", args.seed + 2) + synth_dataset(20, "dense", args.seed + 3)
    cfg = TrainConfig(lr=1e-3, epochs=args.epochs, seed=args.seed)
    res = train(cfg, train_set, out_dir=args.out)
    rep = evaluate(res.model, test_set, bins=args.bins)
    rep.write(Path(args.out) / "report.json")
    print(f"MAE {rep.mae:.3f}  MSE {rep.mse:.3f}  GAME " + " ".join(f"{g:.3f}" for g in rep.game))
    for i, b in enumerate(rep.bins):
        print(f"bin {i}: gt {b['gt_min']:6.1f}..{b['gt_max']:6.1f}  n {b['n']:3d}  mae {b['mae']:.3f}")


if __name__ == "__main__":
    main()
