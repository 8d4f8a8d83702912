"""Drive a desk-scale model to memorise one synthetic scene.

    python3 scripts/overfit_demo.py --seed 0 --steps 500
"""

import argparse
import time

import numpy as np

from hsrnet import TrainConfig, synth_dataset, train
from hsrnet.autodiff import Tensor


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=500)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--profile", default="sparse")
    args = ap.parse_args()

    sample = synth_dataset(1, args.profile, seed=args.seed)
    cfg = TrainConfig(lr=args.lr, epochs=args.steps, seed=args.seed).with_model(seed=args.seed)

    def log(step, br):
        if step == 1 or step % 50 == 0:
            print(f"step {step:4d}  l0 {br.l0:.3e}  total {br.total:.3e}")

    t0 = time.perf_counter()
    res = train(cfg, sample, on_step=log)
    pred = float(res.model(Tensor(sample[0].image[None])).d0.data.sum(dtype=np.float64))
    drop = res.history[0].l0 / res.history[-1].l0
    print(f"l0 drop {drop:.1f}x, count {pred:.2f} vs {sample[0].count}, {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
