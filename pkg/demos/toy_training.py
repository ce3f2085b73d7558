"""Train the toy-sized model on synthetic textures and compare against the initialization.

The default run (200 steps) takes about four minutes on one core.

    python3 demos/toy_training.py [--steps 200] [--sr 0.25]
"""

import argparse
import time

import numpy as np

from ics.data import synthetic_images
from ics.metrics import psnr
from ics.model import ModelConfig, init_params, parameter_count
from ics.train import evaluate, train_toy

ap = argparse.ArgumentParser()
ap.add_argument("--steps", type=int, default=200)
ap.add_argument("--sr", type=float, default=0.25)
ap.add_argument("--lr", type=float, default=1e-3)
args = ap.parse_args()

cfg = ModelConfig.toy()
images = synthetic_images(16, 64, seed=0)
params = init_params(cfg, 0)
print(f"toy model: {parameter_count(params):,} parameters")
before, _, _ = evaluate(images, params, cfg, args.sr)

t0 = time.perf_counter()
res = train_toy(images, cfg, steps=args.steps, sr_t=args.sr, lr=args.lr)
for k in range(0, args.steps, max(1, args.steps // 10)):
    t = res.trace[k]
    print(f"step {k:4d}  L1 {t.l1:10.3f}  L2 {t.l2:10.3f}  L3 {t.l3:10.3f}  total {t.total:10.3f}")
after, recon, init = evaluate(images, res.params, cfg, args.sr)

mean_psnr = lambda xs: np.mean([psnr(a, b) for a, b in zip(xs, images)])  # noqa: E731
print(f"dataset loss {before.total:.2f} -> {after.total:.3f} in {time.perf_counter() - t0:.0f}s")
print(f"PSNR: reconstruction {mean_psnr(recon):.2f} dB, initialization {mean_psnr(init):.2f} dB")
