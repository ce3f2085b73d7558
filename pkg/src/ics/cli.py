"""Command-line entry point: ``ics <subcommand> [flags]``."""

from __future__ import annotations

import argparse
import csv
import io as _io
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import io
from .autodiff import ContractError, DimensionError, Tensor
from .data import synthetic_images
from .ista import ista_reconstruct
from .metrics import psnr, ssim
from .model import ModelConfig, UformerICS, init_params, initialize_image
from .sampling import MeasurementMatrix, MeasurementSet, SamplingConfig, random_measurement_matrix
from .sparsity import ESTIMATORS, adaptive_measure
from .train import train_toy

COMMANDS = ("sample", "reconstruct-ista", "infer", "init-recon", "alloc-map", "train-toy", "gradcheck", "metrics")


class CliError(Exception):
    pass


def _config(args) -> ModelConfig:
    if getattr(args, "config", None):
        return ModelConfig.from_json(Path(args.config).read_text())
    weights = getattr(args, "weights", None)
    if weights and Path(weights).with_suffix(".json").exists():
        return ModelConfig.from_json(Path(weights).with_suffix(".json").read_text())
    return ModelConfig()


def _matrix(args, B: int) -> MeasurementMatrix:
    if args.weights:
        arch = io.load_archive(args.weights)
        return MeasurementMatrix(phi=arch["phi"], psi=arch["psi"])
    return random_measurement_matrix(B, seed=args.seed, mode=args.matrix)


def _measure_input(args, mm: MeasurementMatrix, B: int) -> tuple[MeasurementSet, Optional[tuple[int, int]]]:
    """Measurements from an .icsm file, or from sampling an image (returns its original size)."""
    path = Path(args.input)
    if path.read_bytes()[:4] == io.ICSM_MAGIC:
        return io.load_measurements(path), None
    img, size = io.pad_to_multiple(io.load_image(path), 32)
    cfg = SamplingConfig(sr_t=args.sr, B=B, seed=args.seed)
    Y, _, _ = adaptive_measure(img, mm, cfg, args.estimator)
    return Y, size


def _finish_image(img: np.ndarray, size, out: str) -> None:
    if size is not None:
        img = io.crop_to_size(img, size)
    io.save_pgm(out, img)


def cmd_sample(args) -> None:
    mm = _matrix(args, args.block)
    img, _ = io.pad_to_multiple(io.load_image(args.input), 32)
    cfg = SamplingConfig(sr_t=args.sr, B=mm.B, seed=args.seed)
    Y, _, _ = adaptive_measure(img, mm, cfg, args.estimator)
    io.save_measurements(args.out, Y)


def cmd_reconstruct_ista(args) -> None:
    mm = _matrix(args, args.block)
    Y, size = _measure_input(args, mm, mm.B)
    _finish_image(ista_reconstruct(Y, mm, args.iters, args.threshold), size, args.out)


def cmd_init_recon(args) -> None:
    mm = _matrix(args, args.block)
    Y, size = _measure_input(args, mm, mm.B)
    _finish_image(initialize_image(Y, mm), size, args.out)


def _load_model(args) -> UformerICS:
    cfg = _config(args)
    params = init_params(cfg, args.seed)
    if args.weights:
        for name, arr in io.load_archive(args.weights).items():
            if name not in params or params[name].shape != arr.shape:
                raise CliError(f"weight {name!r} does not fit the model configuration")
            params[name] = Tensor(arr, requires_grad=True)
    return UformerICS(cfg, params)


def cmd_infer(args) -> None:
    model = _load_model(args)
    Y, size = _measure_input(args, model.matrix, model.cfg.B)
    _finish_image(model.reconstruct(Y), size, args.out)


def cmd_alloc_map(args) -> None:
    mm = _matrix(args, args.block)
    img, _ = io.pad_to_multiple(io.load_image(args.input), 32)
    cfg = SamplingConfig(sr_t=args.sr, B=mm.B, seed=args.seed)
    _, alloc, _ = adaptive_measure(img, mm, cfg, args.estimator)
    with open(args.out, "w", newline="") as fh:
        csv.writer(fh, lineterminator="\n").writerows(alloc.m.tolist())
    if args.heatmap:
        m = alloc.m.astype(np.float64)
        span = m.max() - m.min()
        scaled = (m - m.min()) / span if span else np.zeros_like(m)
        io.save_pgm(args.heatmap, scaled)


def cmd_train_toy(args) -> None:
    cfg = ModelConfig.from_json(Path(args.config).read_text()) if args.config else ModelConfig.toy()
    images = synthetic_images(args.images, args.size, args.seed)
    res = train_toy(images, cfg, steps=args.steps, seed=args.seed, sr_t=args.sr, lr=args.lr, batch_size=args.batch, estimator=args.estimator)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "L1", "L2", "L3", "total"])
        for k, t in enumerate(res.trace):
            w.writerow([k, repr(t.l1), repr(t.l2), repr(t.l3), repr(t.total)])
    if args.weights_out:
        io.save_archive(args.weights_out, {k: p.data for k, p in res.params.items()})
        Path(args.weights_out).with_suffix(".json").write_text(cfg.to_json())


def cmd_gradcheck(args) -> int:
    from .checks import gradient_suite

    ok = True
    print("check,max_rel_err,tolerance,pass")
    for name, (err, tol) in gradient_suite(args.seed, end_to_end=not args.quick).items():
        passed = err < tol
        ok &= passed
        print(f"{name},{err:.3e},{tol:g},{'pass' if passed else 'FAIL'}")
    return 0 if ok else 1


def _fmt(v: float) -> str:
    return "inf" if np.isinf(v) else f"{v:.6f}"


def cmd_metrics(args) -> None:
    if len(args.ref) != len(args.test):
        raise CliError("--ref and --test need the same number of files")
    threads = max(1, int(os.environ.get("ICS_THREADS", "1")))

    def score(pair):
        a, b = io.load_image(pair[0]), io.load_image(pair[1])
        return psnr(a, b, args.peak), ssim(a, b)

    with ThreadPoolExecutor(max_workers=threads) as pool:
        scores = list(pool.map(score, zip(args.ref, args.test)))
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["image", "psnr", "ssim"])
    for path, (p, s) in zip(args.test, scores):
        w.writerow([path, _fmt(p), _fmt(s)])
    ps, ss = zip(*scores)
    w.writerow(["mean", _fmt(float(np.mean(ps))), _fmt(float(np.mean(ss)))])
    sys.stdout.write(buf.getvalue())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ics", description="Adaptive block compressive sensing toolkit.")
    sub = parser.add_subparsers(dest="command", required=True)

    def shared(p, sampling=True):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--weights", help="ICST archive holding phi/psi (and model weights)")
        p.add_argument("--config", help="model configuration JSON")
        p.add_argument("--out", required=True)
        if sampling:
            p.add_argument("--in", dest="input", required=True)
            p.add_argument("--sr", type=float, default=0.1)
            p.add_argument("--estimator", choices=ESTIMATORS, default="sm")
            p.add_argument("--matrix", choices=("orthonormal", "gaussian"), default="orthonormal")
            p.add_argument("--block", type=int, default=32)

    shared(sub.add_parser("sample", help="adaptively sample an image into an ICSM file"))
    p = sub.add_parser("reconstruct-ista", help="training-free reconstruction")
    shared(p)
    p.add_argument("--iters", type=int, default=200)
    p.add_argument("--threshold", type=float, default=0.03)
    shared(sub.add_parser("infer", help="reconstruct with the network"))
    shared(sub.add_parser("init-recon", help="linear-mapping initialization only"))
    p = sub.add_parser("alloc-map", help="per-block measurement counts as CSV")
    shared(p)
    p.add_argument("--heatmap", help="also write an 8-bit PGM heatmap here")

    p = sub.add_parser("train-toy", help="train the toy network on synthetic images")
    shared(p, sampling=False)
    p.add_argument("--sr", type=float, default=0.25)
    p.add_argument("--estimator", choices=ESTIMATORS, default="sm")
    p.add_argument("--images", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--weights-out", dest="weights_out")

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--quick", action="store_true", help="skip the end-to-end check")

    p = sub.add_parser("metrics", help="PSNR/SSIM of test images against references")
    p.add_argument("--ref", nargs="+", required=True)
    p.add_argument("--test", nargs="+", required=True)
    p.add_argument("--peak", type=float, default=1.0)
    return parser


HANDLERS = {
    "sample": cmd_sample,
    "reconstruct-ista": cmd_reconstruct_ista,
    "infer": cmd_infer,
    "init-recon": cmd_init_recon,
    "alloc-map": cmd_alloc_map,
    "train-toy": cmd_train_toy,
    "gradcheck": cmd_gradcheck,
    "metrics": cmd_metrics,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        rc = HANDLERS[args.command](args)
    except (CliError, ContractError, DimensionError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(f"ics {args.command}: {msg}", file=sys.stderr)
        return 1
    return rc or 0


if __name__ == "__main__":
    sys.exit(main())
