"""Command-line entry point: ``polypnet {train,infer,eval,bench,gradcheck,synth}``.

Exit status is 0 on success, 1 on data or contract errors and 2 on usage
errors.
"""
from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

import numpy as np

from . import data_io
from .bench import run_benchmark
from .errors import PolypNetError
from .gradcheck import run_gradcheck
from .metrics import DEFAULT_THRESHOLD
from .model import load_weights, save_weights
from .train_eval import TrainConfig, evaluate, predict_mask, train

log = logging.getLogger("polypnet")


def _threshold(text: str) -> float:
    v = float(text)
    if not 0.0 < v < 1.0:
        raise argparse.ArgumentTypeError(f"threshold must lie in (0, 1), got {text}")
    return v


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="polypnet", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a manifest and write PFW1 weights")
    p.add_argument("--manifest", required=True)
    p.add_argument("--epochs", type=_positive, default=200)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=_positive, default=2)
    p.add_argument("--size", type=_positive, default=512)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--loss-log")

    p = sub.add_parser("infer", help="predict a binary mask for one image")
    p.add_argument("--weights", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=_threshold, default=DEFAULT_THRESHOLD)
    p.add_argument("--overlay")
    p.add_argument("--size", type=_positive, default=512, help="model input resolution")

    p = sub.add_parser("eval", help="score a manifest and write the metrics CSV")
    p.add_argument("--weights", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--threshold", type=_threshold, default=DEFAULT_THRESHOLD)
    p.add_argument("--micro", action="store_true", help="also write a pooled-pixel MICRO row")
    p.add_argument("--size", type=_positive, default=512, help="model input resolution")

    p = sub.add_parser("bench", help="measure batch-1 forward throughput")
    p.add_argument("--weights", required=True)
    p.add_argument("--size", type=_positive, default=512)
    p.add_argument("--iters", type=_positive, default=100)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--workers", type=_positive)
    p.add_argument("--csv", help="also write the machine-readable report here")

    p = sub.add_parser("gradcheck", help="finite-difference check of every kernel")
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("synth", help="write a synthetic dataset and manifest")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--size", type=_positive, default=64)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--out-dir", required=True)
    return parser


def overlay(img: data_io.ImageBuffer, mask: np.ndarray) -> data_io.ImageBuffer:
    """Blend mask-positive pixels halfway towards pure red."""
    rgb = img.pixels if img.channels == 3 else np.repeat(img.pixels, 3, axis=2)
    px = rgb.astype(np.int32)
    tinted = np.stack([(px[..., 0] + 256) // 2, (px[..., 1] + 1) // 2, (px[..., 2] + 1) // 2], axis=-1)
    out = np.where(mask[..., None] > 0, tinted, px)
    return data_io.ImageBuffer(out.astype(np.uint8))


def cmd_train(args) -> int:
    cfg = TrainConfig(epochs=args.epochs, batch_size=args.batch, lr=args.lr, seed=args.seed, input_size=args.size)
    result = train(cfg, data_io.load_manifest(args.manifest), loss_log=args.loss_log)
    save_weights(result.params, args.out)
    print(f"trained {cfg.epochs} epochs, final loss {result.losses[-1]:.6f} -> {args.out}")
    return 0


def cmd_infer(args) -> int:
    params = load_weights(args.weights, args.size)
    img = data_io.read_pnm(args.image)
    mask = predict_mask(params, img, args.threshold, args.size)
    data_io.write_pnm(data_io.mask_to_image(mask), args.out)
    if args.overlay:
        data_io.write_pnm(overlay(img, mask), args.overlay)
    print(f"{args.out}: {int(mask.sum())} of {mask.size} pixels positive")
    return 0


def cmd_eval(args) -> int:
    params = load_weights(args.weights, args.size)
    res = evaluate(params, data_io.load_manifest(args.manifest), args.threshold,
                   size=args.size, report_path=args.report, micro=args.micro)
    m = res.mean
    print(f"{len(res.rows)} images  mIoU {m.miou:.4f}  DSC {m.dsc:.4f}  Recall {m.recall:.4f}  "
          f"Prec. {m.precision:.4f}  Acc. {m.accuracy:.4f}  F2 {m.f2:.4f}")
    return 0


def cmd_bench(args) -> int:
    if args.warmup < 0:
        raise PolypNetError(f"warmup must be >= 0, got {args.warmup}")
    params = load_weights(args.weights, args.size)
    report = run_benchmark(params, args.size, args.iters, args.warmup, args.workers)
    print(report.text())
    if args.csv:
        report.write_csv(args.csv)
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.eps, args.tol, args.seed)
    for r in results:
        extra = f" ({r.skipped} kink-straddling elements skipped)" if r.skipped else ""
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:28s} max rel err {r.error:.3e}{extra}")
    ok = all(r.passed for r in results)
    print(f"{sum(r.passed for r in results)}/{len(results)} checks passed")
    return 0 if ok else 1


def cmd_synth(args) -> int:
    manifest = data_io.gen_synthetic(args.n, args.size, args.seed, args.out_dir)
    print(f"wrote {len(manifest)} samples to {args.out_dir}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "synth": cmd_synth,
}


def dispatch(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (PolypNetError, OSError) as e:
        print(f"polypnet {args.command}: error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
