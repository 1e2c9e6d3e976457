#!/usr/bin/env python3
"""Full-scale training run on an annotated two-photon stack.

This is the long-schedule experiment, not part of the test suite: with the
default 100-epoch exploration phase it takes hours on a desktop CPU.  Point
it at an annotated stack (image TIFF plus a binary label TIFF of the same
shape); the stack is split along z into training and held-out slabs, a
patch sampler feeds the full-width network, and the held-out slab is scored
after post-processing.  On comparable annotated cortical stacks the
expected operating range is near Dice 0.82 +- 0.10.

Example:
    python3 scripts/reference_study.py --image stack.tif --labels gt.tif \
        --out runs/full --epochs 100 --finetune-epochs 0
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from vesselseg.metrics import evaluate_pair
from vesselseg.motion import correct_stack
from vesselseg.net import TrainConfig, parse_arch, train
from vesselseg.net.checkpoint import save_checkpoint
from vesselseg.net.train import write_trace_csv
from vesselseg.phantom import TrainingData
from vesselseg.segment import postprocess, predict_volume
from vesselseg.volume import (
    BinaryVolume,
    ImageVolume,
    load_mask,
    load_stack,
    normalize_percentile,
    save_mask,
)


def split_z(image: ImageVolume, labels: BinaryVolume, val_fraction: float,
            min_depth: int):
    nz = image.dims[2]
    nz_val = max(min_depth, int(round(nz * val_fraction)))
    if nz - nz_val < min_depth:
        raise ValueError(
            f"stack depth {nz} cannot hold train and validation slabs of "
            f"at least {min_depth} slices each"
        )
    cut = nz - nz_val
    tr_img = ImageVolume(image.voxels[:, :, :cut], image.spacing)
    va_img = ImageVolume(image.voxels[:, :, cut:], image.spacing)
    tr_lab = BinaryVolume(labels.voxels[:, :, :cut], labels.spacing)
    va_lab = BinaryVolume(labels.voxels[:, :, cut:], labels.spacing)
    return (tr_img, tr_lab), (va_img, va_lab)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        description=__doc__.splitlines()[0],
        epilog="Non-gating reference run; budget hours of CPU time for the "
        "default schedule.",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
    )
    p.add_argument("--image", required=True, help="annotated image stack (TIFF)")
    p.add_argument("--labels", required=True, help="binary vessel labels (TIFF)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--arch", default="3*C 3x3x3 - P - 2*C 3x3 - P - NN",
                   help="layer descriptor")
    p.add_argument("--fov", type=int, nargs=3, default=(33, 33, 7),
                   metavar=("NX", "NY", "NZ"), help="input field of view")
    p.add_argument("--roi", type=int, nargs=3, default=(5, 5, 1),
                   metavar=("NX", "NY", "NZ"), help="labeled output window")
    p.add_argument("--hidden-width", type=int, default=1024,
                   help="dense hidden layer width")
    p.add_argument("--epochs", type=int, default=100,
                   help="exploration epochs at --lr")
    p.add_argument("--lr", type=float, default=1e-4,
                   help="exploration learning rate")
    p.add_argument("--finetune-epochs", type=int, default=0,
                   help="optional refinement epochs at --finetune-lr")
    p.add_argument("--finetune-lr", type=float, default=1e-6,
                   help="refinement learning rate")
    p.add_argument("--batch-size", type=int, default=1000)
    p.add_argument("--train-patches", type=int, default=200_000,
                   help="patches sampled from the training slab")
    p.add_argument("--val-patches", type=int, default=20_000,
                   help="patches sampled from the held-out slab")
    p.add_argument("--balance", type=float, default=0.5,
                   help="foreground fraction of sampled training patches")
    p.add_argument("--val-fraction", type=float, default=0.2,
                   help="z fraction held out for validation")
    p.add_argument("--register", action="store_true",
                   help="run slice-wise motion correction before training")
    p.add_argument("--lo", type=float, default=1.0,
                   help="lower normalization percentile")
    p.add_argument("--hi", type=float, default=99.0,
                   help="upper normalization percentile")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log-every", type=int, default=1,
                   help="epochs between progress lines")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    image = load_stack(args.image)
    labels = load_mask(args.labels)
    if labels.dims != image.dims:
        raise SystemExit(f"label dims {labels.dims} != image dims {image.dims}")
    if args.register:
        print("motion correction ...", flush=True)
        image, _ = correct_stack(image)
    image = normalize_percentile(image, args.lo, args.hi)

    spec = parse_arch(args.arch, tuple(args.fov), tuple(args.roi),
                      args.hidden_width)
    (tr_img, tr_lab), (va_img, va_lab) = split_z(
        image, labels, args.val_fraction, min_depth=args.fov[2]
    )
    print(f"train slab z={tr_img.dims[2]}, validation slab z={va_img.dims[2]}")
    data = TrainingData(
        [(tr_img, tr_lab)], [(va_img, va_lab)], spec,
        n_train=args.train_patches, n_val=args.val_patches,
        balance=args.balance, seed=args.seed,
    )

    schedule = [(args.epochs, args.lr)]
    if args.finetune_epochs:
        schedule.append((args.finetune_epochs, args.finetune_lr))
    cfg = TrainConfig(schedule=tuple(schedule), batch_size=args.batch_size,
                      rng_seed=args.seed, log_every=args.log_every)
    t0 = time.monotonic()
    params, rows = train(spec, data, cfg, log=print)
    print(f"training took {time.monotonic() - t0:.0f}s")
    save_checkpoint(spec, params, out / "model.ckpt")
    write_trace_csv(rows, out / "trace.csv")

    pred, _ = predict_volume(va_img, spec, params)
    pred = postprocess(pred)
    save_mask(pred, out / "heldout_labels.tif")
    report = evaluate_pair(va_lab, pred)
    (out / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"held-out dice {report['dice']:.4f} jaccard {report['jaccard']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
