"""Command-line interface.

Subcommands mirror the pipeline stages:

    phantom     synthesize a ground-truthed test stack
    register    slice-wise motion correction
    preprocess  percentile normalization + isotropic resampling
    train       fit the patch classifier on labelled volumes
    segment     run a checkpoint over a stack (+ post-processing, uncertainty)
    centerline  skeletonize a mask and emit the vessel graph
    analyze     per-segment morphometry, group statistics, figures
    evaluate    compare a segmentation against ground truth

Exit codes: 0 success; 1 invalid configuration or input values (bad flags,
malformed descriptors, degenerate volumes); 2 runtime failures (missing or
corrupt files, failed stages) and argparse usage errors.  Every subcommand
accepts --config JSON plus flag overrides and writes a manifest.json recording
the effective configuration and content hashes of its inputs and outputs.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import centerline as cl
from . import metrics, morphometry, phantom, report, segment
from .config import PipelineConfig, load_config, write_manifest
from .errors import PipelineError
from .motion import DemonsConfig, correct_stack
from .net import TrainConfig, load_checkpoint, parse_arch, save_checkpoint, train, write_trace_csv
from .volume import (
    BinaryVolume,
    load_mask,
    load_stack,
    normalize_percentile,
    resample_isotropic,
    save_mask,
    save_stack,
    to_unit_scale,
)


def _cfg_from_args(args) -> PipelineConfig:
    overrides = {
        key: getattr(args, attr)
        for key, attr in getattr(args, "_override_map", {}).items()
        if getattr(args, attr, None) is not None
    }
    return load_config(getattr(args, "config", None), overrides)


def _add_config_flag(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, default=None, help="JSON config file")


def _override(p: argparse.ArgumentParser, flag: str, cfg_key: str, **kw):
    """Register a flag that overrides one PipelineConfig field."""
    attr = flag.lstrip("-").replace("-", "_")
    p.add_argument(flag, dest=attr, default=None, **kw)
    p.set_defaults(
        _override_map={**(p.get_default("_override_map") or {}), cfg_key: attr}
    )


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    cfg = _cfg_from_args(args)
    spec = phantom.PhantomSpec(
        dims=tuple(args.dims),
        n_tubes=args.tubes,
        radius_range=(args.radius_min, args.radius_max),
        motion_amplitude=args.motion_amplitude,
        noise_sigma=args.noise_sigma,
        rng_seed=cfg.rng_seed,
    )
    bundle = phantom.generate(spec)
    outdir = Path(args.out)
    phantom.save_bundle(bundle, outdir)
    fig = report.save_projection(
        bundle.image.voxels, outdir / "figures" / "image_mip.png", "phantom MIP"
    )
    outputs = [outdir / n for n in ("image.tif", "clean.tif", "labels.tif",
                                    "axes.json", "truth.json", "motion.npz")]
    write_manifest(outdir, "phantom", cfg, [], outputs + [fig])
    print(f"phantom written to {outdir} ({len(bundle.tubes)} tubes)")
    return 0


def cmd_register(args) -> int:
    cfg = _cfg_from_args(args)
    vol = to_unit_scale(load_stack(args.input))
    demons = DemonsConfig(
        sigma=cfg.demons_sigma,
        max_iters=cfg.demons_max_iters,
        mse_rel_tol=cfg.demons_mse_rel_tol,
        step_cap=cfg.demons_step_cap,
    )
    corrected, fields = correct_stack(vol, demons)
    outdir = Path(args.out)
    out_stack = save_stack(corrected, outdir / "corrected.tif")
    outputs = [out_stack]
    if args.export_fields:
        fpath = outdir / "fields.npz"
        np.savez_compressed(fpath, fields=np.stack([f.displacement for f in fields]))
        outputs.append(fpath)
    outputs.append(
        report.save_projection(
            corrected.voxels, outdir / "figures" / "corrected_mip.png", "corrected MIP"
        )
    )
    write_manifest(outdir, "register", cfg, [args.input], outputs)
    print(f"registered {corrected.dims[2]} slices -> {out_stack}")
    return 0


def cmd_preprocess(args) -> int:
    cfg = _cfg_from_args(args)
    vol = load_stack(args.input)
    vol = normalize_percentile(vol, cfg.percentile_lo, cfg.percentile_hi)
    vol = resample_isotropic(vol, cfg.target_spacing_um)
    outdir = Path(args.out)
    out = save_stack(vol, outdir / "preprocessed.tif")
    fig = report.save_projection(
        vol.voxels, outdir / "figures" / "preprocessed_mip.png", "preprocessed MIP"
    )
    write_manifest(outdir, "preprocess", cfg, [args.input], [out, fig])
    print(f"preprocessed stack -> {out} dims={vol.dims} spacing={vol.spacing}")
    return 0


def _load_pairs(dirs) -> list:
    pairs = []
    for d in dirs:
        d = Path(d)
        pairs.append((load_stack(d / "image.tif"), load_mask(d / "labels.tif")))
    return pairs


def cmd_train(args) -> int:
    cfg = _cfg_from_args(args)
    spec = parse_arch(cfg.arch, cfg.fov, cfg.roi, cfg.hidden_width, cfg.dropout_rate)
    train_pairs = _load_pairs(args.data)
    val_pairs = _load_pairs(args.val) if args.val else train_pairs
    data = phantom.TrainingData(
        train_pairs, val_pairs, spec,
        n_train=cfg.n_train_patches, n_val=cfg.n_val_patches,
        balance=cfg.patch_balance, seed=cfg.rng_seed,
    )
    schedule = [(cfg.epochs, cfg.learning_rate)]
    if cfg.finetune_epochs:
        schedule.append((cfg.finetune_epochs, cfg.finetune_learning_rate))
    tc = TrainConfig(
        schedule=tuple(schedule), batch_size=cfg.batch_size, rng_seed=cfg.rng_seed,
        log_every=1,
    )
    params, rows = train(spec, data, tc, log=print)
    outdir = Path(args.out)
    ckpt = save_checkpoint(spec, params, outdir / "model.ckpt")
    trace = outdir / "trace.csv"
    write_trace_csv(rows, trace)
    fig = report.save_training_curves(rows, outdir / "figures" / "training.png")
    inputs = [Path(d) / n for d in args.data for n in ("image.tif", "labels.tif")]
    write_manifest(outdir, "train", cfg, inputs, [ckpt, trace, fig])
    best = max(rows, key=lambda r: r[2]) if rows else (0, 0.0, 0.0)
    print(f"checkpoint {ckpt} (best val Jaccard {best[2]:.4f} at epoch {best[0]})")
    return 0


def cmd_segment(args) -> int:
    cfg = _cfg_from_args(args)
    vol = load_stack(args.input)
    spec, params = load_checkpoint(args.checkpoint)
    raw_mask, prob = segment.predict_volume(vol, spec, params, cfg.tile_batch)
    outdir = Path(args.out)
    outputs = [save_stack(prob, outdir / "prob.tif")]
    if args.no_postprocess:
        final = raw_mask
    else:
        outputs.append(save_mask(raw_mask, outdir / "seg_raw.tif"))
        final = segment.postprocess(raw_mask, cfg.min_component_voxels)
    outputs.insert(0, save_mask(final, outdir / "seg.tif"))
    if args.entropy:
        ent = segment.mc_entropy(
            vol, spec, params, cfg.mc_samples,
            np.random.default_rng(cfg.rng_seed), cfg.tile_batch,
        )
        outputs.append(save_stack(ent, outdir / "entropy.tif"))
    outputs.append(
        report.save_projection(
            final.voxels.astype(np.float32),
            outdir / "figures" / "seg_mip.png", "segmentation MIP",
        )
    )
    write_manifest(outdir, "segment", cfg, [args.input, args.checkpoint], outputs)
    print(f"segmented {vol.dims} -> {outdir / 'seg.tif'} ({final.count} voxels)")
    return 0


def cmd_centerline(args) -> int:
    cfg = _cfg_from_args(args)
    seg = load_mask(args.input)
    skel, graph = cl.extract(seg, refine=not args.no_refine, do_prune=not args.no_prune)
    outdir = Path(args.out)
    gpath = graph.save(outdir / "graph.json")
    spath = save_mask(BinaryVolume(skel.voxels, skel.spacing), outdir / "skeleton.tif")
    fig = report.save_projection(
        skel.voxels.astype(np.float32), outdir / "figures" / "skeleton_mip.png",
        "centerline MIP",
    )
    write_manifest(outdir, "centerline", cfg, [args.input], [gpath, spath, fig])
    print(
        f"graph: {len(graph.nodes)} nodes, {len(graph.edges)} edges -> {gpath}"
    )
    return 0


def cmd_analyze(args) -> int:
    cfg = _cfg_from_args(args)
    items = args.item or []
    if not items:
        print("error: at least one --item GROUP SEG GRAPH is required", file=sys.stderr)
        return 2
    all_records = []
    samples: dict[str, dict[str, np.ndarray]] = {}
    for group, seg_path, graph_path in items:
        seg = load_mask(seg_path)
        graph = cl.CenterlineGraph.load(graph_path)
        records = morphometry.measure_graph(graph, seg, group=group)
        if not args.all_segments:
            records = morphometry.filter_capillaries(
                records, cfg.capillary_max_diameter_um
            )
        all_records.extend(records)
        metrics_for_group = morphometry.records_by_metric(records)
        if group in samples:
            samples[group] = {
                k: np.concatenate([samples[group][k], v])
                for k, v in metrics_for_group.items()
            }
        else:
            samples[group] = metrics_for_group
    outdir = Path(args.out)
    outputs = [morphometry.write_segments_csv(all_records, outdir / "segments.csv")]
    if len(samples) >= 2:
        comparisons = morphometry.compare_groups(samples)
        outputs.append(
            morphometry.write_comparisons_csv(comparisons, outdir / "comparisons.csv")
        )
    outputs.extend(report.save_metric_distributions(samples, outdir / "figures"))
    inputs = [p for _, s, g in items for p in (s, g)]
    write_manifest(outdir, "analyze", cfg, inputs, outputs)
    print(f"{len(all_records)} segments across {len(samples)} group(s) -> {outdir}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _cfg_from_args(args)
    gt = load_mask(args.gt)
    pred = load_mask(args.pred)
    rep = metrics.evaluate_pair(
        gt, pred, skel_gt=cl.thin3d(gt), skel_pred=cl.thin3d(pred)
    )
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rpath = outdir / "report.json"
    with open(rpath, "w") as fh:
        json.dump(rep, fh, indent=2, sort_keys=True)
        fh.write("\n")
    fig = report.save_slice_dice(rep["slice_dice"], outdir / "figures" / "slice_dice.png")
    write_manifest(outdir, "evaluate", cfg, [args.gt, args.pred], [rpath, fig])
    print(
        "dice {dice:.4f} jaccard {jaccard:.4f} sens {sensitivity:.4f} "
        "spec {specificity:.4f} mhd {mhd_boundary:.3f}".format(**rep)
    )
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesselseg",
        description="Vessel segmentation and morphometry for two-photon stacks",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic ground-truthed stack")
    _add_config_flag(p)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--dims", nargs=3, type=int, default=[64, 64, 64])
    p.add_argument("--tubes", type=int, default=4)
    p.add_argument("--radius-min", type=float, default=2.0)
    p.add_argument("--radius-max", type=float, default=4.0)
    p.add_argument("--motion-amplitude", type=float, default=0.0)
    p.add_argument("--noise-sigma", type=float, default=0.03)
    _override(p, "--seed", "rng_seed", type=int)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("register", help="slice-wise motion correction")
    _add_config_flag(p)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--export-fields", action="store_true")
    _override(p, "--sigma", "demons_sigma", type=float)
    _override(p, "--max-iters", "demons_max_iters", type=int)
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("preprocess", help="normalize and resample a stack")
    _add_config_flag(p)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    _override(p, "--lo", "percentile_lo", type=float)
    _override(p, "--hi", "percentile_hi", type=float)
    _override(p, "--target-spacing", "target_spacing_um", type=float)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train the patch classifier")
    _add_config_flag(p)
    p.add_argument("--data", required=True, nargs="+",
                   help="bundle dirs holding image.tif + labels.tif")
    p.add_argument("--val", nargs="+", default=None,
                   help="held-out bundle dirs (default: train volumes)")
    p.add_argument("--out", required=True, type=Path)
    _override(p, "--arch", "arch", type=str)
    _override(p, "--fov", "fov", nargs=3, type=int)
    _override(p, "--roi", "roi", nargs=3, type=int)
    _override(p, "--hidden-width", "hidden_width", type=int)
    _override(p, "--epochs", "epochs", type=int)
    _override(p, "--finetune-epochs", "finetune_epochs", type=int)
    _override(p, "--lr", "learning_rate", type=float)
    _override(p, "--batch-size", "batch_size", type=int)
    _override(p, "--train-patches", "n_train_patches", type=int)
    _override(p, "--val-patches", "n_val_patches", type=int)
    _override(p, "--seed", "rng_seed", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("segment", help="apply a checkpoint to a stack")
    _add_config_flag(p)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--no-postprocess", action="store_true")
    p.add_argument("--entropy", action="store_true",
                   help="also write the MC-dropout entropy volume")
    _override(p, "--tile-batch", "tile_batch", type=int)
    _override(p, "--min-component", "min_component_voxels", type=int)
    _override(p, "--mc-samples", "mc_samples", type=int)
    _override(p, "--seed", "rng_seed", type=int)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("centerline", help="skeletonize a segmentation")
    _add_config_flag(p)
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--no-prune", action="store_true")
    p.set_defaults(func=cmd_centerline)

    p = sub.add_parser("analyze", help="morphometry and group statistics")
    _add_config_flag(p)
    p.add_argument("--item", nargs=3, action="append",
                   metavar=("GROUP", "SEG", "GRAPH"),
                   help="group label, segmentation stack, graph JSON")
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--all-segments", action="store_true",
                   help="skip the capillary diameter filter before statistics")
    _override(p, "--max-capillary-um", "capillary_max_diameter_um", type=float)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("evaluate", help="score a segmentation against truth")
    _add_config_flag(p)
    p.add_argument("--gt", required=True, type=Path)
    p.add_argument("--pred", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_evaluate)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValueError as exc:
        # bad config values, degenerate inputs, malformed descriptors
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (PipelineError, OSError) as exc:
        # failures while running an otherwise valid stage
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
