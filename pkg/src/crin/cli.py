"""Command-line entry point.

Subcommands: synth (generate a synthetic dataset), train, eval, predict,
analyze (params / FLOPs / FPS / scale attention / feature export), and
gradcheck (finite-difference verification).

Exit codes: 0 success, 1 usage or configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig
from .data import Manifest, Sample, normalize_image, write_dataset
from .io import RasterError, load_mask, load_ppm, save_pgm, save_ppm
from .metrics import ConfusionCounts, confusion_update, metrics_compute, metrics_table
from .nn import VARIANTS, CrinModel, build_variant
from .synth import SynthStats, synth_generate
from .tensor import ShapeError, Tensor, sigmoid
from .train import TrainingDiverged, checkpoint_read, evaluate, train


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   dest="overrides", help="override a single config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crin",
        description="Collaborative building and road extraction toolkit")
    parser.add_argument("--version", action="version",
                        version=f"crin {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="output dataset directory")

    p = sub.add_parser("train", help="train a model variant")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory (manifest.json)")
    p.add_argument("--out", required=True, help="run output directory")
    p.add_argument("--variant", default="full_crin", choices=VARIANTS)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")
    p.add_argument("--progress", type=int, default=100, metavar="N",
                   help="print a status line every N iterations (0 = quiet)")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--variant", default="full_crin", choices=VARIANTS)
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")

    p = sub.add_parser("predict", help="write probability maps for one image")
    _add_common(p)
    p.add_argument("--image", required=True, help="input PPM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variant", default="full_crin", choices=VARIANTS)
    p.add_argument("--building-mask", help="ground truth for an error map")
    p.add_argument("--road-mask", help="ground truth for an error map")
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")

    p = sub.add_parser("analyze", help="complexity and attention reports")
    _add_common(p)
    p.add_argument("--variant", default="full_crin", choices=VARIANTS)
    p.add_argument("--checkpoint", help="trained weights (fresh init otherwise)")
    p.add_argument("--input-size", type=int, default=128)
    p.add_argument("--params", action="store_true")
    p.add_argument("--flops", action="store_true")
    p.add_argument("--fps", action="store_true")
    p.add_argument("--scales", action="store_true",
                   help="per-channel scale attention study (needs --data)")
    p.add_argument("--features", metavar="DIR",
                   help="export stage feature rasters to DIR (needs --data)")
    p.add_argument("--data", help="dataset directory for --scales / --features")
    p.add_argument("--split", default="val")
    p.add_argument("--allow-fingerprint-mismatch", action="store_true")

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(p)
    p.add_argument("--end-to-end", action="store_true",
                   help="also differentiate a small full model")
    p.add_argument("--tol", type=float, default=None,
                   help="fail (exit 2) if any relative error exceeds this")
    return parser


def _load_weights(model, checkpoint: str, fingerprint: str, allow: bool) -> None:
    meta, tensors, _ = checkpoint_read(checkpoint)
    if meta["fingerprint"] != fingerprint and not allow:
        raise RasterError(
            f"{checkpoint}: config fingerprint {meta['fingerprint']} does not "
            f"match current config {fingerprint} "
            f"(use --allow-fingerprint-mismatch to force)")
    model.store.load_arrays(tensors)


def _build_model(rc: RunConfig, variant: str):
    return build_variant(variant, rc.crin_config(),
                         seed=rc.get_int("train.seed"), dtype=rc.dtype())


def cmd_synth(args, rc: RunConfig) -> int:
    cfg = rc.synth_config()
    stats = SynthStats()
    counts = {"train": rc.get_int("synth.train_scenes"),
              "val": rc.get_int("synth.val_scenes"),
              "test": rc.get_int("synth.test_scenes")}
    start = 0
    by_split = {}
    for split, n in counts.items():
        if n:
            by_split[split] = synth_generate(cfg, n, start_index=start,
                                             stats=stats)
            start += n
    write_dataset(by_split, args.out)
    rc.echo(args.out, __version__)
    total = sum(counts.values())
    print(f"wrote {total} scenes to {args.out} "
          f"({stats.skipped_buildings} building placements skipped)")
    return 0


def cmd_train(args, rc: RunConfig) -> int:
    manifest = Manifest.load(Path(args.data) / "manifest.json")
    train_s = manifest.load_split("train")
    val_s = manifest.load_split("val")
    if not train_s:
        raise ConfigError(f"{args.data}: no training samples in manifest")
    model = _build_model(rc, args.variant)
    rc.echo(args.out, __version__)
    fp = rc.fingerprint()
    if args.resume and args.allow_fingerprint_mismatch:
        meta, _, _ = checkpoint_read(args.resume)
        fp = meta["fingerprint"]
    train(model, train_s, val_s, rc.train_config(), args.out, fingerprint=fp,
          resume=args.resume, augment_data=rc.get_bool("train.augment"),
          progress=args.progress or None)
    print(f"run complete: {args.out}")
    return 0


def cmd_eval(args, rc: RunConfig) -> int:
    manifest = Manifest.load(Path(args.data) / "manifest.json")
    samples = manifest.load_split(args.split)
    if not samples:
        raise ConfigError(f"{args.data}: split {args.split!r} is empty")
    model = _build_model(rc, args.variant)
    _load_weights(model, args.checkpoint, rc.fingerprint(),
                  args.allow_fingerprint_mismatch)
    results = evaluate(model, samples,
                       batch_size=rc.get_int("train.batch_size"),
                       threshold=rc.get_float("eval.threshold"))
    print(metrics_table(results))
    return 0


# error map colors: correct foreground, missed foreground, false foreground
_TP_COLOR = (0, 255, 0)
_FN_COLOR = (0, 0, 255)
_FP_COLOR = (255, 0, 0)


def _error_map(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    out = np.zeros((3,) + pred.shape, dtype=np.uint8)
    for color, sel in ((_TP_COLOR, pred & (truth > 0)),
                       (_FN_COLOR, ~pred & (truth > 0)),
                       (_FP_COLOR, pred & (truth == 0))):
        for c in range(3):
            out[c][sel] = color[c]
    return out


def cmd_predict(args, rc: RunConfig) -> int:
    model = _build_model(rc, args.variant)
    _load_weights(model, args.checkpoint, rc.fingerprint(),
                  args.allow_fingerprint_mismatch)
    image = load_ppm(args.image).astype(np.float32) / 255.0
    x = Tensor(normalize_image(image)[None].astype(model.dtype))
    res = model.forward(x, training=False)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    threshold = rc.get_float("eval.threshold")
    truths = {"building": args.building_mask, "road": args.road_mask}
    for task, logits in (("building", res.building_logits),
                         ("road", res.road_logits)):
        prob = sigmoid(logits).data[0, 0]
        gray = np.clip(np.round(prob * 255.0), 0, 255).astype(np.uint8)
        save_pgm(gray, out / f"{stem}_{task}_prob.pgm")
        pred = prob >= threshold
        save_pgm(pred.astype(np.uint8) * 255, out / f"{stem}_{task}_pred.pgm")
        if truths[task]:
            truth = load_mask(truths[task])
            if truth.shape != pred.shape:
                raise ShapeError(
                    f"{truths[task]}: mask shape {truth.shape} does not match "
                    f"prediction shape {pred.shape}")
            save_ppm(_error_map(pred, truth), out / f"{stem}_{task}_error.ppm")
    print(f"predictions written to {out}")
    return 0


def cmd_analyze(args, rc: RunConfig) -> int:
    from . import analysis

    model = _build_model(rc, args.variant)
    if args.checkpoint:
        _load_weights(model, args.checkpoint, rc.fingerprint(),
                      args.allow_fingerprint_mismatch)
    hw = (args.input_size, args.input_size)
    any_flag = False
    if args.params:
        any_flag = True
        print(analysis.count_params(model).to_csv(), end="")
    if args.flops:
        any_flag = True
        print(analysis.count_flops(model, hw).to_csv(), end="")
    if args.fps:
        any_flag = True
        r = analysis.bench_fps(model, hw)
        print(f"fps mean={r.mean_fps:.2f} median={r.median_fps:.2f} "
              f"std={r.std_fps:.2f} over {r.runs} runs at {hw[0]}x{hw[1]}")
    if args.scales or args.features:
        any_flag = True
        if not args.data:
            raise ConfigError("--scales / --features require --data")
        manifest = Manifest.load(Path(args.data) / "manifest.json")
        samples = manifest.load_split(args.split)
        if not samples:
            raise ConfigError(f"{args.data}: split {args.split!r} is empty")
        if args.scales:
            if not isinstance(model, CrinModel) or not model.use_csi:
                raise ConfigError(
                    "--scales requires a variant with scale blocks (full_crin)")
            sc = analysis.scale_contribution(
                model, samples, batch_size=rc.get_int("train.batch_size"))
            print(sc.to_csv(), end="")
        if args.features:
            if not isinstance(model, CrinModel):
                raise ConfigError(
                    "--features requires a task-split variant (mti_only or full_crin)")
            idx = analysis.export_features(model, samples[0], args.features)
            print(f"exported {len(idx['files'])} feature rasters to {args.features}")
    if not any_flag:
        raise ConfigError("analyze: select at least one report flag "
                          "(--params --flops --fps --scales --features)")
    return 0


def cmd_gradcheck(args, rc: RunConfig) -> int:
    from . import verify

    report = verify.op_checks()
    if args.end_to_end:
        for e in verify.end_to_end_check().entries:
            e.name = "model." + e.name
            report.entries.append(e)
    print(report.to_csv(), end="")
    if args.tol is not None and report.max_rel_err > args.tol:
        print(f"FAIL: max relative error {report.max_rel_err:.3e} exceeds "
              f"tolerance {args.tol:.1e}", file=sys.stderr)
        return 2
    return 0


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "analyze": cmd_analyze,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        rc = RunConfig.resolve(args.config, args.overrides)
        return _COMMANDS[args.command](args, rc)
    except (ConfigError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (RasterError, ShapeError, ValueError, TrainingDiverged, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
