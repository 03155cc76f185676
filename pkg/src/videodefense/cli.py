"""Command-line surface.

Commands:
  gen-data     write synthetic frames + masks (+ manifest)
  train-model  train the segmentation target and save its weights
  protect      run the video defense over a frame directory
  evaluate     measure purification robustness of protected frames

Exit codes: 0 success, 1 usage error, 2 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import models as M
from . import pipeline as PL
from .config import RunConfig
from .metrics import PurificationSpec, evaluate_robustness, write_csv

TRAIN_ACCURACY_GATE = 0.95


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="videodefense", description=__doc__,
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate synthetic frames and masks")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--count", type=int, default=16)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=1234)
    p.add_argument("--sequence", action="store_true",
                   help="one scene translated 1 px/frame instead of independent scenes")

    p = sub.add_parser("train-model", help="train the segmentation target")
    p.add_argument("--data", required=True, help="directory from gen-data")
    p.add_argument("--out", required=True, help="weights file to write")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--heldout", type=int, default=50,
                   help="trailing scenes reserved for the accuracy gate")
    p.add_argument("--weight-seed", type=int, default=7)

    p = sub.add_parser("protect", help="protect a directory of frames")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--ablate", action="append", default=[], metavar="KEY=VAL",
                   help="override an ablation axis (noise_domain, spatial_mask, "
                        "perceptual, inherit, eq7_mode)")
    p.add_argument("--verbose", action="store_true")

    p = sub.add_parser("evaluate", help="purification robustness of protected frames")
    p.add_argument("--protected", required=True)
    p.add_argument("--clean", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--purify", nargs="*", default=[], metavar="KIND:PARAM",
                   help="e.g. jpeg:75 resize:0.6")

    return parser


def _load_config(path) -> RunConfig:
    if path is None:
        cfg = RunConfig()
        cfg._apply_env()
        return cfg
    return RunConfig.from_file(path)


def cmd_gen_data(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.sequence:
        scenes = M.make_sequence(args.count, args.seed, size=args.size)
    else:
        scenes = M.make_scenes(args.count, args.seed, size=args.size)
    for i, scene in enumerate(scenes):
        PL.write_frame(out / (PL.FRAME_PATTERN % i), scene.image)
        PL.write_mask(out / (PL.MASK_PATTERN % i), scene.mask)
    manifest = {
        "count": args.count,
        "size": args.size,
        "seed": args.seed,
        "sequence": bool(args.sequence),
    }
    with open(out / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"wrote {args.count} frames to {out}")
    return 0


def cmd_train_model(args) -> int:
    seq, _ = PL.load_frames(args.data, seg_model=None)
    scenes = [M.SyntheticScene(img, mask) for img, mask in zip(seq.frames, seq.masks)]
    if len(scenes) <= args.heldout:
        raise UsageError(f"need more than {args.heldout} scenes, found {len(scenes)}")
    split = len(scenes) - args.heldout
    model = M.SegModel(weight_seed=args.weight_seed)
    report = M.train_seg(model, scenes[:split], scenes[split:], epochs=args.epochs)
    M.save_model(args.out, model)
    acc = report["heldout_accuracy"]
    print(f"held-out pixel accuracy: {acc:.4f}")
    if acc < TRAIN_ACCURACY_GATE:
        print(f"accuracy below the {TRAIN_ACCURACY_GATE} gate", file=sys.stderr)
        return 2
    return 0


def cmd_protect(args) -> int:
    cfg = _load_config(args.config)
    cfg.input_dir = args.input
    cfg.output_dir = args.output
    cfg.model_file = args.model
    if args.verbose:
        cfg.verbose = True
    for item in args.ablate:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--ablate expects KEY=VAL, got {item!r}")
        cfg.apply_ablate(key.strip(), value.strip())
    seg = M.load_model(args.model)
    models = M.TargetModels(seg=seg)
    seq, derived = PL.load_frames(args.input, seg_model=seg, fps=cfg.fps)
    _, report = PL.protect_video(seq, models, cfg.attack_config(),
                                 out_dir=args.output, config_echo=cfg.to_dict(),
                                 derived_masks=derived)
    agg = report.aggregates
    print(f"protected {agg['frames']} frames: mean_iterations={agg['mean_iterations']:.1f} "
          f"mean_psnr={agg['mean_psnr']:.2f} min_rate={agg['min_rate']:.3f}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = _load_config(args.config)
    specs = [PurificationSpec.parse(s) for s in args.purify] if args.purify \
        else cfg.purification_specs()
    seg = M.load_model(args.model)
    protected_dir = Path(args.protected)
    protected, _ = PL.load_frames(protected_dir, seg_model=seg, fps=cfg.fps)
    clean, _ = PL.load_frames(args.clean, seg_model=seg, fps=cfg.fps)
    if len(protected) != len(clean):
        raise RuntimeError(
            f"frame count mismatch: {len(protected)} protected vs {len(clean)} clean")
    report = evaluate_robustness(protected.frames, clean.frames, clean.masks,
                                 seg, specs, cfg.loss_config())
    report_path = protected_dir / "report.json"
    body = {}
    if report_path.exists():
        with open(report_path) as fh:
            body = json.load(fh)
    body["robustness"] = report.to_json_dict()
    with open(report_path, "w") as fh:
        json.dump(body, fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_csv(protected_dir / "robustness.csv", report)
    for section in report.sections:
        rates = ", ".join(f"{r:.3f}" for r in section["mean_rates"])
        print(f"{section['spec']}: mean rates per scale [{rates}]")
    if not report.sections:
        print(f"pre-purification rates recorded for {len(report.pre_rates)} frames")
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-model": cmd_train_model,
    "protect": cmd_protect,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        return 1
    except (ValueError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
