"""Command-line interface composing the segmentation pipeline.

Subcommands: ``preprocess``, ``infer``, ``eval``, ``overlay``, ``tune``,
``phantom`` and ``train-toy``. Every run writes a ``manifest.txt``
(key=value, atomically, capturing the full flag set, inputs and per-stage
timings). Exit codes are stable for scripting: 0 success, 2 usage error,
3 data/format error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import cascade as casc
from . import crf as crf3d
from . import fcn, metrics, phantom, preprocess, tuner
from .errors import DataError, LiverSegError, NumericalError
from .volume import LabelVolume, ProbVolume, Volume3D, load_volume, save_volume

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

def _write_manifest(out_dir: Path, command: str, args: argparse.Namespace,
                    inputs: dict[str, str], timings: dict[str, float],
                    extra: dict[str, object] | None = None) -> None:
    lines = [f"tool_version = {__version__}", f"command = {command}"]
    for key in sorted(vars(args)):
        if key in ("func", "command"):
            continue
        lines.append(f"flag_{key} = {getattr(args, key)}")
    for name, value in inputs.items():
        lines.append(f"input_{name} = {value}")
    lines.append(f"output_dir = {out_dir}")
    for name, value in (extra or {}).items():
        lines.append(f"{name} = {value}")
    for name, value in timings.items():
        lines.append(f"{name} = {value:.6f}")
    tmp = out_dir / "manifest.txt.tmp"
    tmp.write_text("\n".join(lines) + "\n")
    os.replace(tmp, out_dir / "manifest.txt")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _parse_window(text: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in text.split(","))
    except ValueError as exc:
        raise DataError(f"--window expects 'lo,hi', got {text!r}") from exc
    if lo >= hi:
        raise DataError(f"--window needs lo < hi, got {text!r}")
    return lo, hi


def _load_as(path: str, kind, what: str):
    vol = load_volume(path)
    if not isinstance(vol, kind):
        raise DataError(f"{path} is not a {what}")
    return vol


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_preprocess(args) -> int:
    out = _out_dir(args)
    t0 = time.perf_counter()
    vol = _load_as(args.input, Volume3D, "scalar CT volume")
    lo, hi = _parse_window(args.window)
    windowed = preprocess.hu_window(vol, lo, hi)
    if args.no_equalize:
        result = windowed
    else:
        result = preprocess.equalize_volume(windowed, value_range=(lo, hi))
    save_volume(result, out / "preprocessed.mhd")
    _write_manifest(out, "preprocess", args, {"ct": args.input},
                    {"preprocess_s": time.perf_counter() - t0})
    return EXIT_OK


def _provider(probs_path: str | None, model_path: str | None, window, what: str):
    if (probs_path is None) == (model_path is None):
        raise DataError(f"exactly one of --{what}-probs / --{what}-model is required")
    if probs_path is not None:
        return casc.FileProbProvider(probs_path)
    return casc.ToyNetProvider(fcn.load_checkpoint(model_path), window=window)


def cmd_infer(args) -> int:
    out = _out_dir(args)
    t_total = time.perf_counter()
    ct = _load_as(args.ct, Volume3D, "scalar CT volume")
    window = _parse_window(args.window)
    liver = _provider(args.liver_probs, args.liver_model, window, "liver")
    lesion = _provider(args.lesion_probs, args.lesion_model, window, "lesion")
    w, h = (int(v) for v in args.stage2_size.lower().split("x"))
    cfg = casc.CascadeConfig(
        liver_threshold=args.threshold,
        roi_pad_mm=args.roi_pad_mm,
        stage2_input_size=(w, h),
        largest_component_only=not args.keep_all_components,
    )
    crf_params = crf3d.load_params(args.crf) if args.crf else None
    stages = tuple(s.strip() for s in args.crf_stages.split(",") if s.strip())

    fused, inter = casc.run_cascade(ct, liver, lesion, cfg, crf_params, stages)

    save_volume(fused, out / "segmentation.mhd")
    save_volume(inter.liver_probs, out / "liver_probs.mhd")
    save_volume(inter.lesion_probs, out / "lesion_probs.mhd")
    casc.save_bbox(inter.roi_bbox, out / "roi_bbox.txt")
    timings = dict(inter.timings)
    timings["total_s"] = time.perf_counter() - t_total
    _write_manifest(out, "infer", args, {"ct": args.ct}, timings)
    return EXIT_OK


def cmd_eval(args) -> int:
    out = _out_dir(args)
    t0 = time.perf_counter()
    pred = _load_as(args.pred, LabelVolume, "label volume")
    gt = _load_as(args.gt, LabelVolume, "label volume")
    classes = [int(v) for v in args.classes.split(",") if v.strip()]
    rows = []
    for cls in classes:
        rep = metrics.evaluate(pred, gt, cls)
        rows.append((Path(args.pred).stem, cls, rep))
        print(
            f"class {cls}: VOE {rep.voe_pct:.2f}%  RVD {rep.rvd_pct:.2f}%  "
            f"ASD {rep.asd_mm:.3f}mm  MSD {rep.msd_mm:.3f}mm  Dice {rep.dice_pct:.2f}%"
        )
    metrics.write_report_csv(out / "report.csv", rows)
    _write_manifest(out, "eval", args, {"pred": args.pred, "gt": args.gt},
                    {"eval_s": time.perf_counter() - t0})
    return EXIT_OK


_OVERLAY_COLORS = {
    "lesion_correct": (0, 0, 255),   # blue
    "lesion_error": (255, 0, 0),     # red
    "liver_correct": (0, 255, 0),    # green
    "liver_error": (255, 255, 0),    # yellow
}


def render_overlay(ct_slice: np.ndarray, pred_slice: np.ndarray, gt_slice: np.ndarray,
                   window=(-100.0, 400.0)) -> np.ndarray:
    """Compose the four-colour error overlay onto the windowed CT slice.

    Green marks correct liver, yellow liver errors, blue correct lesion and
    red lesion errors (false positives and negatives); lesion colouring takes
    precedence where both apply. Colours blend at fixed 50% opacity.
    """
    lo, hi = window
    gray = (np.clip(ct_slice, lo, hi) - lo) / (hi - lo) * 255.0
    rgb = np.repeat(gray[:, :, None], 3, axis=2)

    lesion_correct = (pred_slice == 2) & (gt_slice == 2)
    lesion_error = (pred_slice == 2) != (gt_slice == 2)
    liver_correct = (pred_slice == 1) & (gt_slice == 1)
    liver_error = ((pred_slice == 1) != (gt_slice == 1)) & ~lesion_error
    masks = {
        "lesion_correct": lesion_correct,
        "lesion_error": lesion_error,
        "liver_correct": liver_correct,
        "liver_error": liver_error,
    }
    for name, mask in masks.items():
        color = np.array(_OVERLAY_COLORS[name], dtype=np.float64)
        rgb[mask] = 0.5 * rgb[mask] + 0.5 * color
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def cmd_overlay(args) -> int:
    from PIL import Image

    out = _out_dir(args)
    t0 = time.perf_counter()
    ct = _load_as(args.ct, Volume3D, "scalar CT volume")
    pred = _load_as(args.pred, LabelVolume, "label volume")
    gt = _load_as(args.gt, LabelVolume, "label volume")
    if pred.dims != ct.dims or gt.dims != ct.dims:
        raise DataError("overlay inputs must share dims")
    nz = ct.dims[2]
    if not 0 <= args.slice_index < nz:
        raise DataError(f"slice {args.slice_index} out of range [0, {nz})")
    window = _parse_window(args.window)
    rgb = render_overlay(
        ct.data[args.slice_index], pred.labels[args.slice_index],
        gt.labels[args.slice_index], window,
    )
    name = args.name or f"overlay_z{args.slice_index}.png"
    Image.fromarray(rgb, "RGB").save(out / name)
    _write_manifest(out, "overlay", args,
                    {"ct": args.ct, "pred": args.pred, "gt": args.gt},
                    {"overlay_s": time.perf_counter() - t0})
    return EXIT_OK


def _load_search_space(path: str) -> tuner.SearchSpace:
    fields = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    ranges = {}
    scales = {}
    for name in tuner.PARAM_ORDER:
        lo = float(fields.get(f"{name}_low", tuner.DEFAULT_RANGES[name][0]))
        hi = float(fields.get(f"{name}_high", tuner.DEFAULT_RANGES[name][1]))
        ranges[name] = (lo, hi)
        scales[name] = fields.get(f"{name}_scale", "log")
    return tuner.SearchSpace(
        ranges=ranges,
        scales=scales,
        trials=int(fields.get("trials", 20)),
        seed=int(fields.get("seed", 0)),
    )


def cmd_tune(args) -> int:
    out = _out_dir(args)
    t0 = time.perf_counter()
    space = _load_search_space(args.space) if args.space else tuner.SearchSpace()
    if args.seed is not None:
        space = tuner.SearchSpace(space.ranges, space.scales, space.trials, args.seed)

    cases = []
    for line in Path(args.cases).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) not in (3, 4):
            raise DataError(
                f"case line needs 'unary.mhd intensity.mhd gt.mhd [class]', got {line!r}"
            )
        unary = _load_as(parts[0], ProbVolume, "probability volume")
        intensity = _load_as(parts[1], Volume3D, "scalar volume")
        gt = _load_as(parts[2], LabelVolume, "label volume")
        cls = int(parts[3]) if len(parts) == 4 else tuner.default_objective_class(gt)
        cases.append(tuner.TunerCase(unary, intensity, gt, cls))

    best, trace = tuner.random_search(space, cases, objective=args.objective,
                                      iterations=args.iterations)
    crf3d.save_params(best, out / "best_crf_params.txt")
    tuner.write_trace_csv(out / "trace.csv", trace)
    best_trial = max(trace, key=lambda t: (not np.isnan(t.mean_score), t.mean_score))
    print(f"best trial {best_trial.trial}: mean {args.objective} {best_trial.mean_score:.4f}")
    _write_manifest(out, "tune", args, {"cases": args.cases},
                    {"tune_s": time.perf_counter() - t0})
    return EXIT_OK


def cmd_phantom(args) -> int:
    out = _out_dir(args)
    t0 = time.perf_counter()
    spec = phantom.load_spec(args.spec) if args.spec else phantom.PhantomSpec()
    if args.seed is not None:
        spec = phantom.PhantomSpec(
            spec.dims, spec.spacing, spec.liver_center_mm, spec.liver_axes_mm,
            spec.liver_hu, spec.background_hu, spec.lesions, spec.noise_sigma, args.seed,
        )
    ct, gt = phantom.generate(spec)
    save_volume(ct, out / "phantom_ct.mhd")
    save_volume(gt, out / "phantom_gt.mhd")
    _write_manifest(out, "phantom", args,
                    {"spec": args.spec or "<defaults>"},
                    {"phantom_s": time.perf_counter() - t0})
    return EXIT_OK


def cmd_train_toy(args) -> int:
    out = _out_dir(args)
    t0 = time.perf_counter()
    ct = _load_as(args.ct, Volume3D, "scalar CT volume")
    gt = _load_as(args.gt, LabelVolume, "label volume")
    if ct.dims != gt.dims:
        raise DataError("ct and gt dims differ")
    window = _parse_window(args.window)

    if args.target == "liver":
        binary = (gt.labels >= 1).astype(np.uint8)
    else:
        binary = (gt.labels == 2).astype(np.uint8)

    lo, hi = window
    dataset = []
    for z in range(ct.data.shape[0]):
        img = (np.clip(ct.data[z], lo, hi) - lo) / (hi - lo)
        lab = binary[z]
        dataset.append((img.astype(np.float64), lab))
        for k in range(args.augment_factor):
            aug = preprocess.AugmentParams(
                max_shift_vox=args.max_shift_vox, max_rot_deg=args.max_rot_deg,
                noise_sigma=args.noise_sigma / (hi - lo),
                seed=(args.seed * 1_000_003 + z * 101 + k),
            )
            img_a, lab_a = preprocess.augment(img, lab, aug)
            dataset.append((img_a.astype(np.float64), lab_a))

    weights = fcn.normalized_class_weights([lab for _, lab in dataset], classes=2, min_count=1)
    cfg = fcn.TrainConfig(
        learning_rate=args.learning_rate, momentum=args.momentum,
        weight_decay=args.weight_decay, epochs=args.epochs,
        batch_size=args.batch_size, seed=args.seed,
    )
    net = fcn.ToyNet(
        in_channels=1, hidden_channels=args.hidden_channels,
        conv_layers=args.conv_layers, classes=2, seed=args.seed,
    )
    trace = fcn.train(net, dataset, cfg, weights)
    fcn.save_checkpoint(net, out / "checkpoint.bin")
    with open(out / "loss_trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss"])
        for i, loss in enumerate(trace):
            writer.writerow([i, f"{loss:.8g}"])
    print(f"trained {args.epochs} epochs; loss {trace[0]:.5g} -> {trace[-1]:.5g}")
    _write_manifest(out, "train-toy", args, {"ct": args.ct, "gt": args.gt},
                    {"train_s": time.perf_counter() - t0})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=1,
                   help="cap for internal worker pools (results are identical for any value)")
    p.add_argument("--window", default="-100,400", help="HU window 'lo,hi'")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="liverseg",
                                 description="Cascaded liver/lesion segmentation toolkit")
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", help="window and equalize a CT volume")
    p.add_argument("input", help="input volume (.mhd)")
    p.add_argument("--no-equalize", action="store_true",
                   help="skip histogram equalization (clamp only)")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("infer", help="run the two-stage cascade (optionally CRF-refined)")
    p.add_argument("ct", help="preprocessed CT volume (.mhd)")
    p.add_argument("--liver-probs", help="stage-1 probability volume (.mhd)")
    p.add_argument("--liver-model", help="stage-1 network checkpoint")
    p.add_argument("--lesion-probs", help="stage-2 probability volume (.mhd)")
    p.add_argument("--lesion-model", help="stage-2 network checkpoint")
    p.add_argument("--crf", help="CRF parameter file (key=value)")
    p.add_argument("--crf-stages", default="liver,lesion",
                   help="which stages the CRF refines (comma list)")
    p.add_argument("--stage2-size", default="256x256", help="stage-2 input size WxH")
    p.add_argument("--roi-pad-mm", type=float, default=10.0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--keep-all-components", action="store_true",
                   help="keep every liver component, not just the largest")
    _add_common(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="grand-challenge metrics for a prediction")
    p.add_argument("pred", help="predicted label volume (.mhd)")
    p.add_argument("gt", help="ground-truth label volume (.mhd)")
    p.add_argument("--classes", default="1,2", help="comma list of classes to score")
    _add_common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("overlay", help="render a colour error overlay for one slice")
    p.add_argument("ct")
    p.add_argument("pred")
    p.add_argument("gt")
    p.add_argument("slice_index", type=int)
    p.add_argument("--name", help="output file name (default overlay_z<k>.png)")
    _add_common(p)
    p.set_defaults(func=cmd_overlay)

    p = sub.add_parser("tune", help="random-search CRF parameters on validation cases")
    p.add_argument("cases", help="case list: 'unary.mhd intensity.mhd gt.mhd [class]' per line")
    p.add_argument("--space", help="search-space file (key=value); defaults otherwise")
    p.add_argument("--objective", default="dice", choices=["dice", "voe"])
    p.add_argument("--iterations", type=int, default=10, help="mean-field iterations per trial")
    p.add_argument("--seed", type=int, default=None, help="override the space seed")
    _add_common(p)
    p.set_defaults(func=cmd_tune)

    p = sub.add_parser("phantom", help="generate a synthetic phantom with ground truth")
    p.add_argument("--spec", help="phantom spec file (key=value); defaults otherwise")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    _add_common(p)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("train-toy", help="train the small unary network on a volume")
    p.add_argument("--ct", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--target", choices=["liver", "lesion"], default="liver")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=4)
    p.add_argument("--learning-rate", type=float, default=0.001)
    p.add_argument("--momentum", type=float, default=0.8)
    p.add_argument("--weight-decay", type=float, default=0.0005)
    p.add_argument("--hidden-channels", type=int, default=16)
    p.add_argument("--conv-layers", type=int, default=4)
    p.add_argument("--augment-factor", type=int, default=0,
                   help="augmented copies per source slice")
    p.add_argument("--max-shift-vox", type=int, default=20)
    p.add_argument("--max-rot-deg", type=float, default=10.0)
    p.add_argument("--noise-sigma", type=float, default=10.0, help="augmentation noise, HU")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=cmd_train_toy)

    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except LiverSegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
