"""Command-line surface: pair generation, training, matching, evaluation,
gradient checking, and the ablation harness.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 check failure.
Every command that owns an output directory echoes its effective
configuration there, and rerunning with that configuration reproduces the
outputs. SFNET_THREADS sets the default for --threads; --deterministic
forces sequential execution regardless.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import fileio, grid, metrics, synthdata, visualize
from .checks import grad_check
from .losses import LossWeights, flow_consistency, mask_consistency, smoothness, total_loss_graph
from .matching import MatchParams, kernel_soft_argmax, argmax_kernels, \
    normalize_correlation_slices, fused_correlation
from .pipeline import ARGMAX_VARIANTS, Matcher
from .train import TrainConfig, TrainState, evaluate_pck, load_dataset, \
    load_train_checkpoint, save_train_checkpoint, train

__all__ = ["main"]


class UsageError(Exception):
    code = 1


class DataError(Exception):
    code = 2


class CheckFailure(Exception):
    code = 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _threads(args) -> int:
    if getattr(args, "deterministic", False):
        return 1
    if getattr(args, "threads", None):
        return max(1, args.threads)
    env = os.environ.get("SFNET_THREADS")
    return max(1, int(env)) if env else 1


def _load_json(path, what: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"{what} not found: {path}")
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} is not valid JSON ({e})")


def _echo_config(out_dir, config: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.json").write_text(json.dumps(config, indent=1, sort_keys=True))


def _require(condition: bool, message: str, error=UsageError):
    if not condition:
        raise error(message)


# ---------------------------------------------------------------------------
# gen


def _load_scene_dir(images_dir, masks_dir):
    images_dir, masks_dir = Path(images_dir), Path(masks_dir)
    _require(images_dir.is_dir(), f"image directory not found: {images_dir}", DataError)
    _require(masks_dir.is_dir(), f"mask directory not found: {masks_dir}", DataError)
    scenes = []
    for img_path in sorted(p for p in images_dir.iterdir()
                           if p.suffix in (".ppm", ".pgm")):
        candidates = [masks_dir / f"{img_path.stem}{ext}" for ext in (".pgm", ".ppm")]
        mask_path = next((c for c in candidates if c.exists()), None)
        if mask_path is None:
            raise DataError(f"no mask for image {img_path.name} in {masks_dir}")
        image = fileio.read_image(img_path)
        mask = fileio.read_image(mask_path)
        if mask.ndim == 3:
            mask = mask[:, :, 0]
        scenes.append((image, (mask.astype(np.float64) / 255.0 >= 0.5).astype(np.float64)))
    if not scenes:
        raise DataError(f"no PPM/PGM images in {images_dir}")
    return scenes


def cmd_gen(args) -> int:
    scenes = _load_scene_dir(args.images, args.masks)
    ranges = synthdata.AffineRanges()
    if args.ranges:
        ranges = synthdata.AffineRanges.from_json(_load_json(args.ranges, "ranges file"))
    h, w = scenes[0][0].shape[:2]
    for image, mask in scenes:
        _require(image.shape[:2] == (h, w), "all input images must share one size", DataError)
    gh = args.grid_height or h // 16
    gw = args.grid_width or w // 16
    try:
        synthdata.generate_dataset(scenes, args.out, count=args.count, seed=args.seed,
                                   grid_shape=(gh, gw), ranges=ranges)
    except ValueError as e:
        raise DataError(str(e))
    _echo_config(args.out, {
        "command": "gen", "images": str(args.images), "masks": str(args.masks),
        "count": args.count, "seed": args.seed, "grid_height": gh, "grid_width": gw,
        "ranges": ranges.to_json(),
    })
    print(f"wrote {args.count} pairs to {args.out}")
    return 0


# ---------------------------------------------------------------------------
# train


def _train_config(args) -> TrainConfig:
    data = {}
    if args.config:
        data = _load_json(args.config, "config file")
    try:
        config = TrainConfig.from_json(data)
    except (ValueError, TypeError) as e:
        raise UsageError(f"bad training config: {e}")
    return config


def cmd_train(args) -> int:
    config = _train_config(args)
    try:
        dataset = load_dataset(args.data)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(str(e))

    state = None
    if args.resume:
        try:
            state, _old = load_train_checkpoint(args.resume)
        except (FileNotFoundError, ValueError, KeyError) as e:
            raise DataError(f"cannot resume from {args.resume}: {e}")

    out = Path(args.out)
    _echo_config(out, {"command": "train", "data": str(args.data),
                       "resume": str(args.resume) if args.resume else None,
                       **config.to_json()})

    def progress(iteration, report):
        if iteration % max(1, config.iterations // 10) == 0 or iteration == 1:
            print(f"iter {iteration}: total={report.total:.4f} mask={report.mask:.4f} "
                  f"flow={report.flow:.4f} smooth={report.smooth:.4f}")

    state, history = train(dataset, config, state=state, progress=progress)
    save_train_checkpoint(out / "checkpoint", state, config)
    with open(out / "loss_log.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["iteration", "lr", "mask", "flow",
                                                "smooth", "total", "nf_source",
                                                "nf_target", "warnings"])
        writer.writeheader()
        for entry in history:
            row = dict(entry)
            row["warnings"] = ";".join(row["warnings"])
            writer.writerow(row)
    print(f"checkpoint and loss log written to {out}")
    return 0


# ---------------------------------------------------------------------------
# match


def _load_checkpoint(path) -> Matcher:
    try:
        matcher, _manifest = Matcher.load_checkpoint(path)
        return matcher
    except (FileNotFoundError, ValueError, KeyError) as e:
        raise DataError(f"cannot load checkpoint {path}: {e}")


def cmd_match(args) -> int:
    matcher = _load_checkpoint(args.checkpoint)
    try:
        source = fileio.read_image(args.source)
        target = fileio.read_image(args.target)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(str(e))
    if source.shape != target.shape:
        raise DataError(f"source {source.shape} and target {target.shape} shapes differ")
    factor = matcher.backbone.COARSE_FACTOR
    if source.shape[0] % factor or source.shape[1] % factor:
        raise DataError(f"image size {source.shape[1]}x{source.shape[0]} "
                        f"not divisible by the feature stride {factor}")

    flow, summary = matcher.flow(source, target, variant=args.argmax)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_grid(out / "flow.sfg", flow)
    (out / "match_summary.json").write_text(json.dumps(summary, indent=1))
    # absolute color scale: half the grid extent saturates, so near-zero
    # flows render near-white no matter what the field's own maximum is
    scale = max(flow.shape[0], flow.shape[1]) / 2.0
    fileio.write_image(out / "flow_rgb.ppm", visualize.flow_to_rgb(flow, scale))
    fileio.write_image(out / "warped_target.ppm", visualize.warp_preview(target, flow))
    _echo_config(out, {"command": "match", "checkpoint": str(args.checkpoint),
                       "source": str(args.source), "target": str(args.target),
                       "argmax": args.argmax})
    print(f"flow and previews written to {out}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _pair_flow(item, args, matcher: Matcher | None):
    if matcher is not None:
        return matcher.flow(item.pair.source_image, item.pair.target_image,
                            variant=args.argmax)[0]
    if args.flow == "gt":
        return item.pair.grid_flow
    return fileio.load_flow(args.flow)


def _eval_one(item, args, matcher, alpha):
    flow = _pair_flow(item, args, matcher)
    h, w = item.pair.image_shape
    if args.metric == "pck":
        if item.keypoints is None or item.box is None:
            raise DataError(f"pair {item.name} has no keypoint annotations")
        value = metrics.pck(flow, item.keypoints[0], item.keypoints[1],
                            (item.box["height"], item.box["width"]), alpha, (h, w))
    else:
        flow_px = grid.upsample_flow(flow, h, w)
        ltacc, iou = metrics.mask_transfer_metrics(flow_px, item.pair.source_mask,
                                                   item.pair.target_mask)
        value = ltacc if args.metric == "ltacc" else iou
    return item.name, value


def cmd_eval(args) -> int:
    _require(bool(args.flow) != bool(args.checkpoint),
             "pass exactly one of --flow or --checkpoint")
    matcher = _load_checkpoint(args.checkpoint) if args.checkpoint else None
    try:
        dataset = load_dataset(args.pairs)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(str(e))
    if args.flow and args.flow != "gt" and len(dataset) != 1:
        raise UsageError("--flow FILE applies to a single-pair dataset; use --flow gt "
                         "for per-pair ground truth")

    workers = _threads(args)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(lambda it: _eval_one(it, args, matcher, args.alpha),
                                    dataset))
    else:
        results = [_eval_one(item, args, matcher, args.alpha) for item in dataset]

    per_pair = {name: value for name, value in results}
    report = {
        "command": "eval", "metric": args.metric, "alpha": args.alpha,
        "flow": args.flow, "checkpoint": str(args.checkpoint) if args.checkpoint else None,
        "argmax": args.argmax, "pairs": str(args.pairs),
        "per_pair": per_pair,
        "mean": float(np.mean(list(per_pair.values()))),
        "pck_box": "mask bounding box (stored per pair)",
    }
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(text)
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args) -> int:
    n = args.fixture
    rng = np.random.default_rng(args.seed)
    params = MatchParams()
    fs = rng.standard_normal((n, n, 8))
    ft = rng.standard_normal((n, n, 8))
    mask_s = (rng.random((n, n)) > 0.4).astype(np.float64)
    mask_t = (rng.random((n, n)) > 0.4).astype(np.float64)

    fused = fused_correlation(fs, ft, params.epsilon)
    kernels = argmax_kernels(normalize_correlation_slices(fused), params.sigma)
    probe = (n // 2, n // 3)

    def term_through_pipeline(weights):
        def fn(p):
            return total_loss_graph(p["fs"], p["ft"], mask_s, mask_t, params, weights)[0]
        return fn

    # every check differentiates with respect to the feature grids; the loss
    # terms are isolated by their weights but still reached through matching
    point = {"fs": fs, "ft": ft}
    checks = {
        "match_coordinate_x": (
            lambda p: kernel_soft_argmax(p["c"], params, kernels=kernels)[0][probe[0], probe[1], 0],
            {"c": fused}),
        "mask_consistency": (term_through_pipeline(LossWeights(1.0, 0.0, 0.0)), point),
        "flow_consistency": (term_through_pipeline(LossWeights(0.0, 1.0, 0.0)), point),
        "smoothness": (term_through_pipeline(LossWeights(0.0, 0.0, 1.0)), point),
        "total_loss": (term_through_pipeline(LossWeights()), point),
    }

    report = {"fixture": n, "seed": args.seed, "tolerance": args.tolerance, "checks": {}}
    failed = []
    for name, (fn, point) in checks.items():
        result = grad_check(fn, point, step=args.step, tolerance=args.tolerance)
        worst_param = max(result["params"], key=lambda k: result["params"][k]["max_rel_error"])
        worst = result["params"][worst_param]
        report["checks"][name] = {
            "max_rel_error": result["max_rel_error"],
            "passed": result["passed"],
            "worst": {"param": worst_param, "index": worst["worst_index"],
                      "analytic": worst["worst_analytic"], "numeric": worst["worst_numeric"]},
        }
        if not result["passed"]:
            failed.append(name)
    report["passed"] = not failed
    print(json.dumps(report, indent=1))
    if failed:
        raise CheckFailure(f"gradient check failed for: {', '.join(failed)}")
    print("all gradient checks passed")
    return 0


# ---------------------------------------------------------------------------
# ablate


def _ablate_train(dataset, config: TrainConfig) -> Matcher:
    state, _history = train(dataset, config)
    return state.matcher


def cmd_ablate(args) -> int:
    base = _train_config(args)
    try:
        dataset = load_dataset(args.data)
    except (FileNotFoundError, ValueError) as e:
        raise DataError(str(e))
    from dataclasses import replace
    alpha = 0.1

    def pck_of(matcher, variant="kernel"):
        return evaluate_pck(matcher, dataset, alpha=alpha, variant=variant)["mean"]

    # loss-term grid: which consistency terms supervise training
    loss_rows = []
    loss_grid = [
        ("mask", dict(lambda_flow=0.0, lambda_smooth=0.0)),
        ("flow", dict(lambda_mask=0.0, lambda_smooth=0.0)),
        ("mask+flow", dict(lambda_smooth=0.0)),
        ("mask+flow+smooth", dict()),
    ]
    trained_all = None
    for label, overrides in loss_grid:
        config = replace(base, **overrides)
        matcher = _ablate_train(dataset, config)
        if label == "mask+flow+smooth":
            trained_all = matcher
        loss_rows.append({
            "row": label,
            "mask_consistency": config.lambda_mask > 0,
            "flow_consistency": config.lambda_flow > 0,
            "smoothness": config.lambda_smooth > 0,
            "pck": pck_of(matcher),
        })

    # component grid: adaptation / levels / argmax operator at train and test
    component_rows = []
    untrained = Matcher.create(seed=base.backbone_seed, widths=base.backbone_widths,
                               coarse_width=base.coarse_width, params=base.match_params())
    for test_variant in ("hard", "soft", "kernel"):
        component_rows.append({
            "adaptation": False, "multi_level": True, "train_argmax": None,
            "test_argmax": test_variant, "pck": pck_of(untrained, test_variant),
        })
    for multi_level in (False, True):
        trained_soft = _ablate_train(dataset, replace(base, multi_level=multi_level,
                                                      train_argmax="soft"))
        if multi_level and trained_all is not None:
            trained_kernel = trained_all  # same configuration as the full loss row
        else:
            trained_kernel = _ablate_train(dataset, replace(base, multi_level=multi_level))
        for train_variant, matcher, test_variant in (
                ("soft", trained_soft, "hard"),
                ("soft", trained_soft, "soft"),
                ("kernel", trained_kernel, "kernel")):
            component_rows.append({
                "adaptation": True, "multi_level": multi_level,
                "train_argmax": train_variant, "test_argmax": test_variant,
                "pck": pck_of(matcher, test_variant),
            })

    report = {
        "command": "ablate", "data": str(args.data), "alpha": alpha,
        "config": base.to_json(),
        "loss_grid": loss_rows,
        "component_grid": component_rows,
        "note": "desk-scale synthetic values; row structure only",
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation_report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    _echo_config(out, {"command": "ablate", "data": str(args.data), **base.to_json()})

    lines = ["loss grid (PCK@0.1):"]
    for row in loss_rows:
        flags = "".join("x" if row[k] else "." for k in
                        ("mask_consistency", "flow_consistency", "smoothness"))
        lines.append(f"  [{flags}] {row['row']:<18} {row['pck']:.3f}")
    lines.append("component grid (PCK@0.1):")
    for row in component_rows:
        lines.append(f"  adapt={'y' if row['adaptation'] else 'n'} "
                     f"multi={'y' if row['multi_level'] else 'n'} "
                     f"train={row['train_argmax'] or '-':<6} test={row['test_argmax']:<6} "
                     f"{row['pck']:.3f}")
    table = "\n".join(lines)
    (out / "ablation_report.txt").write_text(table + "\n")
    print(table)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="semflow",
                     description="dense matching: synthetic pairs, training, "
                                 "flows, metrics, gradient checks")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic warped-pair dataset")
    p.add_argument("--images", required=True, help="directory of PPM/PGM images")
    p.add_argument("--masks", required=True, help="directory of PGM foreground masks")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ranges", default=None, help="JSON file of affine sampling ranges")
    p.add_argument("--grid-height", type=int, default=None)
    p.add_argument("--grid-width", type=int, default=None)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train adaptation layers on a pair dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--config", default=None, help="JSON file of TrainConfig fields")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint directory to continue from")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("match", help="compute a flow between two images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--argmax", choices=ARGMAX_VARIANTS, default="kernel")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="score flows against dataset annotations")
    p.add_argument("--flow", default=None,
                   help="'gt' for stored ground truth, or an SFG1 file for a single pair")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--pairs", required=True)
    p.add_argument("--metric", choices=("pck", "ltacc", "iou"), required=True)
    p.add_argument("--alpha", type=float, default=0.1)
    p.add_argument("--argmax", choices=ARGMAX_VARIANTS, default="kernel")
    p.add_argument("--out", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify analytic gradients by finite differences")
    p.add_argument("--fixture", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train the loss and component grids, report PCK")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--deterministic", action="store_true")
    p.set_defaults(func=cmd_ablate)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return UsageError.code
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return DataError.code
    except CheckFailure as e:
        print(f"check failure: {e}", file=sys.stderr)
        return CheckFailure.code
    except fileio.GridFormatError as e:
        print(f"data error: {e}", file=sys.stderr)
        return DataError.code


if __name__ == "__main__":
    sys.exit(main())
