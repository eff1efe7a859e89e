"""Command-line surface: synth | train | eval | predict | gradcheck.

Exit codes: 0 success, 1 validation/usage error, 2 runtime failure.
stdout carries only machine-readable payload for eval and predict; human
diagnostics (including the resolved config echo) go to stderr.

An optional ``--config FILE`` (JSON object keyed by flag dest names) supplies
defaults for any subcommand; explicit flags win.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import data as D
from . import gradcheck as G
from . import metrics as M
from . import models
from . import tensor as T
from . import training as TR
from .localise import argmax_point, binarize, largest_blob_centroid

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2

_TASK_ALIAS = {"seg": TR.SEGMENTATION, "reg": TR.REGRESSION}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise SystemExit(EXIT_USAGE)


def _size(text: str) -> tuple[int, int]:
    h, _, w = text.partition("x")
    return int(h), int(w)


def _range(text: str) -> tuple[float, float]:
    lo, _, hi = text.partition(":")
    return float(lo), float(hi)


def _echo(label: str, obj) -> None:
    sys.stderr.write(f"config [{label}]: {obj}\n")


def build_parser() -> tuple[_Parser, dict[str, _Parser]]:
    parser = _Parser(prog="irisloc", description=__doc__.splitlines()[0])
    subs = parser.add_subparsers(dest="cmd", metavar="{synth,train,eval,predict,gradcheck}")
    sp: dict[str, _Parser] = {}

    p = sp["synth"] = subs.add_parser("synth", help="generate a synthetic eye-crop dataset")
    p.add_argument("--out", help="output directory")
    p.add_argument("--count", type=int, help="number of samples")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=_size, default=(64, 64), metavar="HxW")
    p.add_argument("--radius", type=_range, default=(10.0, 16.0), metavar="LO:HI")
    p.add_argument("--jitter", type=_range, default=(-6.0, 6.0), metavar="LO:HI")
    p.add_argument("--occlusion", type=float, default=0.5, help="eyelid occlusion probability")
    p.add_argument("--coverage", type=_range, default=(0.1, 0.5), metavar="LO:HI")
    p.add_argument("--shadow", type=_range, default=(0.0, 0.3), metavar="LO:HI")
    p.add_argument("--highlight", type=float, default=0.3, help="specular highlight probability")
    p.add_argument("--noise", type=float, default=0.02, help="additive noise sigma")
    p.add_argument("--interocular", type=float, default=120.0)

    p = sp["train"] = subs.add_parser("train", help="train a model on a manifest")
    p.add_argument("--task", choices=("seg", "reg"))
    p.add_argument("--manifest")
    p.add_argument("--out", help="checkpoint path")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sigma", type=float, default=3.0, help="ground-truth heatmap sigma (reg)")
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--opt", choices=("adam", "sgd"), default="adam")
    p.add_argument("--boundary-weight", type=float, default=1.0)
    p.add_argument("--size", type=_size, default=(64, 64), metavar="HxW")
    p.add_argument("--depth", type=int, default=3)
    p.add_argument("--base", type=int, default=8)
    p.add_argument("--rsu-depth", type=int, default=2)
    p.add_argument("--flip", action="store_true", help="random horizontal flip augmentation")
    p.add_argument("--checkpoint-every", type=int, default=0)
    p.add_argument("--log", help="write per-step loss/ms JSONL here")

    p = sp["eval"] = subs.add_parser("eval", help="evaluate a checkpoint, print the report")
    p.add_argument("--task", choices=("seg", "reg"))
    p.add_argument("--ckpt")
    p.add_argument("--manifest")
    p.add_argument("--format", choices=("table", "json"), default="table")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--sigma", type=float, default=None, help="sigma to echo in the report")
    p.add_argument("--name", default=None, help="dataset name for the report")

    p = sp["predict"] = subs.add_parser("predict", help="predict the iris centre of one image")
    p.add_argument("--ckpt")
    p.add_argument("--image")
    p.add_argument("--overlay", help="write an overlay image here")
    p.add_argument("--threshold", type=float, default=0.5)

    p = sp["gradcheck"] = subs.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", default=None, help=argparse.SUPPRESS)

    for sub in sp.values():
        sub.add_argument("--config", default=None, help="JSON file of flag defaults; flags win")
    return parser, sp


def _require(args, names: list[str], sub: _Parser) -> None:
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        sub.print_usage(sys.stderr)
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"missing required flags: {flags}")


def _load_config_file(path) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise UsageError(f"config file {path} must hold a JSON object")
    return doc


def cmd_synth(args) -> int:
    cfg = D.SynthConfig(
        count=args.count,
        seed=args.seed,
        image_size=args.size,
        iris_radius=args.radius,
        center_jitter=args.jitter,
        occlusion_prob=args.occlusion,
        occlusion_coverage=args.coverage,
        shadow_strength=args.shadow,
        highlight_prob=args.highlight,
        noise_sigma=args.noise,
        interocular_px=args.interocular,
    )
    _echo("synth", cfg)
    records = D.synth_generate(cfg, args.out)
    print(f"manifest={os.path.join(args.out, 'manifest.jsonl')}")
    print(f"samples={len(records)}")
    return EXIT_OK


def _model_config(args, task: str) -> models.ModelConfig:
    variant = models.U2NET_LITE if task == TR.SEGMENTATION else models.UNET_COORD
    return models.ModelConfig(
        variant,
        input_size=args.size,
        base_channels=args.base,
        depth=args.depth,
        rsu_inner_depth=args.rsu_depth,
    )


def cmd_train(args) -> int:
    task = _TASK_ALIAS[args.task]
    cfg = TR.TrainConfig(
        task=task,
        model=_model_config(args, task),
        optimiser=args.opt,
        lr=args.lr,
        batch_size=args.batch,
        max_steps=args.steps,
        seed=args.seed,
        heatmap_sigma=args.sigma,
        boundary_weight=args.boundary_weight,
        checkpoint_every=args.checkpoint_every,
        augment_flip=args.flip,
    )
    _echo("train", cfg)
    records = D.load_manifest(args.manifest, task=task)
    base = os.path.dirname(os.path.abspath(args.manifest))
    _, log = TR.train(cfg, records, args.out, log_path=args.log, base_dir=base)
    print(f"checkpoint={args.out}")
    print(f"final_loss={log.losses[-1]!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    task = _TASK_ALIAS[args.task]
    net = models.load_checkpoint(args.ckpt)
    _echo("eval", {"task": task, "ckpt": args.ckpt, "threshold": args.threshold, "sigma": args.sigma})
    records = D.load_manifest(args.manifest, task=task)
    base = os.path.dirname(os.path.abspath(args.manifest))
    name = args.name or os.path.basename(base)
    report = TR.evaluate(
        net,
        records,
        task,
        base_dir=base,
        threshold=args.threshold,
        sigma=args.sigma,
        dataset_name=name,
        model_id=os.path.basename(args.ckpt),
    )
    fmt = "json" if args.format == "json" else "text-table"
    sys.stdout.buffer.write(M.render_report(report, fmt))
    sys.stdout.flush()
    return EXIT_OK


def _crosshair(img: np.ndarray, x: float, y: float, value: float, arm: int = 3) -> None:
    h, w = img.shape
    r, c = int(round(y)), int(round(x))
    for d in range(-arm, arm + 1):
        if 0 <= r + d < h and 0 <= c < w:
            img[r + d, c] = value
        if 0 <= r < h and 0 <= c + d < w:
            img[r, c + d] = value


def _region_boundary(region: np.ndarray) -> np.ndarray:
    padded = np.pad(region, 1, constant_values=False)
    return region & (
        ~padded[:-2, 1:-1] | ~padded[2:, 1:-1] | ~padded[1:-1, :-2] | ~padded[1:-1, 2:]
    )


def cmd_predict(args) -> int:
    net = models.load_checkpoint(args.ckpt)
    _echo("predict", {"ckpt": args.ckpt, "image": args.image, "variant": net.config.variant})
    image = D.load_image(args.image)
    h, w = net.config.input_size
    if image.shape != (h, w):
        raise UsageError(f"image is {image.shape[0]}x{image.shape[1]}, model expects {h}x{w}")
    with T.no_grad():
        out = models.forward(net, image[None, None, :, :]).data[0, 0]
    if net.config.variant == models.UNET_COORD:
        point = argmax_point(out)
        region = out >= 0.5 * float(out.max())
    else:
        mask = binarize(out, args.threshold)
        point = largest_blob_centroid(mask)
        region = mask
    if point is None:
        print("x=nan y=nan")
    else:
        print(f"x={point.x:.4f} y={point.y:.4f}")
    if args.overlay:
        overlay = image.copy()
        overlay[_region_boundary(region)] = 1.0
        if point is not None:
            _crosshair(overlay, point.x, point.y, 0.0)
        D.save_image(overlay, args.overlay)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _echo("gradcheck", {"seed": args.seed})
    results = G.run_all(seed=args.seed, perturb_op=args.perturb)
    for r in results:
        print(f"{r.name:24s} {r.max_rel_err:.6e} {'PASS' if r.passed else 'FAIL'}")
    failing = [r for r in results if not r.passed]
    if failing:
        worst = ", ".join(f"{r.name} ({r.max_rel_err:.3e})" for r in failing)
        sys.stderr.write(f"gradient check failed: {worst}\n")
        return EXIT_RUNTIME
    return EXIT_OK


_REQUIRED = {
    "synth": ["out", "count"],
    "train": ["task", "manifest", "out"],
    "eval": ["task", "ckpt", "manifest"],
    "predict": ["ckpt", "image"],
    "gradcheck": [],
}

_HANDLERS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, sp = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.cmd is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        if args.config:
            defaults = _load_config_file(args.config)
            known = {a.dest for a in sp[args.cmd]._actions}
            unknown = set(defaults) - known
            if unknown:
                raise UsageError(f"config file keys not recognised: {sorted(unknown)}")
            ns = argparse.Namespace(**defaults)
            args = parser.parse_args(argv, namespace=ns)
        _require(args, _REQUIRED[args.cmd], sp[args.cmd])
        return _HANDLERS[args.cmd](args)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    except UsageError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except D.ImageFormatError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME
    except (ValueError, T.ShapeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_USAGE
    except TR.TrainingDiverged as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME
    except models.CheckpointError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME
    except OSError as exc:
        sys.stderr.write(f"error: {exc}\n")
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
