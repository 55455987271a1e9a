"""Command-line entry points: dataset generation, tracing, training, rendering.

Exit codes partition failures: 1 usage, 2 file I/O, 3 validation, 4 numerical.
The RF_SEED environment variable supplies the default --seed. Every command
is deterministic given its inputs; re-running overwrites outputs with
identical bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .errors import NumericalError, TriRenderError
from .generator import GenConfig
from .hdr import composite_lights, psnr, read_pfm, write_pfm, write_png
from .model import ModelConfig, ModelWeights, attention_maps, render
from .oracle import path_trace
from .scene import load_scene
from .tokenizer import PATCH
from .training import (
    TrainConfig,
    _model_cfg_from_json,
    generate_dataset,
    load_checkpoint,
    read_manifest,
    train_loop,
)

EXIT_USAGE = 1
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_NUMERICAL = 4


class UsageError(Exception):
    """Bad flags or malformed argument values."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; 2 is reserved for I/O here.
    def error(self, message):
        raise UsageError(message)


def _default_seed() -> int:
    raw = os.environ.get("RF_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"RF_SEED must be an integer, got {raw!r}") from None


def _resolve_seed(args) -> int:
    return args.seed if args.seed is not None else _default_seed()


def _json_document(value: str) -> dict:
    """Parse an inline JSON object or the contents of a JSON file."""
    text = value
    if not value.lstrip().startswith("{"):
        with open(value) as fh:
            text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"invalid JSON config: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError("config JSON must be an object")
    return doc


def _parse_weight(text: str) -> tuple:
    parts = text.split(",")
    if len(parts) not in (1, 3):
        raise UsageError(f"weight must be a scalar or r,g,b triple, got {text!r}")
    try:
        values = [float(p) for p in parts]
    except ValueError:
        raise UsageError(f"non-numeric weight {text!r}") from None
    return tuple(values) * 3 if len(values) == 1 else tuple(values)


def cmd_gen_data(args) -> int:
    try:
        gen = GenConfig.from_json(_json_document(args.config)) if args.config else GenConfig()
    except TriRenderError as exc:
        raise UsageError(str(exc)) from None
    if args.count < 1:
        raise UsageError("--count must be positive")
    manifest = generate_dataset(
        args.out,
        gen,
        count=args.count,
        seed=_resolve_seed(args),
        spp=args.spp,
        threads=args.threads,
    )
    print(manifest)
    return 0


def cmd_trace(args) -> int:
    scene = load_scene(args.scene)
    img = path_trace(scene, spp=args.spp, seed=_resolve_seed(args), max_depth=args.max_depth)
    write_pfm(img, args.out)
    print(args.out)
    return 0


def cmd_train(args) -> int:
    records = read_manifest(args.manifest)
    try:
        model_cfg = (
            _model_cfg_from_json(_json_document(args.model_config))
            if args.model_config
            else ModelConfig.desk()
        )
        train_cfg = (
            TrainConfig.from_json(_json_document(args.train_config))
            if args.train_config
            else TrainConfig()
        )
    except TriRenderError as exc:
        raise UsageError(str(exc)) from None
    resume = None
    if args.resume:
        resume = load_checkpoint(args.resume, expected_config=model_cfg)
        weights = resume.weights
    else:
        weights = ModelWeights.init(model_cfg, seed=train_cfg.seed)
    result = train_loop(weights, records, train_cfg, out_dir=args.out, resume=resume)
    last = result.metrics[-1] if result.metrics else result.history[-1]
    print(
        f"step {last['step']} loss {last['loss_total']:.6f}"
        f" psnr {last.get('psnr_holdout', float('nan')):.3f}"
    )
    return 0


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    ckpt = load_checkpoint(args.ckpt)
    img = render(scene, ckpt.weights)
    write_pfm(img, args.out)
    if args.png:
        write_png(img, args.png)
    print(args.out)
    return 0


def cmd_eval(args) -> int:
    records = read_manifest(args.sceneset)
    ckpt = load_checkpoint(args.ckpt)
    rows = []
    for rec in records:
        scene = load_scene(rec.scene)
        ref = read_pfm(rec.image)
        pred = render(scene, ckpt.weights)
        la = np.log1p(pred.pixels.astype(np.float64))
        lb = np.log1p(ref.pixels.astype(np.float64))
        rows.append((os.path.basename(rec.scene), psnr(pred, ref), float(np.abs(la - lb).mean())))
    with open(args.out, "w") as fh:
        fh.write("scene,psnr,l1\n")
        for name, p, l1 in rows:
            fh.write(f"{name},{p:.6f},{l1:.8f}\n")
    # aggregate over the values as written, so the report recomputes exactly
    mean_psnr = float(np.mean([float(f"{p:.6f}") for _, p, _ in rows]))
    mean_l1 = float(np.mean([float(f"{l1:.8f}") for _, _, l1 in rows]))
    print(f"rows={len(rows)} mean_psnr={mean_psnr:.6f} mean_l1={mean_l1:.8f}")
    return 0


def cmd_inspect_attn(args) -> int:
    scene = load_scene(args.scene)
    ckpt = load_checkpoint(args.ckpt)
    try:
        i, j = (int(p) for p in args.bundle.split(","))
    except ValueError:
        raise UsageError(f"--bundle expects i,j integers, got {args.bundle!r}") from None
    w, h = scene.camera.resolution
    cols, rows_grid = w // PATCH, h // PATCH
    if not (0 <= i < rows_grid and 0 <= j < cols):
        raise UsageError(
            f"bundle ({i},{j}) out of range for a {rows_grid}x{cols} patch grid"
        )
    totals, per = attention_maps(scene, ckpt.weights, i * cols + j)
    n_layers, n_heads, n_tokens = per.shape
    n_triangles = len(scene)
    with open(args.out, "w") as fh:
        header = ["token", "total"]
        header += [f"L{l}H{hd}" for l in range(n_layers) for hd in range(n_heads)]
        fh.write(",".join(header) + "\n")
        for t in range(n_tokens):
            label = f"tri{t}" if t < n_triangles else f"reg{t - n_triangles}"
            cells = [label, f"{totals[t]:.8e}"]
            cells += [
                f"{per[l, hd, t]:.8e}" for l in range(n_layers) for hd in range(n_heads)
            ]
            fh.write(",".join(cells) + "\n")
    print(args.out)
    return 0


def cmd_compose(args) -> int:
    if args.weights is None:
        weights = [(1.0, 1.0, 1.0)] * len(args.images)
    else:
        weights = [_parse_weight(w) for w in args.weights]
        if len(weights) != len(args.images):
            raise UsageError(
                f"{len(args.images)} images but {len(weights)} weights"
            )
    images = [read_pfm(p) for p in args.images]
    write_pfm(composite_lights(images, weights), args.out)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trirender", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_seed(p):
        p.add_argument("--seed", type=int, default=None, help="default: $RF_SEED or 0")

    p = sub.add_parser("gen-data", help="sample scenes and path-trace reference views")
    p.add_argument("--config", help="GenConfig JSON (inline or file path)")
    p.add_argument("--count", type=int, required=True, help="number of scenes")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--spp", type=int, default=1024)
    p.add_argument("--threads", type=int, default=1)
    add_seed(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("trace", help="path-trace one scene to a PFM image")
    p.add_argument("scene")
    p.add_argument("--spp", type=int, default=64)
    p.add_argument("--max-depth", type=int, default=8)
    p.add_argument("--out", required=True)
    add_seed(p)
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("train", help="optimize model weights on a dataset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-config", help="ModelConfig JSON (inline or file path)")
    p.add_argument("--train-config", help="TrainConfig JSON (inline or file path)")
    p.add_argument("--out", required=True, help="run directory for checkpoints and metrics")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a scene with trained weights")
    p.add_argument("scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--png", help="also write a tone-mapped PNG preview")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="per-scene PSNR/L1 report against references")
    p.add_argument("sceneset", help="dataset manifest")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True, help="report CSV path")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect-attn", help="export cross-attention for one ray bundle")
    p.add_argument("scene")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--bundle", required=True, help="patch coordinates i,j")
    p.add_argument("--out", required=True, help="weights CSV path")
    p.set_defaults(func=cmd_inspect_attn)

    p = sub.add_parser("compose", help="weighted sum of per-light renders")
    p.add_argument("images", nargs="+", help="input PFM files")
    p.add_argument("--weights", nargs="+", help="per-image scalar or r,g,b weight")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compose)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except TriRenderError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
