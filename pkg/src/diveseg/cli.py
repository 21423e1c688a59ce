"""Command line entry point: ``diveseg <command> ...`` (or ``python -m diveseg``)."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import load_config, replace
from .data import CocoDataset, SegmentationDataset, export_coco, load_image, synth_generate, synth_manifest
from .evaluation import pca_visualize
from .fourier_style import forward_fft, reconstruct_style_image
from .model import DiveSeg, count_parameters, trainable_parameters

logger = logging.getLogger("diveseg")


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for kv in pairs:
        if "=" not in kv:
            raise SystemExit(f"--set expects KEY=VALUE, got {kv!r}")
        k, v = kv.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _config(args):
    overrides = _overrides(getattr(args, "set", []) or [])
    if getattr(args, "disable_aligner", False):
        overrides["model.use_aligner"] = "false"
    if getattr(args, "disable_prompter", False):
        overrides["model.use_prompter"] = "false"
    return load_config(args.config, overrides)


def _to_uint8(image: np.ndarray) -> np.ndarray:
    return np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)


def _side_by_side(left: np.ndarray, right: np.ndarray, path: str) -> None:
    gap = np.ones((left.shape[0], 4, 3))
    Image.fromarray(_to_uint8(np.concatenate([left, gap, right], axis=1))).save(path)


def _resize(image: np.ndarray, size: int) -> np.ndarray:
    if image.shape[:2] == (size, size):
        return image
    pil = Image.fromarray(_to_uint8(image)).resize((size, size), Image.BILINEAR)
    return np.asarray(pil, dtype=np.float32) / 255.0


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    from .runtime import train

    config = _config(args)
    result = train(config)
    last = result.losses[-1] if result.losses else {}
    print(f"trainable parameters: {count_parameters(trainable_parameters(result.model))}")
    if last:
        print("final: " + " ".join(f"{k}={v:.4g}" for k, v in last.items()))
    print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _eval_dataset(data: str, config, mode: str, split: str):
    from .runtime import build_dataset

    if data == "synth":
        return build_dataset(config, split)
    coco = CocoDataset(
        data,
        config.model.image_size,
        class_agnostic=mode == "agnostic",
        missing_images=config.data.missing_images,
        split=split,
    )
    return SegmentationDataset(list(coco), class_agnostic=mode == "agnostic"), coco.class_names


def cmd_eval(args) -> int:
    from .runtime import evaluate, load_checkpoint, model_from_checkpoint

    model, config = model_from_checkpoint(load_checkpoint(args.checkpoint))
    dataset, names = _eval_dataset(args.data, config, args.mode, args.split)
    report = evaluate(model, dataset, args.mode, class_names=names)
    title = f"Mask AP ({'class-agnostic' if args.mode == 'agnostic' else 'multi-class'}, {args.data})"
    print(report.table(title))
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"eval_{args.mode}.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_kv())
    print(f"wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    from .runtime import ablate

    config = _config(args)
    report = ablate(config, mode=args.mode)
    print(report.table())
    for row in report.rows[1:]:
        status = "ok" if row.param_delta == row.expected_delta else "MISMATCH"
        print(f"{row.label}: removes {row.param_delta} params (closed form {row.expected_delta}) {status}")
    return 0 if all(r.param_delta == r.expected_delta for r in report.rows) else 1


def cmd_viz_style(args) -> int:
    image = load_image(args.input)
    if args.size:
        image = _resize(image, args.size)
    style = reconstruct_style_image(forward_fft(image)).clamp()
    _side_by_side(image, style.values, args.output)
    print(f"wrote {args.output}")
    return 0


def cmd_viz_pca(args) -> int:
    from .runtime import load_checkpoint, model_from_checkpoint

    if args.checkpoint:
        model, config = model_from_checkpoint(load_checkpoint(args.checkpoint))
    else:
        config = _config(args)
        model = DiveSeg(config.model, seed=config.seed)
    model.eval()
    size = config.model.image_size
    image = _resize(load_image(args.input), size)
    batch = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1)[None].float()
    with torch.no_grad():
        tokens = model(batch).block_features[args.block - 1][0].numpy()
    grid = config.model.vit.grid_size
    result = pca_visualize(tokens, size, grid=(grid, grid), invert=args.invert)
    _side_by_side(image, result.rgb, args.output)
    ratio = ", ".join(f"{r:.3f}" for r in result.explained_variance_ratio)
    print(f"block {args.block}: explained variance {ratio}; foreground {result.foreground.mean():.2%}")
    print(f"wrote {args.output}")
    return 0


def cmd_data_export(args) -> int:
    samples = synth_generate(args.seed, args.count, args.image_size, args.num_classes)
    manifest = synth_manifest(args.seed, args.count, args.num_classes, split=args.split)
    path = export_coco(samples, args.out, manifest.class_names)
    print(f"wrote {len(samples)} images and {path}")
    return 0


def cmd_model_load(args) -> int:
    config = _config(args)
    overrides = {"model.pretrained_source": "external-weights-file", "model.weights_file": args.weights}
    config = replace(config, **overrides)
    model = DiveSeg(config.model, seed=config.seed)
    n = count_parameters(model.backbone.named_parameters())
    print(f"loaded {n} backbone parameters from {args.weights}; shapes match {config.model.vit}")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="diveseg", description="Frozen-ViT underwater instance segmentation")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def with_config(p):
        p.add_argument("--config", help="flat key = value file (defaults when omitted)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")

    p = sub.add_parser("train", help="train and write a checkpoint plus metrics.log")
    with_config(p)
    p.add_argument("--disable-aligner", action="store_true")
    p.add_argument("--disable-prompter", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mask AP of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", default="synth", help="'synth' or a COCO-format directory")
    p.add_argument("--mode", choices=("agnostic", "multi"), default="multi")
    p.add_argument("--split", default="val", help="synthetic split (train or val)")
    p.add_argument("--out", help="key=value report path (default: next to the checkpoint)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the full model and the three reduced variants")
    with_config(p)
    p.add_argument("--mode", choices=("agnostic", "multi"), default="multi")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("viz-style", help="input image next to its style image")
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--size", type=int, default=0, help="resize the input first")
    p.set_defaults(func=cmd_viz_style)

    p = sub.add_parser("viz-pca", help="input image next to a PCA rendering of block features")
    with_config(p)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--block", type=int, choices=(1, 2, 3, 4), default=4)
    p.add_argument("--invert", action="store_true", help="flip the foreground sign")
    p.set_defaults(func=cmd_viz_pca)

    p = sub.add_parser("data", help="dataset utilities")
    dsub = p.add_subparsers(dest="data_command", required=True)
    e = dsub.add_parser("export", help="write a synthetic split as a COCO-format directory")
    e.add_argument("--out", required=True)
    e.add_argument("--count", type=int, default=20)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--image-size", type=int, default=128)
    e.add_argument("--num-classes", type=int, default=4)
    e.add_argument("--split", default="train")
    e.set_defaults(func=cmd_data_export)

    p = sub.add_parser("model", help="model utilities")
    msub = p.add_subparsers(dest="model_command", required=True)
    m = msub.add_parser("load", help="check that a backbone weight file fits the configured ViT")
    with_config(m)
    m.add_argument("--weights", required=True)
    m.set_defaults(func=cmd_model_load)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
