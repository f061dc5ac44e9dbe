"""Command-line entry point: synth, train, eval, infer, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Callable, Sequence
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from refseg.config import ConfigError, RunConfig, load_config
from refseg.data import Batch, ManifestError, Triplet, load_manifest, prepare_split, preprocess_dual, read_image
from refseg.metrics import EvalReport, format_table
from refseg.plotting import plot_ablation, plot_eval, plot_training, save_heatmap
from refseg.synthetic import generate_synthetic
from refseg.train import TrainingError, evaluate, load_checkpoint, load_state_checked, train_loop

log = logging.getLogger("refseg")

# axis -> (table id, config field, [(row label, value), ...])
ABLATION_AXES: dict[str, tuple[int, str, list[tuple[str, object]]]] = {
    "rank": (1, "lora_rank", [("8", 8), ("16", 16), ("32", 32)]),
    "text_depth": (2, "text_lora_depth", [("zero", "zero"), ("half", "half"), ("full", "full")]),
    "downsample": (3, "downsample", [("2", 2), ("4", 4), ("8", 8)]),
    "dense": (4, "dense_prompt", [("w/o", False), ("w/", True)]),
}


class CLIError(Exception):
    pass


def _emit(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


# train


def run_train(run: RunConfig, resume: str | None = None) -> EvalReport | None:
    if run.manifest is None:
        raise CLIError("no manifest given (config key 'manifest' or --manifest)")
    manifest = load_manifest(run.manifest)
    result = train_loop(run, manifest, resume=resume)
    out = Path(run.out_dir)
    plot_training(result.steps, result.evals, out / "training.png")
    report = result.final_report
    if report is not None:
        report.save(out / "val_report.json")
        table = format_table([(["val"], report.row())], lead=("Split",))
        (out / "val_table.txt").write_text(table)
        _emit(table)
    _emit(f"checkpoint: {result.final_path}\n")
    return report


# eval


def run_eval(
    checkpoint: str,
    manifest_path: str,
    split: str,
    out_dir: str | Path,
    config: str | None = None,
    predictor: Callable[[Batch], torch.Tensor] | None = None,
) -> EvalReport:
    """Evaluate a checkpoint on one split; writes report JSON, table and figure."""
    model, tokenizer, run, payload = load_checkpoint(checkpoint)
    if config is not None:
        override = load_config(config)
        from refseg.model import build_model

        model, _ = build_model(override.train, len(tokenizer))
        load_state_checked(model, payload["model"])
        run = override
    manifest = load_manifest(manifest_path)
    samples = prepare_split(manifest, split, run.train.size_low, run.train.size_high, tokenizer)
    if not samples:
        raise CLIError(f"split {split!r} has no samples")
    report = evaluate(model, samples, run.train.batch_size, predictor=predictor)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.save(out / f"{split}_report.json")
    table = format_table([([split], report.row())], lead=("Split",))
    (out / f"{split}_table.txt").write_text(table)
    plot_eval(report, out / f"{split}_eval.png", title=f"{split} (n={report.n})")
    _emit(table)
    return report


# infer


@torch.no_grad()
def run_infer(checkpoint: str, image_path: str, expression: str, out: str | Path, heatmap: str | None = None) -> np.ndarray:
    model, tokenizer, run, _ = load_checkpoint(checkpoint)
    cfg = run.train
    image = read_image(image_path)
    triplet = Triplet(image, np.zeros(image.shape[:2], np.uint8), expression)
    sample = preprocess_dual(triplet, cfg.size_low, cfg.size_high, tokenizer)
    model.eval()
    output = model(
        sample.image_lowres[None], sample.image_highres[None],
        sample.token_ids[None], sample.pad_mask[None], out_size=image.shape[:2],
    )
    mask = output.prediction.mask[0].numpy().astype(np.uint8)
    Image.fromarray(mask * 255, mode="L").save(out)
    if heatmap:
        save_heatmap(output.prompts.dense[0].numpy(), heatmap)
    return mask


# ablate


def run_ablation(
    run: RunConfig, axes: Sequence[str], split: str = "test"
) -> list[tuple[str, int, list[str], list[list[float]]]]:
    """Train and evaluate each setting of each axis; returns one block of rows per axis."""
    unknown = [a for a in axes if a not in ABLATION_AXES]
    if unknown:
        raise CLIError(f"unknown ablation axis {unknown[0]!r}; valid axes: {', '.join(ABLATION_AXES)}")
    if run.manifest is None:
        raise CLIError("no manifest given (config key 'manifest' or --manifest)")
    manifest = load_manifest(run.manifest)
    # validate every setting before any training starts
    settings = {}
    for axis in axes:
        _, field, values = ABLATION_AXES[axis]
        settings[axis] = [(label, run.with_overrides(**{field: value})) for label, value in values]
    base_out = Path(run.out_dir)
    blocks = []
    for axis in axes:
        table_id = ABLATION_AXES[axis][0]
        labels, rows = [], []
        for label, cfg in settings[axis]:
            sub = base_out / axis / label.replace("/", "")
            cfg = RunConfig(train=cfg.train, manifest=cfg.manifest, out_dir=str(sub))
            result = train_loop(cfg, manifest)
            samples = prepare_split(manifest, split, cfg.train.size_low, cfg.train.size_high, result.tokenizer)
            if not samples:
                raise CLIError(f"split {split!r} has no samples")
            report = evaluate(result.model, samples, cfg.train.batch_size)
            report.save(sub / f"{split}_report.json")
            labels.append(label)
            rows.append(report.row())
            log.info("ablation %s=%s gIoU %.4f", axis, label, report.giou)
        blocks.append((axis, table_id, labels, rows))
    return blocks


def ablation_table(blocks) -> str:
    rows = [([str(tid), label], row) for _, tid, labels, rs in blocks for label, row in zip(labels, rs)]
    return format_table(rows, lead=("ID", "Setting"))


# argument parsing


def _overrides(args) -> dict:
    return {"manifest": getattr(args, "manifest", None), "out_dir": getattr(args, "out", None),
            "seed": getattr(args, "seed", None)}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refseg", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate the synthetic shapes dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=500)
    s.add_argument("--canvas", type=int, default=128)
    s.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("train", help="train from a run config")
    t.add_argument("--config", required=True)
    t.add_argument("--manifest")
    t.add_argument("--out")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="resume from a last.pt checkpoint")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--config", help="rebuild the model from this config instead of the embedded one")
    e.add_argument("--out", default=".")

    i = sub.add_parser("infer", help="segment one image given an expression")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--image", required=True)
    i.add_argument("--expression", required=True)
    i.add_argument("--out", required=True, help="output mask PNG")
    i.add_argument("--heatmap", help="optional dense-prompt heatmap PNG")

    a = sub.add_parser("ablate", help="sweep ablation axes and print a results table")
    a.add_argument("--config", required=True)
    a.add_argument("--axis", required=True, choices=(*ABLATION_AXES, "all"))
    a.add_argument("--manifest")
    a.add_argument("--split", default="test", choices=("train", "val", "test"))
    a.add_argument("--out")
    a.add_argument("--seed", type=int)
    return p


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            m = generate_synthetic(args.n, args.canvas, args.seed, args.out)
            _emit(f"wrote {len(m)} samples to {Path(args.out) / 'manifest.jsonl'}\n")
        elif args.command == "train":
            run = load_config(args.config).with_overrides(**_overrides(args))
            (Path(run.out_dir)).mkdir(parents=True, exist_ok=True)
            (Path(run.out_dir) / "config.json").write_text(json.dumps(run.to_dict(), indent=2))
            run_train(run, resume=args.resume)
        elif args.command == "eval":
            run_eval(args.checkpoint, args.manifest, args.split, args.out, config=args.config)
        elif args.command == "infer":
            mask = run_infer(args.checkpoint, args.image, args.expression, args.out, args.heatmap)
            _emit(f"wrote {args.out} ({int(mask.sum())} foreground pixels)\n")
        elif args.command == "ablate":
            run = load_config(args.config).with_overrides(**_overrides(args))
            axes = list(ABLATION_AXES) if args.axis == "all" else [args.axis]
            blocks = run_ablation(run, axes, split=args.split)
            table = ablation_table(blocks)
            out = Path(run.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "ablation_table.txt").write_text(table)
            (out / "ablation.json").write_text(json.dumps(
                [{"axis": ax, "id": tid, "rows": dict(zip(labels, rows))} for ax, tid, labels, rows in blocks],
                indent=2))
            plot_ablation([(ax, labels, rows) for ax, _, labels, rows in blocks], out / "ablation.png")
            _emit(table)
    except (CLIError, ConfigError, ManifestError, FileNotFoundError, ValueError, TrainingError) as exc:
        print(f"refseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
