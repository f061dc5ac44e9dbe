"""BCE training with frozen backbones, AdamW and warmup + cosine schedule."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from refseg.config import ConfigError, RunConfig, TrainConfig, parse_config
from refseg.data import Batch, DatasetManifest, DualResSample, iter_batches, prepare_split
from refseg.metrics import EvalReport, evaluate_pairs
from refseg.model import RefSegModel, build_model
from refseg.text import Tokenizer

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "refseg-checkpoint-v1"


class TrainingError(RuntimeError):
    pass


def bce_loss(logits: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean per-pixel binary cross-entropy in the stable logit form."""
    if logits.shape != gt.shape:
        raise ValueError(f"logits {tuple(logits.shape)} and mask {tuple(gt.shape)} differ in shape")
    return F.binary_cross_entropy_with_logits(logits, gt.to(logits.dtype))


def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``total_steps``."""
    if total_steps <= 0 or not 0 <= warmup_steps < total_steps:
        raise ValueError(f"need 0 <= warmup ({warmup_steps}) < total ({total_steps})")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    progress = (step - warmup_steps) / (total_steps - warmup_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.AdamW:
    params = [p for p in model.parameters() if p.requires_grad]
    if not params:
        raise TrainingError("model has no trainable parameters")
    return torch.optim.AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)


def forward_batch(model: RefSegModel, batch: Batch):
    return model(
        batch.image_low, batch.image_high, batch.token_ids, batch.pad_mask, out_size=tuple(batch.mask.shape[-2:])
    )


def train_step(model: RefSegModel, batch: Batch, optimizer: torch.optim.Optimizer, lr: float | None = None) -> float:
    """One AdamW update on ``batch``; only parameters with ``requires_grad`` move."""
    model.train()
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    out = forward_batch(model, batch)
    loss = bce_loss(out.prediction.logits, batch.mask)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} on batch {batch.ids[:4]}")
    loss.backward()
    optimizer.step()
    return float(loss.item())


@torch.no_grad()
def predict_masks(model: RefSegModel, batch: Batch) -> torch.Tensor:
    model.eval()
    return forward_batch(model, batch).prediction.mask


def evaluate(
    model: RefSegModel,
    samples: Sequence[DualResSample],
    batch_size: int = 16,
    predictor: Callable[[Batch], torch.Tensor] | None = None,
) -> EvalReport:
    """Score every sample; ``predictor`` defaults to the model's thresholded mask."""
    if not samples:
        raise ValueError("no samples to evaluate")
    predictor = predictor or (lambda b: predict_masks(model, b))
    pairs, ids = [], []
    for batch in iter_batches(list(samples), batch_size):
        pred = predictor(batch)
        for i in range(len(batch)):
            pairs.append((pred[i].cpu().numpy(), batch.mask[i].numpy()))
        ids.extend(batch.ids)
    return evaluate_pairs(pairs, ids)


def param_checksums(model: torch.nn.Module, names: Sequence[str] | None = None) -> dict[str, str]:
    params = dict(model.named_parameters())
    names = list(params) if names is None else names
    return {n: hashlib.sha256(params[n].detach().cpu().contiguous().numpy().tobytes()).hexdigest() for n in names}


# checkpoints


def save_checkpoint(path: Path, model: RefSegModel, tokenizer: Tokenizer, run: RunConfig, **state) -> None:
    payload = {
        "format": CHECKPOINT_FORMAT,
        "config": run.to_dict(),
        "vocab": tokenizer.itos[3:],
        "max_len": tokenizer.max_len,
        "model": model.state_dict(),
        **state,
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[RefSegModel, Tokenizer, RunConfig, dict]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if payload.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    run = parse_config(payload["config"])
    tokenizer = Tokenizer(payload["vocab"], max_len=payload["max_len"])
    model, _ = build_model(run.train, len(tokenizer))
    load_state_checked(model, payload["model"])
    return model, tokenizer, run, payload


def load_state_checked(model: torch.nn.Module, state: dict) -> None:
    """Load a state dict, naming both shapes on any mismatch."""
    own = model.state_dict()
    missing = sorted(set(own) - set(state))
    extra = sorted(set(state) - set(own))
    if missing or extra:
        raise ConfigError(f"checkpoint/model parameter mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
    for k, v in state.items():
        if own[k].shape != v.shape:
            raise ConfigError(
                f"shape mismatch for {k}: checkpoint {tuple(v.shape)} vs config {tuple(own[k].shape)}"
            )
    model.load_state_dict(state)


# loop


@dataclass
class TrainResult:
    model: RefSegModel
    tokenizer: Tokenizer
    steps: list[dict] = field(default_factory=list)
    evals: list[dict] = field(default_factory=list)
    best_path: Path | None = None
    final_path: Path | None = None
    final_report: EvalReport | None = None


def _write_jsonl(path: Path, records: list[dict]) -> None:
    path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")


def train_loop(
    run: RunConfig,
    manifest: DatasetManifest,
    resume: str | Path | None = None,
    stop_after_epoch: int | None = None,
) -> TrainResult:
    """Train for ``run.train.epochs`` epochs, evaluating on ``val`` after each.

    Writes ``last.pt`` (resumable) every epoch, ``best.pt`` by val gIoU,
    ``final.pt``, plus ``train_log.jsonl`` ({step, loss, lr}),
    ``eval_log.jsonl`` and ``vocab.txt`` into ``run.out_dir``.
    ``stop_after_epoch`` simulates an interruption.
    """
    cfg = run.train
    out = Path(run.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    payload: dict = {}
    if resume is not None:
        model, tokenizer, _, payload = load_checkpoint(resume)
    else:
        train_expr = [e.expression for e in manifest.split("train")]
        if not train_expr:
            raise TrainingError("manifest has no training samples")
        tokenizer = Tokenizer.from_expressions(train_expr, max_len=cfg.max_len)
        model, _ = build_model(cfg, len(tokenizer))
    tokenizer.save(out / "vocab.txt")

    train_set = prepare_split(manifest, "train", cfg.size_low, cfg.size_high, tokenizer)
    val_set = prepare_split(manifest, "val", cfg.size_low, cfg.size_high, tokenizer)
    if not train_set:
        raise TrainingError("manifest has no training samples")

    n_batches = len(list(iter_batches(train_set, cfg.batch_size)))
    total = cfg.epochs * n_batches
    warmup = cfg.warmup_for(total)
    optimizer = make_optimizer(model, cfg)

    step, start_epoch, best = 0, 0, -1.0
    steps: list[dict] = []
    evals: list[dict] = []
    if payload:
        optimizer.load_state_dict(payload["optimizer"])
        step, start_epoch, best = payload["step"], payload["epoch"], payload["best_giou"]
        steps, evals = payload["steps"], payload["evals"]

    best_path, last_path = out / "best.pt", out / "last.pt"
    report = None
    for epoch in range(start_epoch, cfg.epochs):
        gen = torch.Generator().manual_seed(cfg.seed * 100_003 + epoch)
        for batch in iter_batches(train_set, cfg.batch_size, generator=gen):
            lr = lr_at(step, total, warmup, cfg.lr)
            loss = train_step(model, batch, optimizer, lr)
            steps.append({"step": step, "loss": loss, "lr": lr})
            step += 1
        record = {"epoch": epoch + 1, "step": step, "train_loss": steps[-1]["loss"]}
        if val_set:
            report = evaluate(model, val_set, cfg.batch_size)
            record.update(giou=report.giou, ciou=report.ciou, pr={f"{k:.1f}": v for k, v in report.pr.items()})
            if report.giou > best:
                best = report.giou
                save_checkpoint(best_path, model, tokenizer, run, epoch=epoch + 1, step=step, giou=best)
        evals.append(record)
        log.info("epoch %d/%d loss %.4f %s", epoch + 1, cfg.epochs, record["train_loss"],
                 f"val gIoU {record['giou']:.4f}" if "giou" in record else "")
        save_checkpoint(
            last_path, model, tokenizer, run,
            optimizer=optimizer.state_dict(), step=step, epoch=epoch + 1, best_giou=best,
            steps=steps, evals=evals,
        )
        _write_jsonl(out / "train_log.jsonl", steps)
        _write_jsonl(out / "eval_log.jsonl", evals)
        if stop_after_epoch is not None and epoch + 1 >= stop_after_epoch and epoch + 1 < cfg.epochs:
            return TrainResult(model, tokenizer, steps, evals, best_path if best >= 0 else None, None, report)

    final_path = out / "final.pt"
    save_checkpoint(final_path, model, tokenizer, run, step=step, epoch=cfg.epochs)
    if best < 0:
        best_path = final_path
    return TrainResult(model, tokenizer, steps, evals, best_path, final_path, report)
