"""Low-rank adapters on frozen linear maps and the trainability policy."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import torch
from torch import nn

from refseg.layers import Attention

TEXT_DEPTHS = ("zero", "half", "full")
ATTN_PROJECTIONS = ("q_proj", "k_proj", "v_proj", "out_proj")


class LoRALinear(nn.Module):
    """Frozen linear map plus a trainable low-rank update, ``W* = W + A @ B.T``.

    ``A`` is ``d_out x r`` and ``B`` is ``d_in x r``. There is no alpha/r
    scaling. ``B`` starts at zero so the wrapped layer reproduces the original.
    """

    def __init__(self, base: nn.Linear, rank: int, init_std: float = 0.02):
        super().__init__()
        d_out, d_in = base.weight.shape
        if rank < 1:
            raise ValueError(f"rank must be >= 1, got {rank}")
        if rank >= min(d_in, d_out):
            raise ValueError(f"rank {rank} must be below min(d_in, d_out) = {min(d_in, d_out)}")
        if rank > min(d_in, d_out) / 4:
            warnings.warn(
                f"rank {rank} is not small relative to layer size {d_out}x{d_in}",
                stacklevel=2,
            )
        self.base = base
        self.rank = rank
        self.lora_A = nn.Parameter(torch.randn(d_out, rank) * init_std)
        self.lora_B = nn.Parameter(torch.zeros(d_in, rank))

    @property
    def weight(self) -> torch.Tensor:
        return self.base.weight

    @property
    def bias(self) -> torch.Tensor | None:
        return self.base.bias

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.base(x) + (x @ self.lora_B) @ self.lora_A.T

    def merge(self) -> torch.Tensor:
        return merge(self)


def wrap_linear(layer: nn.Linear, rank: int) -> LoRALinear:
    return LoRALinear(layer, rank)


def merge(adapter: LoRALinear) -> torch.Tensor:
    """Dense effective weight ``W + A @ B.T``."""
    return adapter.base.weight + adapter.lora_A @ adapter.lora_B.T


def adapter_param_count(d_in: int, d_out: int, rank: int) -> int:
    return rank * (d_in + d_out)


@dataclass
class TrainabilityPolicy:
    """Which encoders get adapters and whether the decoder trains.

    ``text_lora_depth`` is one of ``zero`` (no text adapters), ``half`` (the
    first ``depth // 2`` text layers) or ``full``.
    """

    text_lora_depth: str = "full"
    image_lora: bool = True
    highres_lora: bool = True
    decoder_trainable: bool = True
    clip_rank: int = 16
    highres_rank: int = 16

    def __post_init__(self):
        if self.text_lora_depth not in TEXT_DEPTHS:
            raise ValueError(
                f"unknown text_lora_depth {self.text_lora_depth!r}; expected one of {TEXT_DEPTHS}"
            )


@dataclass
class Partition:
    frozen: list[str] = field(default_factory=list)
    trainable: list[str] = field(default_factory=list)


def inject_attention_adapters(blocks, rank: int) -> int:
    """Wrap the q/k/v/out projections of every attention module in ``blocks``."""
    n = 0
    for blk in blocks:
        for mod in blk.modules():
            if not isinstance(mod, Attention):
                continue
            for name in ATTN_PROJECTIONS:
                layer = getattr(mod, name)
                if isinstance(layer, nn.Linear):
                    setattr(mod, name, wrap_linear(layer, rank))
                    n += 1
    return n


def is_adapter_param(name: str) -> bool:
    return name.rsplit(".", 1)[-1] in ("lora_A", "lora_B")


def apply_policy(model: nn.Module, policy: TrainabilityPolicy) -> Partition:
    """Inject adapters per ``policy`` and set ``requires_grad`` on every parameter.

    ``model`` must expose ``text_encoder``, ``image_encoder``, ``highres_encoder``
    and ``decoder``. Base encoder weights are always frozen; everything outside
    the three encoders (prompter, dense stem, decoder) trains unless
    ``decoder_trainable`` is off, which freezes only the decoder.
    """
    if not isinstance(policy, TrainabilityPolicy):
        raise TypeError(f"expected TrainabilityPolicy, got {type(policy).__name__}")
    text_blocks = list(model.text_encoder.blocks)
    n_text = {"zero": 0, "half": len(text_blocks) // 2, "full": len(text_blocks)}[policy.text_lora_depth]
    inject_attention_adapters(text_blocks[:n_text], policy.clip_rank)
    if policy.image_lora:
        inject_attention_adapters(model.image_encoder.blocks, policy.clip_rank)
    if policy.highres_lora:
        inject_attention_adapters(model.highres_encoder.blocks, policy.highres_rank)

    encoders = ("text_encoder.", "image_encoder.", "highres_encoder.")
    part = Partition()
    for name, p in model.named_parameters():
        if name.startswith(encoders):
            train = is_adapter_param(name)
        elif name.startswith("decoder."):
            train = policy.decoder_trainable
        else:
            train = True
        p.requires_grad_(train)
        (part.trainable if train else part.frozen).append(name)
    return part
