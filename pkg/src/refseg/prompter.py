"""Text-filtered visual activations turned into sparse and dense prompts.

Feature maps are channel-last: ``v`` is ``B x h x w x d``, ``t_global`` is
``B x 1 x d`` (or ``B x d``) and ``t_local`` is ``B x L x d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class AttendedFeatures:
    v_global_attn: torch.Tensor
    v_local_attn: torch.Tensor
    v_attn: torch.Tensor


@dataclass
class PromptBundle:
    """``sparse`` is ``B x M x d2``; ``dense`` holds raw logits, ``B x h2 x w2``."""

    sparse: torch.Tensor
    dense: torch.Tensor


def _check_dims(v: torch.Tensor, t: torch.Tensor) -> None:
    if v.shape[-1] != t.shape[-1]:
        raise ValueError(f"visual dim {v.shape[-1]} != text dim {t.shape[-1]}")


def similarity(v: torch.Tensor, t_global: torch.Tensor) -> torch.Tensor:
    """Per-position dot product with the sentence feature, ``B x h x w``."""
    _check_dims(v, t_global)
    return torch.einsum("bhwd,bd->bhw", v, t_global.reshape(v.shape[0], -1))


def global_attention_map(v: torch.Tensor, t_global: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(similarity(v, t_global))


def filter_global(v: torch.Tensor, t_global: torch.Tensor) -> torch.Tensor:
    return v * global_attention_map(v, t_global)[..., None] + v


def filter_local(v: torch.Tensor, t_local: torch.Tensor, pad_mask: torch.Tensor | None = None) -> torch.Tensor:
    """Average of the per-word filtered maps over non-pad words, plus residual.

    Since ``v`` does not depend on the word, ``mean_l(v * s_l) == v * mean_l(s_l)``
    and only the ``B x L x h x w`` activation stack is materialised.
    """
    _check_dims(v, t_local)
    if pad_mask is None:
        pad_mask = torch.zeros(t_local.shape[:2], dtype=torch.bool, device=t_local.device)
    keep = (~pad_mask).to(v.dtype)
    counts = keep.sum(dim=1)
    if (counts == 0).any():
        raise ValueError("every local token is padding")
    maps = torch.sigmoid(torch.einsum("bhwd,bld->blhw", v, t_local))
    mean_map = (maps * keep[:, :, None, None]).sum(dim=1) / counts[:, None, None]
    return v * mean_map[..., None] + v


def fuse(v_global_attn: torch.Tensor, v_local_attn: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    if not (v_global_attn.shape == v_local_attn.shape == v.shape):
        raise ValueError(
            f"cannot fuse shapes {tuple(v_global_attn.shape)}, "
            f"{tuple(v_local_attn.shape)}, {tuple(v.shape)}"
        )
    return torch.cat([v_global_attn, v_local_attn, v], dim=-1)


def make_dense(v: torch.Tensor, t_global: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    """Raw similarity map bilinearly resized to ``target``; no activation."""
    sim = similarity(v, t_global)[:, None]
    return F.interpolate(sim, size=tuple(target), mode="bilinear", align_corners=False)[:, 0]


def check_downsample(s: int, h: int, w: int) -> int:
    """Number of stride-2 blocks for rate ``s``; raises if ``s`` is unusable."""
    if s < 2 or s & (s - 1):
        raise ValueError(f"downsample rate must be a power of two >= 2, got {s}")
    if h % s or w % s:
        raise ValueError(f"feature grid {h}x{w} is not divisible by downsample rate {s}")
    return s.bit_length() - 1


class ConvBNGELU(nn.Sequential):
    def __init__(self, dim: int):
        super().__init__(
            nn.Conv2d(dim, dim, kernel_size=3, stride=2, padding=1),
            nn.BatchNorm2d(dim),
            nn.GELU(),
        )


class AttnPrompter(nn.Module):
    """Filters ``v`` with the text features and emits a :class:`PromptBundle`."""

    def __init__(self, d1: int, d2: int, downsample: int, grid: tuple[int, int], dense_size: tuple[int, int]):
        super().__init__()
        n_blocks = check_downsample(downsample, *grid)
        self.downsample = downsample
        self.grid = tuple(grid)
        self.dense_size = tuple(dense_size)
        self.conv_dc = nn.Conv2d(3 * d1, d2, kernel_size=1)
        self.conv_ds = nn.Sequential(*(ConvBNGELU(d2) for _ in range(n_blocks)))

    @property
    def num_prompts(self) -> int:
        return (self.grid[0] // self.downsample) * (self.grid[1] // self.downsample)

    def attend(self, v, t_local, t_global, pad_mask=None) -> AttendedFeatures:
        g = filter_global(v, t_global)
        loc = filter_local(v, t_local, pad_mask)
        return AttendedFeatures(g, loc, fuse(g, loc, v))

    def make_sparse(self, v_attn: torch.Tensor) -> torch.Tensor:
        check_downsample(self.downsample, v_attn.shape[1], v_attn.shape[2])
        x = self.conv_ds(self.conv_dc(v_attn.permute(0, 3, 1, 2)))
        # row-major flatten of the reduced grid
        return x.flatten(2).transpose(1, 2)

    def forward(self, v, t_local, t_global, pad_mask=None) -> PromptBundle:
        attended = self.attend(v, t_local, t_global, pad_mask)
        return PromptBundle(
            sparse=self.make_sparse(attended.v_attn),
            dense=make_dense(v, t_global, self.dense_size),
        )
