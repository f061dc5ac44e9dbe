"""Promptable mask generator: high-res encoder, dense-prompt stem and a
two-way attention decoder that returns the first of K candidate masks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from refseg.layers import MLP, Attention
from refseg.vision import ImageEncoder


class HighResEncoder(ImageEncoder):
    """Same patch-grid encoder as the low-res branch, at width ``d2``."""


def encode_image_highres(encoder: HighResEncoder, image: torch.Tensor) -> torch.Tensor:
    if image.dim() == 3:
        return encoder(image[None])[0]
    return encoder(image)


class DenseStem(nn.Module):
    """Embeds a one-channel coarse-mask prompt to ``dim`` channels.

    All biases start at zero so an all-zero prompt embeds to exactly zero.
    """

    def __init__(self, dim: int):
        super().__init__()
        hidden = max(dim // 4, 1)
        self.conv1 = nn.Conv2d(1, hidden, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(hidden, dim, kernel_size=1)
        nn.init.zeros_(self.conv1.bias)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, p_dense: torch.Tensor) -> torch.Tensor:
        # B x h x w -> B x h x w x dim
        x = self.conv2(F.gelu(self.conv1(p_dense[:, None])))
        return x.permute(0, 2, 3, 1)


def inject_dense(e: torch.Tensor, p_dense: torch.Tensor | None, stem: DenseStem | None) -> torch.Tensor:
    """Add the embedded dense prompt to the image embedding.

    With ``stem`` or ``p_dense`` set to None (dense prompts disabled) ``e`` is
    returned untouched.
    """
    if stem is None or p_dense is None:
        return e
    if p_dense.shape[-2:] != e.shape[1:3]:
        raise ValueError(
            f"dense prompt {tuple(p_dense.shape[-2:])} does not match "
            f"image embedding grid {tuple(e.shape[1:3])}"
        )
    return e + stem(p_dense)


class FourierPositionEncoding(nn.Module):
    """Fixed random-Fourier 2-D position code for the image-token grid."""

    def __init__(self, dim: int, scale: float = 1.0):
        super().__init__()
        if dim % 2:
            raise ValueError("position code dim must be even")
        gen = torch.Generator().manual_seed(0)
        self.register_buffer("gaussian", scale * torch.randn(2, dim // 2, generator=gen))

    def forward(self, h: int, w: int) -> torch.Tensor:
        ys = (torch.arange(h, dtype=torch.float32) + 0.5) / h
        xs = (torch.arange(w, dtype=torch.float32) + 0.5) / w
        grid = torch.stack(torch.meshgrid(xs, ys, indexing="xy"), dim=-1)  # h x w x 2
        proj = 2 * math.pi * (2 * grid - 1) @ self.gaussian
        return torch.cat([proj.sin(), proj.cos()], dim=-1).reshape(h * w, -1)


class TwoWayBlock(nn.Module):
    """Token self-attention, token->image and image->token cross-attention."""

    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.self_attn = Attention(dim, num_heads)
        self.norm1 = nn.LayerNorm(dim)
        self.cross_t2i = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, int(dim * mlp_ratio))
        self.norm3 = nn.LayerNorm(dim)
        self.cross_i2t = Attention(dim, num_heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, queries, keys, query_pe, key_pe):
        q = queries + query_pe
        queries = self.norm1(queries + self.self_attn(q, q, queries))
        queries = self.norm2(queries + self.cross_t2i(queries + query_pe, keys + key_pe, keys))
        queries = self.norm3(queries + self.mlp(queries))
        keys = self.norm4(keys + self.cross_i2t(keys + key_pe, queries + query_pe, queries))
        return queries, keys


@dataclass
class MaskPrediction:
    """``logits`` at ground-truth resolution (``B x H x W``) and the K raw candidates."""

    logits: torch.Tensor
    candidates: torch.Tensor

    @property
    def mask(self) -> torch.Tensor:
        return self.logits > 0

    @property
    def num_candidates(self) -> int:
        return self.candidates.shape[1]


class MaskDecoder(nn.Module):
    """Lightweight two-way decoder conditioned on sparse prompt tokens.

    Sparse tokens carry no positional code, so the output is invariant to
    their order. Candidate masks come out at 4x the embedding grid.
    """

    def __init__(self, dim: int, num_heads: int, num_masks: int = 3, depth: int = 2):
        super().__init__()
        if dim % 8:
            raise ValueError(f"decoder dim must be divisible by 8, got {dim}")
        self.num_masks = num_masks
        self.mask_tokens = nn.Embedding(num_masks, dim)
        self.pe = FourierPositionEncoding(dim)
        self.blocks = nn.ModuleList(TwoWayBlock(dim, num_heads) for _ in range(depth))
        self.final_attn = Attention(dim, num_heads)
        self.final_norm = nn.LayerNorm(dim)
        self.upscale = nn.Sequential(
            nn.ConvTranspose2d(dim, dim // 4, kernel_size=2, stride=2),
            nn.GroupNorm(1, dim // 4),
            nn.GELU(),
            nn.ConvTranspose2d(dim // 4, dim // 8, kernel_size=2, stride=2),
            nn.GELU(),
        )
        self.hypernets = nn.ModuleList(MLP(dim, dim, dim // 8) for _ in range(num_masks))

    def forward(self, e: torch.Tensor, p_sparse: torch.Tensor) -> torch.Tensor:
        """``e``: ``B x h x w x d``; ``p_sparse``: ``B x M x d``. Returns ``B x K x 4h x 4w``."""
        b, h, w, d = e.shape
        if p_sparse.shape[-1] != d:
            raise ValueError(f"sparse prompt dim {p_sparse.shape[-1]} != embedding dim {d}")
        tokens = torch.cat([self.mask_tokens.weight.expand(b, -1, -1), p_sparse], dim=1)
        keys = e.reshape(b, h * w, d)
        key_pe = self.pe(h, w).to(e.dtype)[None]
        queries = tokens
        for blk in self.blocks:
            queries, keys = blk(queries, keys, tokens, key_pe)
        queries = self.final_norm(
            queries + self.final_attn(queries + tokens, keys + key_pe, keys)
        )
        up = self.upscale(keys.transpose(1, 2).reshape(b, d, h, w))
        hyper = torch.stack(
            [net(queries[:, i]) for i, net in enumerate(self.hypernets)], dim=1
        )  # B x K x d/8
        bu, cu, hu, wu = up.shape
        return (hyper @ up.reshape(bu, cu, hu * wu)).reshape(b, self.num_masks, hu, wu)


def decode(decoder: MaskDecoder, e: torch.Tensor, p_sparse: torch.Tensor, out_size: tuple[int, int]) -> MaskPrediction:
    """Run the decoder and keep the first candidate, upsampled to ``out_size``."""
    candidates = decoder(e, p_sparse)
    first = candidates[:, :1]
    logits = F.interpolate(first, size=tuple(out_size), mode="bilinear", align_corners=False)[:, 0]
    return MaskPrediction(logits=logits, candidates=candidates)
