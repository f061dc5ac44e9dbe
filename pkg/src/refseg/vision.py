"""Patch-grid image encoder used for both the low-res and high-res branches."""

from __future__ import annotations

import torch
from torch import nn

from refseg.layers import Block, PatchEmbed, scaled_output_norm


class ImageEncoder(nn.Module):
    """ViT-style encoder that keeps the full patch grid (no pooling, no class token).

    Input is a channel-last batch ``B x H x W x 3``; output is ``B x h x w x dim``
    with ``h = H / patch_size`` and ``w = W / patch_size``.
    """

    def __init__(self, image_size: int, patch_size: int, dim: int, depth: int, num_heads: int):
        super().__init__()
        self.patch_embed = PatchEmbed(patch_size, dim)
        gh, gw = self.patch_embed.grid(image_size, image_size)
        self.grid_size = (gh, gw)
        self.pos_embed = nn.Parameter(torch.randn(1, gh, gw, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, num_heads) for _ in range(depth))
        self.norm = scaled_output_norm(dim)

    @property
    def dim(self) -> int:
        return self.pos_embed.shape[-1]

    def forward(self, images: torch.Tensor) -> torch.Tensor:
        if images.dim() != 4 or images.shape[-1] != 3:
            raise ValueError(f"expected B x H x W x 3 images, got {tuple(images.shape)}")
        x = self.patch_embed(images)
        if x.shape[1:3] != self.pos_embed.shape[1:3]:
            raise ValueError(
                f"patch grid {tuple(x.shape[1:3])} does not match the encoder's "
                f"{tuple(self.pos_embed.shape[1:3])}"
            )
        b, h, w, c = x.shape
        x = (x + self.pos_embed).reshape(b, h * w, c)
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x).reshape(b, h, w, c)


def encode_image_lowres(encoder: ImageEncoder, image: torch.Tensor) -> torch.Tensor:
    """Encode one ``H x W x 3`` image (or a batch) into the ``h x w x d`` feature grid."""
    if image.dim() == 3:
        return encoder(image[None])[0]
    return encoder(image)
