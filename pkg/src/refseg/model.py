"""End-to-end pipeline: dual encoder -> prompter -> promptable mask generator."""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from refseg.config import TrainConfig
from refseg.lora import Partition, apply_policy
from refseg.mask_generator import DenseStem, HighResEncoder, MaskDecoder, MaskPrediction, decode, inject_dense
from refseg.prompter import AttnPrompter, PromptBundle
from refseg.text import TextEncoder, TextFeatures
from refseg.vision import ImageEncoder


@dataclass
class ModelOutput:
    prediction: MaskPrediction
    prompts: PromptBundle
    v: torch.Tensor
    text: TextFeatures


class RefSegModel(nn.Module):
    def __init__(self, cfg: TrainConfig, vocab_size: int):
        super().__init__()
        self.cfg = cfg
        self.text_encoder = TextEncoder(vocab_size, cfg.max_len, cfg.d1, cfg.text_layers, cfg.heads)
        self.image_encoder = ImageEncoder(cfg.size_low, cfg.patch_low, cfg.d1, cfg.image_layers, cfg.heads)
        if self.text_encoder.pos_embed.shape[-1] != self.image_encoder.dim:
            raise ValueError("text and low-res image encoders must share the feature dim")
        self.prompter = AttnPrompter(cfg.d1, cfg.d2, cfg.downsample, cfg.grid_low, cfg.grid_high)
        self.highres_encoder = HighResEncoder(
            cfg.size_high, cfg.patch_high, cfg.d2, cfg.highres_layers, cfg.heads
        )
        self.dense_stem = DenseStem(cfg.d2) if cfg.dense_prompt else None
        self.decoder = MaskDecoder(cfg.d2, cfg.heads, cfg.num_masks, cfg.decoder_depth)
        if cfg.text_conditioning == "constant":
            # ablation control: a learned vector that ignores the expression
            self.constant_text = nn.Parameter(torch.randn(cfg.d1) * 0.02)
        else:
            self.constant_text = None

    def encode_text(self, token_ids: torch.Tensor, pad_mask: torch.Tensor) -> TextFeatures:
        feats = self.text_encoder(token_ids, pad_mask)
        if self.constant_text is None:
            return feats
        b, n, d = feats.t_local.shape
        const = self.constant_text.to(feats.t_local.dtype)
        return TextFeatures(
            t_local=const.expand(b, n, d),
            t_global=const.expand(b, 1, d),
            pad_mask=torch.zeros_like(feats.pad_mask),
        )

    def make_prompts(self, image_low, token_ids, pad_mask) -> tuple[PromptBundle, torch.Tensor, TextFeatures]:
        text = self.encode_text(token_ids, pad_mask)
        v = self.image_encoder(image_low)
        return self.prompter(v, text.t_local, text.t_global, text.pad_mask), v, text

    def forward(
        self,
        image_low: torch.Tensor,
        image_high: torch.Tensor,
        token_ids: torch.Tensor,
        pad_mask: torch.Tensor,
        out_size: tuple[int, int] | None = None,
    ) -> ModelOutput:
        prompts, v, text = self.make_prompts(image_low, token_ids, pad_mask)
        e = self.highres_encoder(image_high)
        e = inject_dense(e, prompts.dense, self.dense_stem)
        if out_size is None:
            out_size = tuple(image_high.shape[1:3])
        pred = decode(self.decoder, e, prompts.sparse, out_size)
        return ModelOutput(prediction=pred, prompts=prompts, v=v, text=text)


def build_model(cfg: TrainConfig, vocab_size: int, adapters: bool = True) -> tuple[RefSegModel, Partition | None]:
    """Construct with seed-determined weights, then inject adapters per the policy."""
    torch.manual_seed(cfg.seed)
    model = RefSegModel(cfg, vocab_size)
    partition = apply_policy(model, cfg.policy()) if adapters else None
    return model, partition
