"""Word-level tokenizer and the EOS-pooled text encoder."""

from __future__ import annotations

import re
from collections.abc import Iterable
from dataclasses import dataclass
from pathlib import Path

import torch
from torch import nn

from refseg.layers import Block, scaled_output_norm

PAD, UNK, EOS = "<pad>", "<unk>", "<eos>"
_PUNCT = re.compile(r"[^\w\s]")


def normalize_words(expression: str) -> list[str]:
    return _PUNCT.sub(" ", expression.lower()).split()


class Tokenizer:
    """Lowercasing, punctuation-stripping whitespace tokenizer.

    Ids 0, 1, 2 are reserved for pad, unknown and end-of-sequence. Every encoded
    sequence has exactly ``max_len`` entries and the EOS id is always the last
    real (non-pad) token.
    """

    def __init__(self, words: Iterable[str], max_len: int = 16):
        if max_len < 2:
            raise ValueError("max_len must leave room for at least one word and EOS")
        self.max_len = max_len
        self.itos: list[str] = [PAD, UNK, EOS]
        for w in words:
            if w not in self.itos:
                self.itos.append(w)
        self.stoi = {w: i for i, w in enumerate(self.itos)}

    pad_id, unk_id, eos_id = 0, 1, 2

    @classmethod
    def from_expressions(cls, expressions: Iterable[str], max_len: int = 16) -> "Tokenizer":
        words = sorted({w for e in expressions for w in normalize_words(e)})
        return cls(words, max_len=max_len)

    def __len__(self) -> int:
        return len(self.itos)

    def __call__(self, expression: str) -> tuple[list[int], list[bool]]:
        return self.tokenize(expression)

    def tokenize(self, expression: str) -> tuple[list[int], list[bool]]:
        """Return ``(token_ids, pad_mask)``; ``pad_mask`` is True at pad positions."""
        words = normalize_words(expression)
        if not words:
            raise ValueError("expression is empty")
        ids = [self.stoi.get(w, self.unk_id) for w in words[: self.max_len - 1]]
        ids.append(self.eos_id)
        n_pad = self.max_len - len(ids)
        return ids + [self.pad_id] * n_pad, [False] * len(ids) + [True] * n_pad

    def save(self, path: str | Path) -> None:
        """Write the vocabulary file.

        The ``#`` header lines declare the special tokens and ``max_len``; every
        other line holds one token and its 0-based line index among non-header
        lines is the token id.
        """
        header = [
            "#refseg-vocab v1",
            f"#max_len {self.max_len}",
            f"#special pad {PAD} {self.pad_id}",
            f"#special unk {UNK} {self.unk_id}",
            f"#special eos {EOS} {self.eos_id}",
        ]
        Path(path).write_text("\n".join(header + self.itos) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Tokenizer":
        max_len = 16
        tokens: list[str] = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if line.startswith("#"):
                parts = line[1:].split()
                if parts and parts[0] == "max_len":
                    max_len = int(parts[1])
                continue
            if line:
                tokens.append(line)
        if tokens[:3] != [PAD, UNK, EOS]:
            raise ValueError(f"{path}: vocabulary must start with {PAD}, {UNK}, {EOS}")
        return cls(tokens[3:], max_len=max_len)


@dataclass
class TextFeatures:
    """Per-word features plus the sentence-level feature taken at EOS.

    ``t_local`` is ``B x L x d``, ``t_global`` is ``B x 1 x d`` and ``pad_mask``
    (``B x L``) flags rows of ``t_local`` that came from padding.
    """

    t_local: torch.Tensor
    t_global: torch.Tensor
    pad_mask: torch.Tensor


class TextEncoder(nn.Module):
    def __init__(self, vocab_size: int, max_len: int, dim: int, depth: int, num_heads: int):
        super().__init__()
        self.max_len = max_len
        self.token_embed = nn.Embedding(vocab_size, dim)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.pos_embed = nn.Parameter(torch.randn(1, max_len, dim) * 0.02)
        self.blocks = nn.ModuleList(Block(dim, num_heads) for _ in range(depth))
        self.norm = scaled_output_norm(dim)

    def hidden_states(self, token_ids: torch.Tensor, pad_mask: torch.Tensor) -> torch.Tensor:
        """All ``L + 1`` output states, ``B x max_len x d``."""
        if token_ids.shape[-1] != self.max_len:
            raise ValueError(f"expected {self.max_len} tokens, got {token_ids.shape[-1]}")
        x = self.token_embed(token_ids) + self.pos_embed
        for blk in self.blocks:
            x = blk(x, key_padding_mask=pad_mask)
        return self.norm(x)

    def forward(self, token_ids: torch.Tensor, pad_mask: torch.Tensor) -> TextFeatures:
        if token_ids.dim() == 1:
            token_ids, pad_mask = token_ids[None], pad_mask[None]
        states = self.hidden_states(token_ids, pad_mask)
        return split_at_eos(states, pad_mask)


def split_at_eos(states: torch.Tensor, pad_mask: torch.Tensor) -> TextFeatures:
    """Pull out the EOS state as the global feature; the other L states are local."""
    b, n, d = states.shape
    eos_idx = (~pad_mask).sum(dim=1) - 1
    positions = torch.arange(n, device=states.device).expand(b, n)
    keep = positions != eos_idx[:, None]
    t_global = states[torch.arange(b), eos_idx][:, None, :]
    t_local = states[keep].reshape(b, n - 1, d)
    local_pad = pad_mask[keep].reshape(b, n - 1)
    return TextFeatures(t_local=t_local, t_global=t_global, pad_mask=local_pad)


def encode_text(encoder: TextEncoder, token_ids, pad_mask) -> TextFeatures:
    token_ids = torch.as_tensor(token_ids, dtype=torch.long)
    pad_mask = torch.as_tensor(pad_mask, dtype=torch.bool)
    return encoder(token_ids, pad_mask)
