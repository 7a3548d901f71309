"""Toy multi-modal attention: a global block over all image tokens plus the
prompt embedding, and per-instance decoupled attention restricted to the
tokens inside one instance's box.

The joint attention runs one softmax over the concatenated visual+text
sequence with modality-specific projections, mirroring a two-stream
transformer block at desk scale. Blocks carry no normalization layers; with
zero-initialized output projections each block is exactly the identity on the
visual stream.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

__all__ = ["MMAttention", "GlobalBlock", "TextEmbedder", "decouple_instance"]


class MMAttention(nn.Module):
    """Joint softmax attention over a visual and a text stream.

    Each stream has its own query/key/value/output projections; attention
    mixes the concatenated sequence, then the streams are split back apart.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads != 0:
            raise ValueError(f"dim {dim} not divisible by heads {heads}")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.img_q = nn.Linear(dim, dim)
        self.img_k = nn.Linear(dim, dim)
        self.img_v = nn.Linear(dim, dim)
        self.img_out = nn.Linear(dim, dim)
        self.txt_q = nn.Linear(dim, dim)
        self.txt_k = nn.Linear(dim, dim)
        self.txt_v = nn.Linear(dim, dim)
        self.txt_out = nn.Linear(dim, dim)

    def _heads(self, x: torch.Tensor) -> torch.Tensor:
        b, s, _ = x.shape
        return x.view(b, s, self.heads, self.head_dim).transpose(1, 2)  # (B, h, S, dh)

    def forward(
        self,
        visual: torch.Tensor,
        text: torch.Tensor,
        key_mask: torch.Tensor | None = None,
        key_bias: torch.Tensor | None = None,
        return_probs: bool = False,
    ):
        """Attend jointly over ``visual`` (B, m, D) and ``text`` (B, n, D).

        ``key_mask`` (B, m+n) marks valid keys; padded keys receive zero
        attention. ``key_bias`` is the equivalent precomputed additive float
        mask (0 valid, -inf padded), taking precedence when given. m may be
        zero (text-only attention); n must be >= 1. Returns the updated
        (visual, text) streams, plus the attention probabilities when
        ``return_probs`` is set.
        """
        squeeze = visual.dim() == 2
        if squeeze:
            visual = visual.unsqueeze(0)
            text = text.unsqueeze(0)
            if key_mask is not None:
                key_mask = key_mask.unsqueeze(0)
            if key_bias is not None:
                key_bias = key_bias.unsqueeze(0)
        if visual.dim() != 3 or text.dim() != 3:
            raise ValueError("visual and text must be (B, tokens, dim)")
        if visual.shape[-1] != self.dim or text.shape[-1] != self.dim:
            raise ValueError(f"token dim must be {self.dim}")
        if text.shape[1] < 1:
            raise ValueError("text stream needs at least one token")
        m = visual.shape[1]
        if key_bias is None and key_mask is not None:
            key_bias = torch.zeros(key_mask.shape, dtype=visual.dtype)
            key_bias.masked_fill_(~key_mask, float("-inf"))

        q = torch.cat([self.img_q(visual), self.txt_q(text)], dim=1)
        k = torch.cat([self.img_k(visual), self.txt_k(text)], dim=1)
        v = torch.cat([self.img_v(visual), self.txt_v(text)], dim=1)
        q, k, v = self._heads(q), self._heads(k), self._heads(v)

        if return_probs:
            scores = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)  # (B, h, S, S)
            if key_bias is not None:
                scores = scores + key_bias[:, None, None, :]
            probs = scores.softmax(dim=-1)
            joint = probs @ v  # (B, h, S, dh)
        else:
            probs = None
            mask = key_bias[:, None, None, :] if key_bias is not None else None
            joint = F.scaled_dot_product_attention(q, k, v, attn_mask=mask)
        joint = joint.transpose(1, 2).reshape(visual.shape[0], -1, self.dim)

        out_visual = self.img_out(joint[:, :m])
        out_text = self.txt_out(joint[:, m:])
        if squeeze:
            out_visual, out_text = out_visual.squeeze(0), out_text.squeeze(0)
            if return_probs:
                return out_visual, out_text, probs.squeeze(0)
        if return_probs:
            return out_visual, out_text, probs
        return out_visual, out_text


class GlobalBlock(nn.Module):
    """Full-sequence attention against the prompt tokens, then a feedforward,
    with residual connections on both sublayers."""

    def __init__(self, dim: int, heads: int, ffn_mult: int = 4):
        super().__init__()
        self.attn = MMAttention(dim, heads)
        self.ffn = nn.Sequential(
            nn.Linear(dim, ffn_mult * dim),
            nn.GELU(),
            nn.Linear(ffn_mult * dim, dim),
        )

    def forward(self, tokens: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        updated, _ = self.attn(tokens, prompt)
        tokens = tokens + updated
        return tokens + self.ffn(tokens)


class TextEmbedder(nn.Module):
    """Learned lookup tables for categorical captions and global prompts."""

    def __init__(
        self,
        n_captions: int,
        n_prompts: int,
        dim: int,
        caption_tokens: int = 4,
        prompt_tokens: int = 8,
    ):
        super().__init__()
        self.caption_table = nn.Parameter(torch.randn(n_captions, caption_tokens, dim) * 0.02)
        self.prompt_table = nn.Parameter(torch.randn(n_prompts, prompt_tokens, dim) * 0.02)

    def captions(self, ids: torch.Tensor) -> torch.Tensor:
        return self.caption_table[ids]  # (K, caption_tokens, D)

    def prompts(self, ids: torch.Tensor) -> torch.Tensor:
        return self.prompt_table[ids]  # (B, prompt_tokens, D)

    @staticmethod
    def pooled(tokens: torch.Tensor) -> torch.Tensor:
        """Arithmetic mean over the token axis."""
        return tokens.mean(dim=-2)


def decouple_instance(
    features: torch.Tensor,
    omega: np.ndarray | torch.Tensor,
    caption: torch.Tensor,
    attn: MMAttention,
) -> torch.Tensor:
    """Instance-local attention: gather the tokens in ``omega``, attend them
    against the instance caption tokens, and scatter back into a zero-padded
    (L, D) layer. The updated text stream is discarded.
    """
    length, dim = features.shape
    omega = torch.as_tensor(np.asarray(omega), dtype=torch.long)
    out = features.new_zeros(length, dim)
    if omega.numel() == 0:
        return out
    updated, _ = attn(features[omega], caption)
    return out.index_add(0, omega, updated)
