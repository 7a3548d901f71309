"""Queried alignment head: per-instance conditioning, similarity maps, and
the mask-prediction loss with its timestep curriculum.

A shared conditioning module fuses the timestep with the instance's pooled
caption embedding, then two parallel projections derive a semantic query
vector and a non-negative per-channel density. The query probes the
instance's feature layer via cosine similarity; a small CNN refines the
similarity map into background/foreground probabilities supervised by the
ground-truth masks. Early in the flow (high noise) the supervision target is
the amodal mask, later the visible one.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

from .grid import TokenMask

__all__ = [
    "AMODAL_CUTOFF",
    "SIM_EPS",
    "PROB_CLAMP",
    "sinusoidal_time_embedding",
    "TimeTextEmbed",
    "InstanceConditioner",
    "similarity_map",
    "MaskPredictor",
    "alignment_loss",
    "select_supervision_mask",
]

# Timesteps below the cutoff (high noise: t=0 is pure noise) supervise with
# the amodal mask; at and above it, with the modal mask.
AMODAL_CUTOFF = 0.3
SIM_EPS = 1e-8
PROB_CLAMP = 1e-7


def sinusoidal_time_embedding(t: torch.Tensor, n_freqs: int = 128) -> torch.Tensor:
    """Sin/cos features of a [0, 1] timestep over geometrically spaced frequencies.

    The timestep is scaled by 1000 and the frequencies decay from 1 to 1e-4,
    so the fastest feature completes a period over ~0.6% of the range: fine
    resolution while staying smooth in t.
    """
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("timestep must lie in [0, 1]")
    exponents = torch.arange(n_freqs, dtype=t.dtype, device=t.device) / max(n_freqs - 1, 1)
    freqs = torch.pow(torch.tensor(10000.0, dtype=t.dtype, device=t.device), -exponents)
    angles = t[..., None] * 1000.0 * freqs  # (..., n_freqs)
    return torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)


class TimeTextEmbed(nn.Module):
    """Fuse the timestep with the pooled caption embedding into one vector."""

    def __init__(self, dim: int, n_freqs: int = 128):
        super().__init__()
        self.n_freqs = n_freqs
        self.time_in = nn.Linear(2 * n_freqs, dim)
        self.text_in = nn.Linear(dim, dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, t: torch.Tensor, pooled_text: torch.Tensor) -> torch.Tensor:
        fused = self.time_in(sinusoidal_time_embedding(t, self.n_freqs)) + self.text_in(pooled_text)
        return self.out(F.gelu(fused))


class InstanceConditioner(nn.Module):
    """SiLU on the time-text embedding, then two parallel projection heads:
    one for the semantic query, one for the (softplus, hence non-negative)
    density."""

    def __init__(self, dim: int, n_freqs: int = 128):
        super().__init__()
        self.time_text = TimeTextEmbed(dim, n_freqs)
        self.query_proj = nn.Linear(dim, dim)
        self.density_proj = nn.Linear(dim, dim)

    def embed(self, t: torch.Tensor, pooled_text: torch.Tensor) -> torch.Tensor:
        return self.time_text(t, pooled_text)

    def query(self, embedding: torch.Tensor) -> torch.Tensor:
        return self.query_proj(F.silu(embedding))

    def density(self, embedding: torch.Tensor) -> torch.Tensor:
        raw = self.density_proj(F.silu(embedding))
        # softplus underflows to 0.0 for very negative inputs; clamp to the
        # smallest positive normal so density stays strictly positive.
        return F.softplus(raw).clamp_min(torch.finfo(raw.dtype).tiny)


def similarity_map(features: torch.Tensor, query: torch.Tensor, eps: float = SIM_EPS) -> torch.Tensor:
    """Cosine similarity between every token feature and the query.

    ``features`` is (..., L, D), ``query`` (..., D); returns (..., L) values
    in [-1, 1]. Zero-feature tokens score exactly 0; a zero query is an
    error because its direction is undefined.
    """
    qnorm = query.norm(dim=-1, keepdim=True)
    if torch.any(qnorm == 0):
        raise ValueError("query vector must be nonzero")
    fnorm = features.norm(dim=-1)
    dots = (features * query.unsqueeze(-2)).sum(dim=-1)
    return dots / ((fnorm + eps) * qnorm)


class MaskPredictor(nn.Module):
    """Lightweight CNN refining a similarity map into a 2-class probability map.

    3x3 conv (1 -> 32, padding 1) + GELU, 3x3 conv (32 -> 16, padding 1)
    + GELU, 1x1 conv (16 -> 2), softmax over the two channels per pixel.
    Channel 0 is background, channel 1 foreground.
    """

    def __init__(self):
        super().__init__()
        self.conv1 = nn.Conv2d(1, 32, kernel_size=3, padding=1)
        self.conv2 = nn.Conv2d(32, 16, kernel_size=3, padding=1)
        self.conv3 = nn.Conv2d(16, 2, kernel_size=1)

    def forward(self, sim: torch.Tensor) -> torch.Tensor:
        """Map (K, H, W) or (H, W) similarity values to (..., H, W, 2) probabilities."""
        squeeze = sim.dim() == 2
        if squeeze:
            sim = sim.unsqueeze(0)
        x = sim.unsqueeze(1)  # (K, 1, H, W)
        x = F.gelu(self.conv1(x))
        x = F.gelu(self.conv2(x))
        logits = self.conv3(x)  # (K, 2, H, W)
        probs = logits.softmax(dim=1).permute(0, 2, 3, 1)  # (K, H, W, 2)
        return probs.squeeze(0) if squeeze else probs


def alignment_loss(
    predictions: Sequence[torch.Tensor] | torch.Tensor,
    targets: Sequence[TokenMask | torch.Tensor] | torch.Tensor,
) -> torch.Tensor:
    """Cross-entropy between predicted (H, W, 2) maps and binary masks.

    Averages over the total pixel count across all instances; probabilities
    are clamped to [1e-7, 1 - 1e-7] before the log.
    """
    if isinstance(predictions, torch.Tensor):
        preds = predictions if predictions.dim() == 4 else predictions.unsqueeze(0)
    else:
        if len(predictions) == 0:
            raise ValueError("alignment_loss requires at least one prediction")
        preds = torch.stack(list(predictions))
    if isinstance(targets, torch.Tensor):
        tgt = targets if targets.dim() == 3 else targets.unsqueeze(0)
    else:
        rows = [
            torch.as_tensor(m.to_grid().copy()) if isinstance(m, TokenMask) else torch.as_tensor(m)
            for m in targets
        ]
        if len(rows) == 0:
            raise ValueError("alignment_loss requires at least one target")
        tgt = torch.stack(rows)
    if preds.shape[0] == 0:
        raise ValueError("alignment_loss requires at least one prediction")
    if preds.shape[:3] != tgt.shape:
        raise ValueError(f"prediction shape {tuple(preds.shape[:3])} does not match targets {tuple(tgt.shape)}")
    tgt = tgt.to(dtype=preds.dtype)
    clamped = preds.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    log_bg = clamped[..., 0].log()
    log_fg = clamped[..., 1].log()
    return -(tgt * log_fg + (1.0 - tgt) * log_bg).mean()


def select_supervision_mask(t: float, modal: TokenMask, amodal: TokenMask) -> TokenMask:
    """Amodal target during high noise (t < cutoff), modal at and after it."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("timestep must lie in [0, 1]")
    if modal.grid != amodal.grid:
        raise ValueError("modal and amodal masks must share a grid")
    return amodal if t < AMODAL_CUTOFF else modal
