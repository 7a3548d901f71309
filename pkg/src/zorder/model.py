"""The toy layout-conditioned velocity model.

A 32x32 RGB latent is patchified into an 8x8 grid of 64-dim tokens and run
through four blocks. Each block applies global attention against the prompt
tokens, then (while the layout stage is active) decouples every instance into
a zero-padded feature layer via box-restricted attention, composites the
layers with the density/transmittance renderer, and merges the result back
through a residual connection. A shared conditioning module predicts each
instance's density and semantic query from the timestep and its caption;
block 0's instance layers feed the alignment head.

The compositor runs in NumPy with hand-written gradients; ``_CompositeStage``
bridges it into autograd.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .alignment import (
    AMODAL_CUTOFF,
    InstanceConditioner,
    MaskPredictor,
    similarity_map,
    sinusoidal_time_embedding,
)
from .attention import GlobalBlock, MMAttention, TextEmbedder
from .compositor import _backward_arrays, _forward_arrays
from .grid import TokenGrid, downsample_mask, rasterize_box, tokens_in_box
from .layout import OcclusionGraph, SceneLayout, occluder_set

__all__ = ["ModelConfig", "AblationFlags", "SceneBundle", "BatchPack", "ZOrderModel", "build_bundle"]


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch_size: int = 4
    dim: int = 64
    heads: int = 4
    depth: int = 4
    n_captions: int = 16
    n_prompts: int = 2
    caption_tokens: int = 4
    prompt_tokens: int = 8
    ffn_mult: int = 4
    time_freqs: int = 128
    align_block: int = 0
    eps: float = 1e-8
    transitive_occluders: bool = False

    def __post_init__(self) -> None:
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if not 0 <= self.align_block < self.depth:
            raise ValueError("align_block must index a block")

    @property
    def grid(self) -> TokenGrid:
        side = self.image_size // self.patch_size
        return TokenGrid(side, side)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        return cls(**data)


@dataclass(frozen=True)
class AblationFlags:
    """Forward-time switches mirroring the training ablations."""

    learned_sigma: bool = True
    fixed_sigma_value: float = 5.0
    queried_loss: bool = True
    occlusion_cond: bool = True
    instance_decouple: bool = True


@dataclass
class SceneBundle:
    """Per-scene constants precomputed for the model: token geometry,
    caption ids, occluder structure, and token-level supervision masks.
    Instances are sorted by id so accumulation order is fixed."""

    layout: SceneLayout
    prompt_id: int
    instance_ids: np.ndarray  # (n,) ascending
    caption_ids: np.ndarray  # (n,)
    omegas: list[np.ndarray]
    box_masks: np.ndarray  # (n, L) bool
    occ_matrix: np.ndarray  # (n, n) bool; (i, j) true when j is in front of i
    modal_targets: np.ndarray  # (n, L) bool
    amodal_targets: np.ndarray  # (n, L) bool

    @property
    def n_instances(self) -> int:
        return len(self.instance_ids)


def build_bundle(layout: SceneLayout, config: ModelConfig) -> SceneBundle:
    grid = config.grid
    instances = sorted(layout.instances, key=lambda inst: inst.id)
    n = len(instances)
    ids = np.array([inst.id for inst in instances], dtype=np.int64)
    index = {inst.id: k for k, inst in enumerate(instances)}
    occ = np.zeros((n, n), dtype=bool)
    if config.transitive_occluders:
        graph = OcclusionGraph.from_layout(layout)
        fronts = {inst.id: occluder_set(graph, inst.id, "transitive") for inst in instances}
    else:
        fronts = {inst.id: set(inst.occluders) for inst in instances}
    for inst in instances:
        for front in fronts[inst.id]:
            if front in index and front != inst.id:
                occ[index[inst.id], index[front]] = True
    omegas = [tokens_in_box(inst.box, grid) for inst in instances]
    box_masks = np.stack([rasterize_box(inst.box, grid).bits for inst in instances]) if n else np.zeros((0, grid.length), dtype=bool)
    modal = np.stack([downsample_mask(inst.modal_mask, grid).bits for inst in instances]) if n else np.zeros((0, grid.length), dtype=bool)
    amodal = np.stack([downsample_mask(inst.amodal_mask, grid).bits for inst in instances]) if n else np.zeros((0, grid.length), dtype=bool)
    return SceneBundle(
        layout=layout,
        prompt_id=layout.global_prompt,
        instance_ids=ids,
        caption_ids=np.array([inst.caption for inst in instances], dtype=np.int64),
        omegas=omegas,
        box_masks=box_masks,
        occ_matrix=occ,
        modal_targets=modal,
        amodal_targets=amodal,
    )


@dataclass
class BatchPack:
    """A batch of scene bundles flattened for vectorized instance processing.

    K is the total instance count across the batch; instances are ordered
    sample-major and id-ascending within each sample.
    """

    bundles: list[SceneBundle]
    slices: list[tuple[int, int]]  # per-sample [start, end) into the K axis
    sample_idx: torch.Tensor  # (K,)
    caption_ids: torch.Tensor  # (K,)
    prompt_ids: torch.Tensor  # (B,)
    omega_pad: torch.Tensor  # (K, M)
    omega_valid: torch.Tensor  # (K, M) bool
    omega_bias: torch.Tensor  # (K, M) float: 0 where valid, -inf where padded
    modal_targets: np.ndarray  # (K, L) bool
    amodal_targets: np.ndarray  # (K, L) bool

    @property
    def total_instances(self) -> int:
        return int(self.sample_idx.shape[0])


def build_pack(bundles: Sequence[SceneBundle]) -> BatchPack:
    slices, sample_idx, caption_ids, omegas = [], [], [], []
    start = 0
    for b, bundle in enumerate(bundles):
        n = bundle.n_instances
        slices.append((start, start + n))
        start += n
        sample_idx.extend([b] * n)
        caption_ids.extend(bundle.caption_ids.tolist())
        omegas.extend(bundle.omegas)
    K = start
    max_m = max((om.size for om in omegas), default=0)
    omega_pad = np.zeros((K, max_m), dtype=np.int64)
    omega_valid = np.zeros((K, max_m), dtype=bool)
    for k, om in enumerate(omegas):
        omega_pad[k, : om.size] = om
        omega_valid[k, : om.size] = True
    if K:
        modal = np.concatenate([b.modal_targets for b in bundles if b.n_instances])
        amodal = np.concatenate([b.amodal_targets for b in bundles if b.n_instances])
    else:
        length = bundles[0].box_masks.shape[1] if bundles else 0
        modal = np.zeros((0, length), dtype=bool)
        amodal = np.zeros((0, length), dtype=bool)
    bias = np.where(omega_valid, 0.0, -np.inf).astype(np.float32)
    return BatchPack(
        bundles=list(bundles),
        slices=slices,
        sample_idx=torch.as_tensor(sample_idx, dtype=torch.long),
        caption_ids=torch.as_tensor(caption_ids, dtype=torch.long),
        prompt_ids=torch.as_tensor([b.prompt_id for b in bundles], dtype=torch.long),
        omega_pad=torch.as_tensor(omega_pad),
        omega_valid=torch.as_tensor(omega_valid),
        omega_bias=torch.as_tensor(bias),
        modal_targets=modal,
        amodal_targets=amodal,
    )


class _CompositeStage(torch.autograd.Function):
    """Autograd bridge into the NumPy compositor and its analytic gradients."""

    @staticmethod
    def forward(ctx, layers: torch.Tensor, densities: torch.Tensor, pack: BatchPack, occlusion_cond: bool, eps: float):
        feats = layers.detach().numpy()
        dens = densities.detach().numpy()
        batch = len(pack.bundles)
        length, dim = feats.shape[1], feats.shape[2]
        out = np.zeros((batch, length, dim), dtype=feats.dtype)
        caches = [None] * batch
        for b, (start, end) in enumerate(pack.slices):
            if end == start:
                continue
            bundle = pack.bundles[b]
            occ = bundle.occ_matrix if occlusion_cond else np.zeros_like(bundle.occ_matrix)
            out[b], caches[b] = _forward_arrays(
                feats[start:end], dens[start:end], bundle.box_masks, occ, eps, return_cache=True
            )
        ctx.pack = pack
        ctx.occlusion_cond = occlusion_cond
        ctx.eps = eps
        ctx.caches = caches
        ctx.save_for_backward(layers, densities)
        return torch.from_numpy(out)

    @staticmethod
    def backward(ctx, grad_out: torch.Tensor):
        layers, densities = ctx.saved_tensors
        feats = layers.detach().numpy()
        dens = densities.detach().numpy()
        g = grad_out.detach().numpy()
        d_feats = np.zeros_like(feats)
        d_dens = np.zeros_like(dens)
        for b, (start, end) in enumerate(ctx.pack.slices):
            if end == start:
                continue
            bundle = ctx.pack.bundles[b]
            occ = bundle.occ_matrix if ctx.occlusion_cond else np.zeros_like(bundle.occ_matrix)
            d_feats[start:end], d_dens[start:end] = _backward_arrays(
                feats[start:end], dens[start:end], bundle.box_masks, occ, g[b], ctx.eps,
                cache=ctx.caches[b],
            )
        return torch.from_numpy(d_feats), torch.from_numpy(d_dens), None, None, None


@dataclass
class AlignOutput:
    """Alignment-head products for the batch's instances at the align block."""

    probs: torch.Tensor  # (K, h, w, 2)
    targets: torch.Tensor  # (K, h, w) float, curriculum-selected
    queries: torch.Tensor  # (K, D)


@dataclass
class ModelOutput:
    velocity: torch.Tensor  # (B, 3, H, W)
    align: AlignOutput | None


class ZOrderModel(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        grid = config.grid
        patch_dim = 3 * config.patch_size * config.patch_size
        self.patch_in = nn.Linear(patch_dim, config.dim)
        self.pos_embed = nn.Parameter(torch.randn(1, grid.length, config.dim) * 0.02)
        self.time_proj = nn.Linear(2 * config.time_freqs, config.dim)
        self.text = TextEmbedder(
            config.n_captions, config.n_prompts, config.dim, config.caption_tokens, config.prompt_tokens
        )
        self.blocks = nn.ModuleList(
            [GlobalBlock(config.dim, config.heads, config.ffn_mult) for _ in range(config.depth)]
        )
        self.conditioner = InstanceConditioner(config.dim, config.time_freqs)
        self.mask_predictor = MaskPredictor()
        self.patch_out = nn.Linear(config.dim, patch_dim)
        nn.init.zeros_(self.patch_out.weight)
        nn.init.zeros_(self.patch_out.bias)
        self._init_scaled()

    def _init_scaled(self) -> None:
        # Without normalization layers, small projections keep depth-4
        # residual streams well-conditioned.
        for module in self.modules():
            if isinstance(module, nn.Linear) and module is not self.patch_out:
                nn.init.normal_(module.weight, std=0.02)
                nn.init.zeros_(module.bias)

    def patchify(self, images: torch.Tensor) -> torch.Tensor:
        b, c, h, w = images.shape
        p = self.config.patch_size
        gh, gw = h // p, w // p
        x = images.reshape(b, c, gh, p, gw, p)
        x = x.permute(0, 2, 4, 1, 3, 5).reshape(b, gh * gw, c * p * p)
        return x

    def unpatchify(self, tokens: torch.Tensor) -> torch.Tensor:
        b, length, _ = tokens.shape
        p = self.config.patch_size
        gh = gw = self.config.image_size // p
        x = tokens.reshape(b, gh, gw, 3, p, p)
        return x.permute(0, 3, 1, 4, 2, 5).reshape(b, 3, gh * p, gw * p)

    def _decoupled_layers(
        self, tokens: torch.Tensor, pack: BatchPack, attn: MMAttention, key_bias: torch.Tensor
    ) -> torch.Tensor:
        """Instance-local attention for every instance in the batch at once.

        Reuses the enclosing block's attention parameters. Returns
        zero-padded per-instance layers (K, L, D); padded query rows are
        dropped on scatter and padded keys are masked out via ``key_bias``.
        """
        K, M = pack.omega_pad.shape
        length, dim = tokens.shape[1], tokens.shape[2]
        captions = self.text.captions(pack.caption_ids)  # (K, tc, D)
        if M == 0:
            return tokens.new_zeros(K, length, dim)
        gathered = tokens[pack.sample_idx[:, None], pack.omega_pad]  # (K, M, D)
        updated, _ = attn(gathered, captions, key_bias=key_bias)
        flat_idx = (torch.arange(K, dtype=torch.long) * length)[:, None] + pack.omega_pad
        valid = pack.omega_valid
        out = tokens.new_zeros(K * length, dim)
        out = out.index_add(0, flat_idx[valid], updated[valid])
        return out.view(K, length, dim)

    def forward(
        self,
        images: torch.Tensor,
        t: torch.Tensor,
        pack: BatchPack,
        layout_active: bool = True,
        flags: AblationFlags = AblationFlags(),
        need_align: bool = False,
    ) -> ModelOutput:
        """Predict the velocity field for a batch of latents.

        ``layout_active`` gates the whole decouple/composite stage (the
        sampler turns it off after the guidance window); the ablation flags
        select the training variants. ``need_align`` additionally returns
        the alignment-head products from the align block.
        """
        cfg = self.config
        batch = images.shape[0]
        tokens = self.patch_in(self.patchify(images))
        tokens = tokens + self.pos_embed
        tokens = tokens + self.time_proj(sinusoidal_time_embedding(t, cfg.time_freqs)).unsqueeze(1)
        prompt = self.text.prompts(pack.prompt_ids)

        K = pack.total_instances
        stage_on = layout_active and flags.instance_decouple and K > 0
        densities = None
        embeddings = None
        key_bias = None
        if stage_on:
            pooled = self.text.captions(pack.caption_ids).mean(dim=1)  # (K, D)
            embeddings = self.conditioner.embed(t[pack.sample_idx], pooled)
            if flags.learned_sigma:
                densities = self.conditioner.density(embeddings)
            else:
                densities = tokens.new_full((K, cfg.dim), flags.fixed_sigma_value)
            key_bias = torch.cat(
                [pack.omega_bias, pack.omega_bias.new_zeros(K, cfg.caption_tokens)], dim=1
            )

        align: AlignOutput | None = None
        for idx, block in enumerate(self.blocks):
            tokens = block(tokens, prompt)
            if not stage_on:
                continue
            layers = self._decoupled_layers(tokens, pack, block.attn, key_bias)  # (K, L, D)
            composed = _CompositeStage.apply(layers, densities, pack, flags.occlusion_cond, cfg.eps)
            tokens = tokens + composed
            if need_align and idx == cfg.align_block:
                queries = self.conditioner.query(embeddings)
                sims = similarity_map(layers, queries, cfg.eps)  # (K, L)
                grid = cfg.grid
                probs = self.mask_predictor(sims.view(K, grid.h, grid.w))
                target_np = np.where(
                    (t.detach().numpy()[pack.sample_idx.numpy()] < AMODAL_CUTOFF)[:, None],
                    pack.amodal_targets,
                    pack.modal_targets,
                )
                targets = torch.as_tensor(target_np, dtype=tokens.dtype).view(K, grid.h, grid.w)
                align = AlignOutput(probs=probs, targets=targets, queries=queries)

        # The head regresses the gap to the data endpoint; dividing by the
        # remaining time turns it into a velocity. The analytic 1/(1 - t)
        # gain spares the network from learning a steep t-dependent scaling;
        # the clamp keeps late-t training samples bounded.
        gap = self.unpatchify(self.patch_out(tokens))
        remaining = (1.0 - t).clamp_min(0.05).reshape(-1, 1, 1, 1)
        velocity = gap / remaining
        return ModelOutput(velocity=velocity, align=align)
