"""Rectified-flow training and sampling for the layout-conditioned model.

Training draws (noise, data, timestep) triples, interpolates along the
straight path ``z_t = t * x1 + (1 - t) * x0``, and regresses the velocity
``x1 - x0``; the queried alignment loss joins with weight ``lambda_align``.
Sampling integrates the learned velocity with a uniform Euler schedule from
t=0 (pure noise) to t=1, keeping the layout stage active only for the first
``ceil(guidance_fraction * num_steps)`` steps and passing features straight
through the residual path afterwards.

The latent space is pixel space scaled to [-1, 1]; there is no autoencoder.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .alignment import alignment_loss
from .checkpoint import load_checkpoint, save_checkpoint
from .layout import SceneLayout
from .model import AblationFlags, BatchPack, ModelConfig, SceneBundle, ZOrderModel, build_bundle, build_pack

__all__ = [
    "TrainConfig",
    "SamplerConfig",
    "FlowTrainError",
    "interpolate",
    "flow_loss",
    "total_loss",
    "TrainState",
    "make_train_state",
    "train_step",
    "fit",
    "sample",
    "sample_batch",
    "decode_latent",
    "encode_image",
    "metrics_to_csv",
    "save_model",
    "load_model",
]


class FlowTrainError(RuntimeError):
    """Raised when a loss component turns non-finite during training."""


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 5000
    batch_size: int = 16
    lr: float = 1e-4
    seed: int = 0
    lambda_align: float = 0.5
    learned_sigma: bool = True
    fixed_sigma_value: float = 5.0
    queried_loss: bool = True
    occlusion_cond: bool = True
    instance_decouple: bool = True

    def __post_init__(self) -> None:
        if self.lambda_align < 0:
            raise ValueError("lambda_align must be >= 0")
        if self.fixed_sigma_value < 0:
            raise ValueError("fixed_sigma_value must be >= 0")
        if self.steps < 1 or self.batch_size < 1:
            raise ValueError("steps and batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)

    def flags(self) -> AblationFlags:
        return AblationFlags(
            learned_sigma=self.learned_sigma,
            fixed_sigma_value=self.fixed_sigma_value,
            queried_loss=self.queried_loss,
            occlusion_cond=self.occlusion_cond,
            instance_decouple=self.instance_decouple,
        )


@dataclass(frozen=True)
class SamplerConfig:
    num_steps: int = 28
    guidance_fraction: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if not 0.0 <= self.guidance_fraction <= 1.0:
            raise ValueError("guidance_fraction must lie in [0, 1]")

    def guided_steps(self) -> int:
        return math.ceil(self.guidance_fraction * self.num_steps)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "SamplerConfig":
        return cls(**data)


def interpolate(x0: torch.Tensor, x1: torch.Tensor, t: float | torch.Tensor) -> torch.Tensor:
    """Linear interpolant ``t * x1 + (1 - t) * x0`` along the flow path."""
    if x0.shape != x1.shape:
        raise ValueError(f"shape mismatch {tuple(x0.shape)} vs {tuple(x1.shape)}")
    t = torch.as_tensor(t, dtype=x0.dtype)
    if torch.any(t < 0) or torch.any(t > 1):
        raise ValueError("t must lie in [0, 1]")
    if t.dim() > 0:
        t = t.reshape(-1, *([1] * (x0.dim() - 1)))
    return t * x1 + (1.0 - t) * x0


def flow_loss(v_pred: torch.Tensor, x0: torch.Tensor, x1: torch.Tensor) -> torch.Tensor:
    """Mean squared error against the target velocity ``x1 - x0``."""
    if v_pred.shape != x0.shape or x0.shape != x1.shape:
        raise ValueError("v_pred, x0, x1 must share a shape")
    return ((v_pred - (x1 - x0)) ** 2).mean()


def total_loss(
    l_flow: torch.Tensor | float, l_align: torch.Tensor | float, lambda_align: float
) -> torch.Tensor | float:
    return l_flow + lambda_align * l_align


@dataclass
class TrainState:
    model: ZOrderModel
    optimizer: torch.optim.Optimizer
    generator: torch.Generator
    step: int = 0


def make_train_state(model: ZOrderModel, config: TrainConfig) -> TrainState:
    # Momentum-free adaptive-moment updates: second-moment scaling only.
    optimizer = torch.optim.RMSprop(
        model.parameters(), lr=config.lr, alpha=0.99, eps=1e-8, foreach=True
    )
    generator = torch.Generator().manual_seed(config.seed)
    return TrainState(model=model, optimizer=optimizer, generator=generator)


def train_step(
    state: TrainState, batch: tuple[BatchPack, torch.Tensor], config: TrainConfig
) -> dict:
    """One optimizer update on flow + lambda * alignment for one batch.

    ``batch`` pairs the scene pack with the (B, 3, H, W) data latents. Noise
    and timesteps come from the state's generator so reruns with the same
    seed reproduce the loss trace exactly.
    """
    pack, x1 = batch
    model = state.model
    flags = config.flags()
    batch_size = x1.shape[0]
    t = torch.rand(batch_size, generator=state.generator)
    x0 = torch.randn(x1.shape, generator=state.generator)
    z_t = interpolate(x0, x1, t)

    need_align = flags.queried_loss and flags.instance_decouple
    out = model(z_t, t, pack, layout_active=True, flags=flags, need_align=need_align)
    l_flow = flow_loss(out.velocity, x0, x1)
    if out.align is not None:
        l_align = alignment_loss(out.align.probs, out.align.targets)
    else:
        l_align = torch.zeros(())
    if not torch.isfinite(l_flow):
        raise FlowTrainError(f"non-finite flow loss at step {state.step + 1}")
    if not torch.isfinite(l_align):
        raise FlowTrainError(f"non-finite alignment loss at step {state.step + 1}")

    loss = total_loss(l_flow, l_align, config.lambda_align)
    state.optimizer.zero_grad()
    loss.backward()
    state.optimizer.step()
    state.step += 1
    return {
        "step": state.step,
        "l_flow": float(l_flow.detach()),
        "l_align": float(l_align.detach()),
        "total": float(loss.detach()),
    }


def fit(
    bundles: Sequence[SceneBundle],
    images: np.ndarray,
    model_config: ModelConfig,
    config: TrainConfig,
    on_step: Callable[[dict], None] | None = None,
) -> tuple[ZOrderModel, list[dict]]:
    """Train a fresh model on a scene dataset; fully seeded and deterministic.

    ``images`` is (N, H, W, 3) uint8 ground truth; batches are drawn with
    replacement from a generator derived from the training seed.
    """
    if len(bundles) != len(images):
        raise ValueError("bundles and images must align")
    if len(bundles) == 0:
        raise ValueError("training needs at least one scene")
    torch.manual_seed(config.seed)
    model = ZOrderModel(model_config)
    state = make_train_state(model, config)
    latents = torch.stack([encode_image(img) for img in images])
    index_rng = np.random.default_rng(config.seed)
    history: list[dict] = []
    for _ in range(config.steps):
        idx = index_rng.integers(0, len(bundles), size=config.batch_size)
        pack = build_pack([bundles[i] for i in idx])
        metrics = train_step(state, (pack, latents[idx]), config)
        history.append(metrics)
        if on_step is not None:
            on_step(metrics)
    return model, history


def sample(
    model: ZOrderModel,
    layout: SceneLayout,
    config: SamplerConfig,
    flags: AblationFlags | None = None,
    step_hook: Callable[[int, float, bool], None] | None = None,
) -> torch.Tensor:
    """Euler-integrate the learned velocity for one layout; returns (3, H, W).

    The layout stage is active on steps 1..ceil(guidance_fraction*num_steps)
    (1-based); afterwards the per-block composite output is skipped so the
    residual path carries features untouched. ``step_hook`` receives
    ``(step_index, t, layout_active)`` before each step.
    """
    latents = sample_batch(model, [layout], config, [config.seed], flags=flags, step_hook=step_hook)
    return latents[0]


def sample_batch(
    model: ZOrderModel,
    layouts: Sequence[SceneLayout],
    config: SamplerConfig,
    seeds: Sequence[int],
    flags: AblationFlags | None = None,
    step_hook: Callable[[int, float, bool], None] | None = None,
) -> torch.Tensor:
    """Batched sampler; each scene's noise comes from its own seed so results
    do not depend on how scenes are batched together."""
    if len(layouts) != len(seeds):
        raise ValueError("layouts and seeds must align")
    flags = flags or AblationFlags()
    size = model.config.image_size
    pack = build_pack([build_bundle(layout, model.config) for layout in layouts])
    noise = [
        torch.randn(3, size, size, generator=torch.Generator().manual_seed(int(seed)))
        for seed in seeds
    ]
    z = torch.stack(noise)
    guided = config.guided_steps()
    dt = 1.0 / config.num_steps
    model.eval()
    with torch.no_grad():
        for k in range(config.num_steps):
            t_k = k / config.num_steps
            active = (k + 1) <= guided
            if step_hook is not None:
                step_hook(k + 1, t_k, active)
            t = torch.full((z.shape[0],), t_k)
            out = model(z, t, pack, layout_active=active, flags=flags, need_align=False)
            z = z + dt * out.velocity
    return z


def decode_latent(latent: torch.Tensor) -> np.ndarray:
    """Map a (3, H, W) latent in [-1, 1] to an (H, W, 3) uint8 image."""
    clamped = latent.detach().clamp(-1.0, 1.0)
    pixels = ((clamped + 1.0) * 0.5 * 255.0).round().to(torch.uint8)
    return pixels.permute(1, 2, 0).numpy()


def encode_image(image: np.ndarray) -> torch.Tensor:
    """Map an (H, W, 3) uint8 image to a (3, H, W) float32 latent in [-1, 1]."""
    scaled = torch.from_numpy(np.ascontiguousarray(image)).to(torch.float32) / 255.0
    return (scaled * 2.0 - 1.0).permute(2, 0, 1)


def metrics_to_csv(history: Sequence[dict]) -> str:
    lines = ["step,l_flow,l_align,total"]
    for row in history:
        lines.append(f"{row['step']},{row['l_flow']!r},{row['l_align']!r},{row['total']!r}")
    return "\n".join(lines) + "\n"


def save_model(path, model: ZOrderModel, train_config: TrainConfig | None = None) -> None:
    config = {"model": model.config.to_dict()}
    if train_config is not None:
        config["train"] = train_config.to_dict()
    save_checkpoint(path, dict(model.state_dict()), config)


def load_model(path) -> tuple[ZOrderModel, dict]:
    tensors, config = load_checkpoint(path)
    model = ZOrderModel(ModelConfig.from_dict(config["model"]))
    model.load_state_dict(tensors, strict=True)
    return model, config
