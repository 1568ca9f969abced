"""Stage 1: transformer diffusion over frame embeddings.

Predicts the clean pooled embedding of every unknown frame from all captions
and the known frames' embeddings. Works in a scaled embedding space
(unit-norm embeddings multiplied by sqrt(d)) so the per-coordinate variance
of the diffusion target is ~1, and reads its prediction off a learned query
token appended to every frame's token sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .blocks import FrameAttentionBlock, TimestepEmbed, TransformerBlock
from .data import ClipSplit
from .diffusion import (
    GuidanceConfig,
    NoiseSchedule,
    SamplerConfig,
    ddim_sample,
    mse_loss,
    q_sample,
)
from .encoders import EmbeddingBundle, UnsharedProjections
from .errors import NumericalFailure, ValidationError


@dataclass(frozen=True)
class PriorConfig:
    layers: int = 4
    width: int = 128
    heads: int = 4
    embed_dim: int = 128  # width of the frozen encoder embeddings
    caption_tokens: int = 16
    image_tokens: int = 16
    include_hidden_visual: bool = False
    max_frames: int = 16

    @property
    def tokens_per_frame(self) -> int:
        # [t_p, t_h..., (v_h...,) v_p slot, timestep, query]
        n = self.caption_tokens + 4
        if self.include_hidden_visual:
            n += self.image_tokens
        return n


class FramePriorModel(nn.Module):
    def __init__(self, config: PriorConfig):
        super().__init__()
        self.config = config
        d = config.width
        self.projections = UnsharedProjections(config.embed_dim, d)
        self.null_t_p = nn.Parameter(torch.randn(d) * 0.02)
        self.null_t_h = nn.Parameter(torch.randn(d) * 0.02)
        self.null_v_p = nn.Parameter(torch.randn(d) * 0.02)
        self.null_v_h = nn.Parameter(torch.randn(d) * 0.02)
        self.query_token = nn.Parameter(torch.randn(d) * 0.02)
        self.token_pos = nn.Parameter(torch.randn(config.tokens_per_frame, d) * 0.02)
        self.frame_pos = nn.Parameter(torch.randn(config.max_frames, d) * 0.02)
        self.time_embed = TimestepEmbed(d)
        blocks: list[nn.Module] = []
        for _ in range(config.layers):
            blocks.append(TransformerBlock(d, config.heads))
            blocks.append(FrameAttentionBlock(d, config.heads))
        self.blocks = nn.ModuleList(blocks)
        self.readout_norm = nn.LayerNorm(d)
        self.readout = nn.Linear(d, config.embed_dim)
        nn.init.normal_(self.readout.weight, std=0.02)
        nn.init.zeros_(self.readout.bias)
        self.param_count = sum(p.numel() for p in self.parameters())

    @property
    def embedding_scale(self) -> float:
        return math.sqrt(self.config.embed_dim)

    def assemble_tokens(
        self,
        bundle: EmbeddingBundle,
        noised_v_p: torch.Tensor,
        split: ClipSplit,
        t: torch.Tensor,
        drop: torch.Tensor | None = None,
        uncond: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Build the [b, f, n, d] token grid.

        bundle holds raw (unit-norm) encoder outputs for the whole episode;
        noised_v_p is the diffusion state of the unknown frames in scaled
        space, [b, f_u, 1, embed_dim]. `drop` marks blacked-out frames
        [b, f]; `uncond` marks samples whose conditions are nulled [b].
        """
        cfg = self.config
        b, f = bundle.t_p.shape[0], bundle.t_p.shape[1]
        split.validate(f)
        if noised_v_p.shape[:2] != (b, split.num_unknown):
            raise ValidationError(
                f"noised embeddings must be [b, f_u, 1, d], got {tuple(noised_v_p.shape)}"
            )
        if f > cfg.max_frames:
            raise ValidationError(f"episode has {f} frames, model supports {cfg.max_frames}")
        d = cfg.width
        if drop is None:
            drop = torch.zeros(b, f, dtype=torch.bool)
        if uncond is None:
            uncond = torch.zeros(b, dtype=torch.bool)

        t_p = self.projections.t_p(bundle.t_p)  # [b, f, 1, d]
        t_h = self.projections.t_h(bundle.t_h)  # [b, f, n_t, d]
        u = uncond[:, None, None, None]
        t_p = torch.where(u, self.null_t_p.expand_as(t_p), t_p)
        t_h = torch.where(u, self.null_t_h.expand_as(t_h), t_h)

        v_slot = self.null_v_p.reshape(1, 1, 1, d).expand(b, f, 1, d).clone()
        known_clean = self.projections.v_p(bundle.v_p * self.embedding_scale)
        for i in split.known_indices:
            usable = ~(drop[:, i] | uncond)
            v_slot[:, i] = torch.where(usable[:, None, None], known_clean[:, i], v_slot[:, i])
        noised_proj = self.projections.v_p(noised_v_p)
        for j, i in enumerate(split.unknown_indices):
            v_slot[:, i] = noised_proj[:, j]

        time_tok = self.time_embed(t).reshape(b, 1, 1, d).expand(b, f, 1, d)
        query = self.query_token.reshape(1, 1, 1, d).expand(b, f, 1, d)

        parts = [t_p, t_h]
        if cfg.include_hidden_visual:
            v_h = self.projections.v_h(bundle.v_h)
            null_vh = self.null_v_h.expand_as(v_h)
            keep = torch.zeros(b, f, dtype=torch.bool)
            for i in split.known_indices:
                keep[:, i] = True
            keep = keep & ~drop & ~uncond[:, None]
            v_h = torch.where(keep[:, :, None, None], v_h, null_vh)
            parts.append(v_h)
        parts += [v_slot, time_tok, query]
        grid = torch.cat(parts, dim=2)
        grid = grid + self.token_pos[None, None] + self.frame_pos[None, :f, None]
        return grid

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        for block in self.blocks:
            grid = block(grid)
        return grid

    def predict_x0(
        self,
        noised_v_p: torch.Tensor,
        bundle: EmbeddingBundle,
        split: ClipSplit,
        t: torch.Tensor,
        drop: torch.Tensor | None = None,
        uncond: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Scaled-space x0 prediction for the unknown frames, [b, f_u, 1, embed_dim]."""
        grid = self.assemble_tokens(bundle, noised_v_p, split, t, drop=drop, uncond=uncond)
        out = self.forward(grid)
        query_out = out[:, list(split.unknown_indices), -1, :]
        pred = self.readout(self.readout_norm(query_out))
        return pred[:, :, None, :]


def sample_prior(
    model: FramePriorModel,
    bundle: EmbeddingBundle,
    split: ClipSplit,
    schedule: NoiseSchedule,
    sampler_cfg: SamplerConfig,
    guidance_cfg: GuidanceConfig,
    seed: int = 0,
    drop: torch.Tensor | None = None,
) -> torch.Tensor:
    """DDIM in x0-prediction mode over embedding space -> unit-norm [f_u, 1, d]."""
    if sampler_cfg.prediction_mode != "x0":
        raise ValidationError("the frame prior samples in x0-prediction mode")
    batched = EmbeddingBundle(
        v_p=bundle.v_p[None], v_h=bundle.v_h[None], t_p=bundle.t_p[None], t_h=bundle.t_h[None]
    )
    f_u = split.num_unknown
    d = model.config.embed_dim
    drop_b = drop[None] if drop is not None else None

    def denoise(x_t, conditions, t):
        t_vec = torch.full((1,), t, dtype=torch.long)
        uncond = torch.tensor([conditions is None])
        with torch.no_grad():
            return model.predict_x0(x_t, batched, split, t_vec, drop=drop_b, uncond=uncond)

    out = ddim_sample(
        denoise,
        None,
        "conditions",
        schedule,
        sampler_cfg,
        guidance_cfg,
        seed=seed,
        shape=(1, f_u, 1, d),
    )
    emb = out[0] / model.embedding_scale
    return F.normalize(emb, dim=-1)


def prior_training_loss(
    model: FramePriorModel,
    bundle: EmbeddingBundle,
    split: ClipSplit,
    schedule: NoiseSchedule,
    gen: torch.Generator,
    drop: torch.Tensor | None = None,
    uncond_drop_prob: float = 0.0,
) -> torch.Tensor:
    """One training objective evaluation: noise unknown v_p, predict it back."""
    b = bundle.v_p.shape[0]
    x0 = bundle.v_p[:, list(split.unknown_indices)] * model.embedding_scale
    t = torch.randint(1, schedule.timesteps + 1, (b,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen)
    x_t = q_sample(x0, t, eps, schedule)
    uncond = torch.rand(b, generator=gen) < uncond_drop_prob
    pred = model.predict_x0(x_t, bundle, split, t, drop=drop, uncond=uncond)
    loss = mse_loss(x0, pred)
    if not torch.isfinite(loss):
        raise NumericalFailure("non-finite prior training loss")
    return loss


def save_prior(path, model: FramePriorModel, flat_config: dict, step: int, extra: dict | None = None):
    header = {
        "kind": "prior",
        "model_config": ckpt_config(model.config),
        "config": flat_config,
        "config_hash": ckpt.config_hash(flat_config),
        "step": step,
    }
    header.update(extra or {})
    return ckpt.write_checkpoint(path, header, ckpt.module_tensors(model, "model."))


def load_prior(path) -> tuple[FramePriorModel, dict]:
    header, tensors = ckpt.read_checkpoint(path)
    if header.get("kind") != "prior":
        raise ValidationError(f"expected a prior checkpoint, got kind={header.get('kind')!r}")
    model = FramePriorModel(PriorConfig(**header["model_config"]))
    ckpt.load_module_tensors(model, tensors, "model.")
    model.eval()
    return model, header


def ckpt_config(cfg) -> dict:
    import dataclasses

    return dataclasses.asdict(cfg)
