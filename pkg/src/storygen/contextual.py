"""Stage 2: frame-contextual latent denoiser.

A small U-Net over per-frame latents with frame-attention blocks after every
level. Conditioning enters twice: at the image level the reference-frame
latents and a binary validity marker are channel-concatenated with the noisy
latents, and at the feature level each frame cross-attends to its own context
sequence (known frames: caption/image interaction features; unknown frames:
caption tokens stacked with a semantic token derived from the stage-1
embedding). Every conditioning pathway can be switched off for ablations.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .blocks import FeedForward, FrameAttentionBlock, MultiheadAttention, TimestepEmbed
from .data import ClipSplit, DropMask, StoryEpisode, build_marker
from .diffusion import (
    GuidanceConfig,
    NoiseSchedule,
    SamplerConfig,
    ddim_sample,
    mse_loss,
    q_sample,
)
from .encoders import LatentAutoencoder
from .errors import NumericalFailure, ValidationError


@dataclass(frozen=True)
class ContextualConfig:
    latent_channels: int = 4
    latent_size: int = 8
    base_width: int = 48
    heads: int = 4
    context_dim: int = 128
    embed_dim: int = 128  # width of the frozen encoder embeddings
    caption_tokens: int = 16
    image_tokens: int = 16
    max_frames: int = 16
    use_image_condition: bool = True
    use_mim: bool = True
    use_ssm: bool = True
    use_stage1_prior: bool = True
    use_frame_attention: bool = True

    @property
    def in_channels(self) -> int:
        c = self.latent_channels
        return 2 * c + 1 if self.use_image_condition else c


@dataclass
class ImageLevelCondition:
    """Reference latents plus validity marker; zero exactly where marker is zero."""

    cond_latents: torch.Tensor  # [f, c, h, w] or [b, f, c, h, w]
    marker: torch.Tensor  # [f, 1, h, w] or [b, f, 1, h, w]

    def batched(self) -> "ImageLevelCondition":
        if self.cond_latents.ndim == 4:
            return ImageLevelCondition(self.cond_latents[None], self.marker[None])
        return self


def build_image_condition(
    ae: LatentAutoencoder, episode: StoryEpisode, split: ClipSplit, drop: DropMask | None = None
) -> ImageLevelCondition:
    """Encode known, undropped frames; everything else conditions as zero."""
    drop = drop or DropMask.none(episode.num_frames)
    split.validate(episode.num_frames)
    h = w = ae.config.latent_size
    c = ae.config.latent_channels
    cond = torch.zeros(episode.num_frames, c, h, w)
    usable = [i for i in split.known_indices if not drop.dropped[i]]
    if usable:
        frames = torch.from_numpy(episode.frames[usable])
        with torch.no_grad():
            cond[usable] = ae.encode_latent(frames)
    marker = torch.from_numpy(build_marker(split, drop, h, w))
    return ImageLevelCondition(cond_latents=cond, marker=marker)


class MultimodalInteraction(nn.Module):
    """Known-clip fusion: caption tokens cross-attend to image tokens."""

    def __init__(self, embed_dim: int, dim: int, heads: int):
        super().__init__()
        self.proj_text = nn.Linear(embed_dim, dim)
        self.proj_image = nn.Linear(embed_dim, dim)
        self.attn = MultiheadAttention(dim, heads, zero_init_out=True)

    def forward(self, t_h: torch.Tensor, v_h: torch.Tensor) -> torch.Tensor:
        """[b, f_k, n_t, d_e], [b, f_k, n_v, d_e] -> [b, f_k, n_t, d]."""
        b, f_k = t_h.shape[0], t_h.shape[1]
        if f_k == 0:
            return t_h.new_zeros(b, 0, t_h.shape[2], self.proj_text.out_features)
        q = self.proj_text(t_h).reshape(b * f_k, t_h.shape[2], -1)
        kv = self.proj_image(v_h).reshape(b * f_k, v_h.shape[2], -1)
        out = q + self.attn(q, kv)
        return out.reshape(b, f_k, t_h.shape[2], -1)


class SemanticStacking(nn.Module):
    """Unknown-clip fusion: pooled caption queries the predicted frame embedding.

    The resulting interaction token is stacked ahead of the projected caption
    tokens, giving n_t + 1 context tokens per unknown frame. When the stage-1
    prior is disabled, query and key/value both come from the known clip's
    pooled embeddings instead.
    """

    def __init__(self, embed_dim: int, dim: int, heads: int):
        super().__init__()
        self.proj_text = nn.Linear(embed_dim, dim)
        self.proj_pooled = nn.Linear(embed_dim, dim)
        self.proj_embed = nn.Linear(embed_dim, dim)
        self.attn = MultiheadAttention(dim, heads, zero_init_out=True)
        self.null_known = nn.Parameter(torch.randn(dim) * 0.02)

    def forward(
        self,
        t_h_u: torch.Tensor,  # [b, f_u, n_t, d_e]
        e_g: torch.Tensor,  # [b, f_u, 1, d_e] pooled caption of unknown frames
        v_pred: torch.Tensor | None,  # [b, f_u, 1, d_e] stage-1 embeddings
        known_v_p: torch.Tensor | None = None,  # [b, f_k, 1, d_e] for the no-prior variant
        use_prior: bool = True,
    ) -> torch.Tensor:
        b, f_u, n_t, _ = t_h_u.shape
        if f_u == 0:
            raise ValidationError("semantic stacking needs at least one unknown frame")
        text = self.proj_text(t_h_u)  # [b, f_u, n_t, d]
        if use_prior:
            if v_pred is None:
                raise ValidationError("use_prior=True requires predicted embeddings")
            q = self.proj_pooled(e_g).reshape(b * f_u, 1, -1)
            kv = self.proj_embed(v_pred).reshape(b * f_u, 1, -1)
            inter = (q + self.attn(q, kv)).reshape(b, f_u, 1, -1)
        else:
            # QKV all from the known clip; one shared token per sample
            if known_v_p is None or known_v_p.shape[1] == 0:
                inter = self.null_known.reshape(1, 1, 1, -1).expand(b, f_u, 1, text.shape[-1])
            else:
                kv = self.proj_embed(known_v_p[:, :, 0])  # [b, f_k, d]
                q = kv.mean(dim=1, keepdim=True)  # [b, 1, d]
                tok = q + self.attn(q, kv)  # [b, 1, d]
                inter = tok[:, None].expand(b, f_u, 1, tok.shape[-1])
        return torch.cat([inter, text], dim=2)


def concat_context(
    context_known: torch.Tensor,  # [b, f_k, n_k, d]
    context_unknown: torch.Tensor,  # [b, f_u, n_u, d]
    split: ClipSplit,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Reorder per-clip contexts by original frame index, padding to a mask."""
    b = context_unknown.shape[0]
    f = split.num_known + split.num_unknown
    if context_known.shape[1] != split.num_known or context_unknown.shape[1] != split.num_unknown:
        raise ValidationError("context frame counts do not match the split")
    d = context_unknown.shape[-1]
    lengths = {i: context_known.shape[2] for i in split.known_indices}
    lengths.update({i: context_unknown.shape[2] for i in split.unknown_indices})
    l_max = max(lengths.values())
    ctx = context_unknown.new_zeros(b, f, l_max, d)
    mask = torch.zeros(b, f, l_max, dtype=torch.bool)
    for k, i in enumerate(split.known_indices):
        n = context_known.shape[2]
        ctx[:, i, :n] = context_known[:, k]
        mask[:, i, :n] = True
    for k, i in enumerate(split.unknown_indices):
        n = context_unknown.shape[2]
        ctx[:, i, :n] = context_unknown[:, k]
        mask[:, i, :n] = True
    return ctx, mask


def _gn(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, channels), channels)


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int):
        super().__init__()
        self.norm1 = _gn(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch)
        self.norm2 = _gn(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.temb(F.silu(temb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class SpatialAttention(nn.Module):
    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)
        self.attn = MultiheadAttention(channels, heads, zero_init_out=True)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        bf, c, h, w = x.shape
        tokens = x.reshape(bf, c, h * w).transpose(1, 2)
        tokens = tokens + self.attn(self.norm(tokens))
        return tokens.transpose(1, 2).reshape(bf, c, h, w)


class CrossAttention(nn.Module):
    def __init__(self, channels: int, context_dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.attn = MultiheadAttention(channels, heads, kv_dim=context_dim, zero_init_out=True)
        self.norm2 = nn.LayerNorm(channels)
        self.mlp = FeedForward(channels, ratio=2, zero_init_out=True)

    def forward(self, x: torch.Tensor, ctx: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        bf, c, h, w = x.shape
        tokens = x.reshape(bf, c, h * w).transpose(1, 2)
        tokens = tokens + self.attn(self.norm1(tokens), ctx, key_padding_mask=mask)
        tokens = tokens + self.mlp(self.norm2(tokens))
        return tokens.transpose(1, 2).reshape(bf, c, h, w)


class FrameAttentionMap(nn.Module):
    """Frame attention over feature maps: each spatial cell attends across frames."""

    def __init__(self, channels: int, heads: int):
        super().__init__()
        self.block = FrameAttentionBlock(channels, heads)

    def forward(self, x: torch.Tensor, b: int, f: int) -> torch.Tensor:
        bf, c, h, w = x.shape
        grid = x.reshape(b, f, c, h * w).permute(0, 1, 3, 2)
        grid = self.block(grid)
        return grid.permute(0, 1, 3, 2).reshape(bf, c, h, w)


class _LevelAttention(nn.Module):
    def __init__(self, channels: int, cfg: ContextualConfig):
        super().__init__()
        self.spatial = SpatialAttention(channels, cfg.heads)
        self.cross = CrossAttention(channels, cfg.context_dim, cfg.heads)
        self.frame = FrameAttentionMap(channels, cfg.heads) if cfg.use_frame_attention else None

    def forward(self, x, ctx, mask, b, f):
        x = self.spatial(x)
        x = self.cross(x, ctx, mask)
        if self.frame is not None:
            x = self.frame(x, b, f)
        return x


class ContextualDenoiser(nn.Module):
    """U-Net epsilon-predictor over [b, f, c, h, w] latents."""

    def __init__(self, config: ContextualConfig):
        super().__init__()
        self.config = config
        w = config.base_width
        temb_dim = 4 * w
        self.time_embed = TimestepEmbed(temb_dim)
        self.mim = MultimodalInteraction(config.embed_dim, config.context_dim, config.heads)
        self.ssm = SemanticStacking(config.embed_dim, config.context_dim, config.heads)
        self.text_proj_raw = nn.Linear(config.embed_dim, config.context_dim)
        self.prior_token_proj = nn.Linear(config.embed_dim, config.context_dim)
        self.null_context = nn.Parameter(torch.randn(config.context_dim) * 0.02)

        self.conv_in = nn.Conv2d(config.in_channels, w, 3, padding=1)
        self.enc0_res = ResBlock(w, w, temb_dim)
        self.enc0_attn = _LevelAttention(w, config)
        self.down = nn.Conv2d(w, w, 3, stride=2, padding=1)
        self.enc1_res = ResBlock(w, 2 * w, temb_dim)
        self.enc1_attn = _LevelAttention(2 * w, config)
        self.mid_res1 = ResBlock(2 * w, 2 * w, temb_dim)
        self.mid_cross = CrossAttention(2 * w, config.context_dim, config.heads)
        self.mid_res2 = ResBlock(2 * w, 2 * w, temb_dim)
        self.dec1_res = ResBlock(4 * w, 2 * w, temb_dim)
        self.dec1_attn = _LevelAttention(2 * w, config)
        self.up = nn.Conv2d(2 * w, w, 3, padding=1)
        self.dec0_res = ResBlock(2 * w, w, temb_dim)
        self.dec0_attn = _LevelAttention(w, config)
        self.out_norm = _gn(w)
        self.out_conv = nn.Conv2d(w, config.latent_channels, 3, padding=1)
        nn.init.zeros_(self.out_conv.weight)
        nn.init.zeros_(self.out_conv.bias)

        self.eval_calls = 0  # denoiser invocation counter (not part of the state)
        self.param_count = sum(p.numel() for p in self.parameters())

    def build_feature_context(
        self,
        t_h: torch.Tensor,  # [b, f, n_t, d_e]
        t_p: torch.Tensor,  # [b, f, 1, d_e]
        v_h: torch.Tensor,  # [b, f, n_v, d_e] (known rows meaningful)
        v_p: torch.Tensor,  # [b, f, 1, d_e] (known rows meaningful)
        v_pred: torch.Tensor | None,  # [b, f_u, 1, d_e] stage-1 output
        split: ClipSplit,
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Per-frame cross-attention context plus validity mask, [b, f, L, d]."""
        cfg = self.config
        known = list(split.known_indices)
        unknown = list(split.unknown_indices)
        if cfg.use_mim:
            ctx_known = self.mim(t_h[:, known], v_h[:, known])
        else:
            ctx_known = self.text_proj_raw(t_h[:, known])
        if cfg.use_ssm:
            ctx_unknown = self.ssm(
                t_h[:, unknown],
                t_p[:, unknown],
                v_pred if cfg.use_stage1_prior else None,
                known_v_p=v_p[:, known],
                use_prior=cfg.use_stage1_prior,
            )
        else:
            ctx_unknown = self.text_proj_raw(t_h[:, unknown])
            if cfg.use_stage1_prior:
                if v_pred is None:
                    raise ValidationError("use_stage1_prior=True requires predicted embeddings")
                tok = self.prior_token_proj(v_pred)  # [b, f_u, 1, d]
                ctx_unknown = torch.cat([tok, ctx_unknown], dim=2)
        return concat_context(ctx_known, ctx_unknown, split)

    def null_feature_context(self, b: int, f: int) -> tuple[torch.Tensor, torch.Tensor]:
        ctx = self.null_context.reshape(1, 1, 1, -1).expand(b, f, 1, -1)
        mask = torch.ones(b, f, 1, dtype=torch.bool)
        return ctx, mask

    def forward(
        self,
        z_t: torch.Tensor,  # [b, f, c, h, w] or [f, c, h, w]
        image_cond: ImageLevelCondition | None,
        context: tuple[torch.Tensor, torch.Tensor] | None,
        t: torch.Tensor,
    ) -> torch.Tensor:
        cfg = self.config
        squeeze = z_t.ndim == 4
        if squeeze:
            z_t = z_t[None]
        b, f, c, h, w = z_t.shape
        if c != cfg.latent_channels:
            raise ValidationError(f"expected {cfg.latent_channels} latent channels, got {c}")

        if cfg.use_image_condition:
            if image_cond is None:
                cond_lat = torch.zeros_like(z_t)
                marker = z_t.new_zeros(b, f, 1, h, w)
            else:
                image_cond = image_cond.batched()
                cond_lat, marker = image_cond.cond_latents, image_cond.marker
                if cond_lat.shape != z_t.shape or marker.shape != (b, f, 1, h, w):
                    raise ValidationError(
                        "image condition shapes must match the noisy latents; per-frame input "
                        f"layout is [z_t ({c}) ++ cond_latent ({c}) ++ marker (1)], got "
                        f"cond {tuple(cond_lat.shape)}, marker {tuple(marker.shape)}"
                    )
            x = torch.cat([z_t, cond_lat, marker], dim=2)
        else:
            x = z_t
        if x.shape[2] != self.conv_in.in_channels:
            raise ValidationError(
                f"first convolution expects {self.conv_in.in_channels} channels, got {x.shape[2]}"
            )

        if context is None:
            ctx, mask = self.null_feature_context(b, f)
        else:
            ctx, mask = context
        ctx = ctx.reshape(b * f, ctx.shape[2], ctx.shape[3])
        mask = mask.reshape(b * f, mask.shape[2])

        temb = self.time_embed(t.to(z_t.dtype))  # [b, 4w]
        temb = temb[:, None, :].expand(b, f, temb.shape[-1]).reshape(b * f, -1)

        xb = x.reshape(b * f, x.shape[2], h, w)
        h0 = self.conv_in(xb)
        h0 = self.enc0_res(h0, temb)
        h0 = self.enc0_attn(h0, ctx, mask, b, f)
        h1 = self.down(h0)
        h1 = self.enc1_res(h1, temb)
        h1 = self.enc1_attn(h1, ctx, mask, b, f)
        m = self.mid_res1(h1, temb)
        m = self.mid_cross(m, ctx, mask)
        m = self.mid_res2(m, temb)
        d1 = self.dec1_res(torch.cat([m, h1], dim=1), temb)
        d1 = self.dec1_attn(d1, ctx, mask, b, f)
        u = self.up(F.interpolate(d1, scale_factor=2, mode="nearest"))
        d0 = self.dec0_res(torch.cat([u, h0], dim=1), temb)
        d0 = self.dec0_attn(d0, ctx, mask, b, f)
        out = self.out_conv(F.silu(self.out_norm(d0)))

        self.eval_calls += 1
        out = out.reshape(b, f, cfg.latent_channels, h, w)
        return out[0] if squeeze else out


def sample_contextual(
    model: ContextualDenoiser,
    image_cond: ImageLevelCondition | None,
    context: tuple[torch.Tensor, torch.Tensor] | None,
    schedule: NoiseSchedule,
    sampler_cfg: SamplerConfig,
    guidance_cfg: GuidanceConfig,
    seed: int = 0,
    num_frames: int | None = None,
) -> torch.Tensor:
    """One joint DDIM trajectory over all frames -> latents [f, c, h, w]."""
    if sampler_cfg.prediction_mode != "epsilon":
        raise ValidationError("the contextual denoiser samples in epsilon-prediction mode")
    cfg = model.config
    if image_cond is not None:
        f = image_cond.batched().cond_latents.shape[1]
    elif num_frames is not None:
        f = num_frames
    else:
        raise ValidationError("num_frames is required when sampling without an image condition")
    cond = (image_cond.batched() if image_cond is not None else None, context)

    def denoise(x_t, conditions, t):
        t_vec = torch.full((1,), t, dtype=torch.long)
        with torch.no_grad():
            if conditions is None:
                return model(x_t, None, None, t_vec)
            ic, ctx = conditions
            return model(x_t, ic, ctx, t_vec)

    out = ddim_sample(
        denoise,
        None,
        cond,
        schedule,
        sampler_cfg,
        guidance_cfg,
        seed=seed,
        shape=(1, f, cfg.latent_channels, cfg.latent_size, cfg.latent_size),
    )
    return out[0]


def contextual_training_loss(
    model: ContextualDenoiser,
    z0: torch.Tensor,  # [b, f, c, h, w] clean latents of the full episode
    image_cond: ImageLevelCondition,
    context: tuple[torch.Tensor, torch.Tensor],
    schedule: NoiseSchedule,
    gen: torch.Generator,
    uncond_drop_prob: float = 0.0,
) -> torch.Tensor:
    """Epsilon-prediction loss over all frames with condition dropout."""
    b = z0.shape[0]
    t = torch.randint(1, schedule.timesteps + 1, (b,), generator=gen)
    eps = torch.randn(z0.shape, generator=gen)
    z_t = q_sample(z0, t, eps, schedule)
    drop = torch.rand(b, generator=gen) < uncond_drop_prob
    if drop.any():
        cond_lat = image_cond.cond_latents.clone()
        marker = image_cond.marker.clone()
        cond_lat[drop] = 0.0
        marker[drop] = 0.0
        image_cond = ImageLevelCondition(cond_lat, marker)
        ctx, mask = context
        null_ctx, null_mask = model.null_feature_context(b, z0.shape[1])
        l = ctx.shape[2]
        ctx = ctx.clone()
        mask = mask.clone()
        ctx[drop] = F.pad(null_ctx[drop], (0, 0, 0, l - 1))
        mask[drop] = F.pad(null_mask[drop], (0, l - 1), value=False)
        context = (ctx, mask)
    pred = model(z_t, image_cond, context, t)
    loss = mse_loss(eps, pred)
    if not torch.isfinite(loss):
        raise NumericalFailure("non-finite contextual training loss")
    return loss


def save_contextual(path, model: ContextualDenoiser, flat_config: dict, step: int, extra: dict | None = None):
    import dataclasses

    header = {
        "kind": "contextual",
        "model_config": dataclasses.asdict(model.config),
        "config": flat_config,
        "config_hash": ckpt.config_hash(flat_config),
        "step": step,
    }
    header.update(extra or {})
    return ckpt.write_checkpoint(path, header, ckpt.module_tensors(model, "model."))


def load_contextual(path) -> tuple[ContextualDenoiser, dict]:
    header, tensors = ckpt.read_checkpoint(path)
    if header.get("kind") != "contextual":
        raise ValidationError(f"expected a contextual checkpoint, got kind={header.get('kind')!r}")
    model = ContextualDenoiser(ContextualConfig(**header["model_config"]))
    ckpt.load_module_tensors(model, tensors, "model.")
    model.eval()
    return model, header
