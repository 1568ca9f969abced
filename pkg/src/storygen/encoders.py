"""Frozen feature extractors the diffusion stages condition on.

A small contrastive image/text encoder supplies pooled and hidden
representations; a deterministic convolutional autoencoder supplies the
latent codec for stage 2. Both are pretrained once on the toy data and then
frozen: no gradient ever flows into them from the diffusion stages.
"""

from __future__ import annotations

import hashlib
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .blocks import FeedForward, MultiheadAttention
from .data import PAD_ID, StoryEpisode
from .errors import StateError, TrainingFailure, ValidationError


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 128
    text_layers: int = 2
    text_heads: int = 4
    caption_length: int = 16
    vocab_size: int = 64
    image_size: int = 32
    image_channels: int = 3

    @property
    def image_tokens(self) -> int:
        return (self.image_size // 8) ** 2


@dataclass
class EmbeddingBundle:
    """Pooled/hidden visual and textual representations for one clip or batch."""

    v_p: torch.Tensor  # [..., f, 1, d]
    v_h: torch.Tensor  # [..., f, n_v, d]
    t_p: torch.Tensor  # [..., f, 1, d]
    t_h: torch.Tensor  # [..., f, n_t, d]

    @staticmethod
    def stack(bundles: list["EmbeddingBundle"]) -> "EmbeddingBundle":
        return EmbeddingBundle(
            v_p=torch.stack([b.v_p for b in bundles]),
            v_h=torch.stack([b.v_h for b in bundles]),
            t_p=torch.stack([b.t_p for b in bundles]),
            t_h=torch.stack([b.t_h for b in bundles]),
        )


class _TextLayer(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiheadAttention(dim, heads, zero_init_out=False)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = FeedForward(dim, zero_init_out=False)

    def forward(self, x: torch.Tensor, valid: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x), key_padding_mask=valid)
        return x + self.mlp(self.norm2(x))


class JointEncoder(nn.Module):
    """CLIP-style dual encoder at toy scale. Pooled embeddings are unit norm."""

    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        c = config.image_channels
        self.image_tower = nn.Sequential(
            nn.Conv2d(c, 32, 3, stride=2, padding=1),
            nn.GroupNorm(8, 32),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.GroupNorm(8, 64),
            nn.SiLU(),
            nn.Conv2d(64, 128, 3, stride=2, padding=1),
            nn.GroupNorm(8, 128),
            nn.SiLU(),
            nn.Conv2d(128, d, 3, padding=1),
        )
        self.image_token_norm = nn.LayerNorm(d)
        self.image_pool = nn.Linear(d, d)
        self.token_embed = nn.Embedding(config.vocab_size, d)
        self.pos_embed = nn.Parameter(torch.zeros(config.caption_length, d))
        nn.init.normal_(self.pos_embed, std=0.02)
        self.text_layers = nn.ModuleList(
            [_TextLayer(d, config.text_heads) for _ in range(config.text_layers)]
        )
        self.text_token_norm = nn.LayerNorm(d)
        self.text_pool = nn.Linear(d, d)
        self.logit_scale = nn.Parameter(torch.tensor(math.log(1 / 0.07)))

    def _check_frames(self, frames: torch.Tensor) -> None:
        cfg = self.config
        if frames.ndim != 4 or frames.shape[1] != cfg.image_channels:
            raise ValidationError(
                f"expected frames [f, {cfg.image_channels}, H, W], got {tuple(frames.shape)}"
            )
        if frames.shape[-2] != cfg.image_size or frames.shape[-1] != cfg.image_size:
            raise ValidationError(
                f"expected {cfg.image_size}x{cfg.image_size} frames, got {tuple(frames.shape)}"
            )
        if float(frames.min()) < -1e-6 or float(frames.max()) > 1 + 1e-6:
            raise ValidationError("frame values must lie in [0, 1]")

    def encode_frames(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """[f, C, H, W] in [0, 1] -> pooled [f, 1, d] (unit norm) and hidden [f, n_v, d]."""
        self._check_frames(frames)
        feat = self.image_tower(frames * 2 - 1)  # [f, d, s, s]
        f, d = feat.shape[0], feat.shape[1]
        tokens = self.image_token_norm(feat.reshape(f, d, -1).transpose(1, 2))
        pooled = F.normalize(self.image_pool(tokens.mean(dim=1)), dim=-1)
        return pooled[:, None, :], tokens

    def encode_captions(self, caption_ids: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """[f, n_t] token ids -> pooled [f, 1, d] (unit norm) and hidden [f, n_t, d]."""
        if caption_ids.ndim != 2 or caption_ids.shape[1] != self.config.caption_length:
            raise ValidationError(
                f"expected captions [f, {self.config.caption_length}], got {tuple(caption_ids.shape)}"
            )
        valid = caption_ids != PAD_ID
        # fully padded captions would mask every key; give them one open slot
        attn_valid = valid.clone()
        attn_valid[:, 0] = True
        x = self.token_embed(caption_ids) + self.pos_embed
        for layer in self.text_layers:
            x = layer(x, attn_valid)
        tokens = self.text_token_norm(x)
        counts = valid.sum(dim=1, keepdim=True)
        mean = torch.where(
            counts > 0,
            (tokens * valid[:, :, None]).sum(dim=1) / counts.clamp(min=1),
            torch.zeros_like(tokens[:, 0]),
        )
        pooled = F.normalize(self.text_pool(mean), dim=-1)
        return pooled[:, None, :], tokens

    def embed_episode(self, frames: torch.Tensor, caption_ids: torch.Tensor) -> EmbeddingBundle:
        v_p, v_h = self.encode_frames(frames)
        t_p, t_h = self.encode_captions(caption_ids)
        return EmbeddingBundle(v_p=v_p, v_h=v_h, t_p=t_p, t_h=t_h)


class UnsharedProjections(nn.Module):
    """Four independent affine maps, one per representation kind.

    Square maps start as the identity so freshly built stages see the raw
    embeddings unchanged.
    """

    KINDS = ("v_p", "v_h", "t_p", "t_h")

    def __init__(self, in_dim: int, out_dim: int):
        super().__init__()
        for kind in self.KINDS:
            layer = nn.Linear(in_dim, out_dim)
            if in_dim == out_dim:
                nn.init.eye_(layer.weight)
            nn.init.zeros_(layer.bias)
            setattr(self, kind, layer)

    def forward(self, bundle: EmbeddingBundle) -> EmbeddingBundle:
        return EmbeddingBundle(
            v_p=self.v_p(bundle.v_p),
            v_h=self.v_h(bundle.v_h),
            t_p=self.t_p(bundle.t_p),
            t_h=self.t_h(bundle.t_h),
        )


@dataclass(frozen=True)
class AutoencoderConfig:
    latent_channels: int = 4
    downsample: int = 4
    base_width: int = 32
    image_size: int = 32
    image_channels: int = 3

    @property
    def latent_size(self) -> int:
        return self.image_size // self.downsample


class LatentAutoencoder(nn.Module):
    """Deterministic convolutional codec; near-lossless on the toy frames."""

    def __init__(self, config: AutoencoderConfig):
        super().__init__()
        if config.downsample != 4:
            raise ValidationError("only downsample factor 4 is supported")
        self.config = config
        w, c = config.base_width, config.latent_channels
        ic = config.image_channels
        self.encoder = nn.Sequential(
            nn.Conv2d(ic, w, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, 2 * w, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(2 * w, c, 3, padding=1),
        )
        self.decoder = nn.Sequential(
            nn.Conv2d(c, 2 * w, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, 2 * w, 3, padding=1),
            nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * w, w, 3, padding=1),
            nn.SiLU(),
            nn.Conv2d(w, ic, 3, padding=1),
        )
        self.register_buffer("latent_scale", torch.ones(1))
        self.register_buffer("is_trained", torch.zeros(1, dtype=torch.bool))

    def _require_trained(self) -> None:
        if not bool(self.is_trained):
            raise StateError("autoencoder used before pretraining")

    def encode_raw(self, frames: torch.Tensor) -> torch.Tensor:
        return self.encoder(frames * 2 - 1)

    def encode_latent(self, frames: torch.Tensor) -> torch.Tensor:
        """[f, C, H, W] in [0, 1] -> unit-variance latents [f, c_lat, H/4, W/4]."""
        self._require_trained()
        if frames.ndim != 4 or frames.shape[1] != self.config.image_channels:
            raise ValidationError(f"expected frames [f, C, H, W], got {tuple(frames.shape)}")
        return self.encode_raw(frames) / self.latent_scale

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        self._require_trained()
        x = self.decoder(z * self.latent_scale)
        return ((x + 1) / 2).clamp(0.0, 1.0)


@dataclass
class NullFixtures:
    """Recorded embeddings of null inputs (zero image, padding-only caption)."""

    v_p: torch.Tensor
    v_h: torch.Tensor
    t_p: torch.Tensor
    t_h: torch.Tensor
    latent: torch.Tensor

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"v_p": self.v_p, "v_h": self.v_h, "t_p": self.t_p, "t_h": self.t_h, "latent": self.latent}


def compute_null_fixtures(encoder: JointEncoder, ae: LatentAutoencoder) -> NullFixtures:
    cfg = encoder.config
    with torch.no_grad():
        zero_img = torch.zeros(1, cfg.image_channels, cfg.image_size, cfg.image_size)
        pad_caption = torch.full((1, cfg.caption_length), PAD_ID, dtype=torch.long)
        v_p, v_h = encoder.encode_frames(zero_img)
        t_p, t_h = encoder.encode_captions(pad_caption)
        latent = ae.encode_latent(zero_img)
    return NullFixtures(v_p=v_p[0], v_h=v_h[0], t_p=t_p[0], t_h=t_h[0], latent=latent[0])


def param_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters and buffers; detects any training leakage."""
    h = hashlib.sha256()
    for name, tensor in module.state_dict().items():
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def freeze(module: nn.Module) -> nn.Module:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)
    return module


def psnr(a: torch.Tensor, b: torch.Tensor) -> float:
    """Peak signal-to-noise ratio in dB for values in [0, 1]."""
    mse = float((a - b).pow(2).mean())
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(1.0 / mse)


# ----------------------------------------------------------------------------
# Pretraining


def _episode_pairs(episodes: list[StoryEpisode]) -> tuple[torch.Tensor, torch.Tensor]:
    frames = torch.from_numpy(np.concatenate([ep.frames for ep in episodes]))
    captions = torch.from_numpy(np.concatenate([ep.caption_ids for ep in episodes]))
    return frames, captions


@dataclass
class TrainLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)

    def append(self, step: int, loss: float) -> None:
        self.steps.append(step)
        self.losses.append(loss)


def pretrain_joint_encoder(
    episodes: list[StoryEpisode],
    config: EncoderConfig,
    iterations: int = 1500,
    batch_size: int = 64,
    lr: float = 3e-4,
    seed: int = 0,
    log_every: int = 100,
) -> tuple[JointEncoder, TrainLog]:
    """Symmetric contrastive pretraining over in-batch (frame, caption) pairs.

    Raises TrainingFailure if the loss has not dropped below the chance level
    ln(batch_size) once the warmup quarter of the run is over.
    """
    torch.manual_seed(seed)
    model = JointEncoder(config)
    frames, captions = _episode_pairs(episodes)
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.01)
    log = TrainLog()
    warmup = max(1, iterations // 4)
    chance = math.log(batch_size)
    for it in range(iterations):
        idx = torch.randint(0, frames.shape[0], (batch_size,), generator=gen)
        v_p, _ = model.encode_frames(frames[idx])
        t_p, _ = model.encode_captions(captions[idx])
        logits = model.logit_scale.exp().clamp(max=100.0) * v_p[:, 0] @ t_p[:, 0].T
        labels = torch.arange(batch_size)
        loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
        opt.zero_grad()
        loss.backward()
        opt.step()
        value = float(loss.detach())
        if it % log_every == 0 or it == iterations - 1:
            log.append(it, value)
        if it >= warmup and value > chance:
            raise TrainingFailure(
                f"contrastive loss {value:.3f} above chance {chance:.3f} "
                f"at iteration {it} (warmup={warmup}); training diverged"
            )
    return freeze(model), log


def pretrain_autoencoder(
    episodes: list[StoryEpisode],
    config: AutoencoderConfig,
    iterations: int = 3000,
    batch_size: int = 32,
    lr: float = 2e-3,
    seed: int = 0,
    log_every: int = 200,
) -> tuple[LatentAutoencoder, TrainLog]:
    """Reconstruction pretraining; calibrates the latent scale afterwards."""
    torch.manual_seed(seed)
    model = LatentAutoencoder(config)
    frames, _ = _episode_pairs(episodes)
    gen = torch.Generator().manual_seed(seed + 1)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=0.0)
    log = TrainLog()
    for it in range(iterations):
        idx = torch.randint(0, frames.shape[0], (batch_size,), generator=gen)
        x = frames[idx]
        target = x * 2 - 1
        recon = model.decoder(model.encode_raw(x))
        loss = F.mse_loss(recon, target)
        opt.zero_grad()
        loss.backward()
        opt.step()
        if it % log_every == 0 or it == iterations - 1:
            log.append(it, float(loss.detach()))
    with torch.no_grad():
        sample = frames[: min(512, frames.shape[0])]
        z = model.encode_raw(sample)
        model.latent_scale.fill_(float(z.std().clamp(min=1e-8)))
        model.is_trained.fill_(True)
    return freeze(model), log


def reconstruction_psnr(ae: LatentAutoencoder, episodes: list[StoryEpisode], limit: int = 256) -> float:
    frames, _ = _episode_pairs(episodes)
    frames = frames[:limit]
    with torch.no_grad():
        recon = ae.decode_latent(ae.encode_latent(frames))
    return psnr(recon, frames)


def retrieval_accuracy(encoder: JointEncoder, episodes: list[StoryEpisode], limit: int = 512) -> float:
    """Caption-to-image retrieval over held-out pairs, scored semantically.

    A retrieved frame counts as correct when its character set and scene match
    the query caption's frame; the toy world has exact duplicates, so strict
    index matching would undercount.
    """
    frames, captions = _episode_pairs(episodes)
    keys = []
    for ep in episodes:
        for i in range(ep.num_frames):
            keys.append((tuple(sorted(ep.char_labels[i])), ep.scene_label))
    frames, captions, keys = frames[:limit], captions[:limit], keys[:limit]
    with torch.no_grad():
        v_p, _ = encoder.encode_frames(frames)
        t_p, _ = encoder.encode_captions(captions)
    sims = t_p[:, 0] @ v_p[:, 0].T
    top1 = sims.argmax(dim=1)
    hits = sum(1 for q, r in enumerate(top1.tolist()) if keys[q] == keys[r])
    return hits / len(keys)


def pretrain_all(
    episodes: list[StoryEpisode],
    holdout: list[StoryEpisode],
    enc_config: EncoderConfig,
    ae_config: AutoencoderConfig,
    seed: int = 0,
    clip_iterations: int = 1500,
    ae_iterations: int = 3000,
    psnr_floor: float = 28.0,
) -> tuple[JointEncoder, LatentAutoencoder, NullFixtures, dict]:
    """Pretrain encoder and codec, verify their floors, record null fixtures."""
    t0 = time.time()
    encoder, clip_log = pretrain_joint_encoder(episodes, enc_config, iterations=clip_iterations, seed=seed)
    ae, ae_log = pretrain_autoencoder(episodes, ae_config, iterations=ae_iterations, seed=seed + 100)
    rec = reconstruction_psnr(ae, holdout)
    if rec < psnr_floor:
        raise TrainingFailure(f"reconstruction PSNR {rec:.2f} dB below floor {psnr_floor} dB")
    acc = retrieval_accuracy(encoder, holdout)
    fixtures = compute_null_fixtures(encoder, ae)
    stats = {
        "psnr": rec,
        "retrieval_accuracy": acc,
        "clip_final_loss": clip_log.losses[-1],
        "ae_final_loss": ae_log.losses[-1],
        "wallclock": time.time() - t0,
    }
    return encoder, ae, fixtures, stats


# ----------------------------------------------------------------------------
# Persistence


def save_encoders(
    path,
    encoder: JointEncoder,
    ae: LatentAutoencoder,
    fixtures: NullFixtures,
    vocab_words: list[str],
    stats: dict | None = None,
):
    header = {
        "kind": "encoders",
        "encoder_config": dataclass_to_dict(encoder.config),
        "ae_config": dataclass_to_dict(ae.config),
        "vocab": vocab_words,
        "stats": stats or {},
    }
    tensors = {}
    tensors.update(ckpt.module_tensors(encoder, "encoder."))
    tensors.update(ckpt.module_tensors(ae, "ae."))
    tensors.update({f"fixtures.{k}": v for k, v in fixtures.tensors().items()})
    return ckpt.write_checkpoint(path, header, tensors)


def load_encoders(path) -> tuple[JointEncoder, LatentAutoencoder, NullFixtures, dict]:
    header, tensors = ckpt.read_checkpoint(path)
    if header.get("kind") != "encoders":
        raise ValidationError(f"expected an encoders checkpoint, got kind={header.get('kind')!r}")
    encoder = JointEncoder(EncoderConfig(**header["encoder_config"]))
    ae = LatentAutoencoder(AutoencoderConfig(**header["ae_config"]))
    ckpt.load_module_tensors(encoder, tensors, "encoder.")
    ckpt.load_module_tensors(ae, tensors, "ae.")
    fixtures = NullFixtures(
        v_p=tensors["fixtures.v_p"],
        v_h=tensors["fixtures.v_h"],
        t_p=tensors["fixtures.t_p"],
        t_h=tensors["fixtures.t_h"],
        latent=tensors["fixtures.latent"],
    )
    freeze(encoder)
    freeze(ae)
    return encoder, ae, fixtures, header


def dataclass_to_dict(cfg) -> dict:
    import dataclasses

    return dataclasses.asdict(cfg)
