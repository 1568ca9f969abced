"""Training orchestration: tasks, the shared loop, checkpoints, resume.

Every stage is a task exposing step(it); the harness owns logging,
checkpointing and resumption. All randomness inside a run flows through one
torch.Generator whose state is checkpointed, so a resumed run continues
bit-identically (single-threaded execution).
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint as ckpt
from . import config as cfgmod
from .contextual import (
    ContextualConfig,
    ContextualDenoiser,
    ImageLevelCondition,
    contextual_training_loss,
    save_contextual,
)
from .data import StoryEpisode, load_dataset, make_split
from .diffusion import make_schedule
from .encoders import (
    AutoencoderConfig,
    EmbeddingBundle,
    EncoderConfig,
    JointEncoder,
    LatentAutoencoder,
    NullFixtures,
    compute_null_fixtures,
    freeze,
    load_encoders,
    reconstruction_psnr,
    retrieval_accuracy,
    save_encoders,
)
from .errors import ConfigurationError, NumericalFailure, TrainingFailure
from .prior import FramePriorModel, PriorConfig, prior_training_loss, save_prior

STAGES = ("encoders", "prior", "contextual")


# ----------------------------------------------------------------------------
# Precomputed episode features


@dataclass
class EpisodeCache:
    """Frozen-encoder outputs for a whole split, kept in memory."""

    v_p: torch.Tensor  # [N, f, 1, d]
    v_h: torch.Tensor  # [N, f, n_v, d]
    t_p: torch.Tensor  # [N, f, 1, d]
    t_h: torch.Tensor  # [N, f, n_t, d]
    latents: torch.Tensor | None  # [N, f, c, h, w]

    def bundle(self, idx: torch.Tensor) -> EmbeddingBundle:
        return EmbeddingBundle(v_p=self.v_p[idx], v_h=self.v_h[idx], t_p=self.t_p[idx], t_h=self.t_h[idx])


def build_cache(
    episodes: list[StoryEpisode],
    encoder: JointEncoder,
    ae: LatentAutoencoder | None = None,
    chunk: int = 16,
) -> EpisodeCache:
    parts = {k: [] for k in ("v_p", "v_h", "t_p", "t_h", "z")}
    with torch.no_grad():
        for start in range(0, len(episodes), chunk):
            group = episodes[start : start + chunk]
            f = group[0].num_frames
            frames = torch.from_numpy(np.concatenate([ep.frames for ep in group]))
            captions = torch.from_numpy(np.concatenate([ep.caption_ids for ep in group]))
            v_p, v_h = encoder.encode_frames(frames)
            t_p, t_h = encoder.encode_captions(captions)
            for key, val in (("v_p", v_p), ("v_h", v_h), ("t_p", t_p), ("t_h", t_h)):
                parts[key].append(val.reshape(len(group), f, *val.shape[1:]))
            if ae is not None:
                z = ae.encode_latent(frames)
                parts["z"].append(z.reshape(len(group), f, *z.shape[1:]))
    return EpisodeCache(
        v_p=torch.cat(parts["v_p"]),
        v_h=torch.cat(parts["v_h"]),
        t_p=torch.cat(parts["t_p"]),
        t_h=torch.cat(parts["t_h"]),
        latents=torch.cat(parts["z"]) if ae is not None else None,
    )




def sample_split_and_drop(f: int, batch: int, max_drop: int, gen: torch.Generator):
    """Per-iteration clip split (shared across the batch) plus per-sample drops."""
    f_k = int(torch.randint(1, f, (1,), generator=gen))
    perm = torch.randperm(f, generator=gen)
    split = make_split(f, perm[:f_k].tolist())
    drop = torch.zeros(batch, f, dtype=torch.bool)
    for s in range(batch):
        k = int(torch.randint(0, max_drop + 1, (1,), generator=gen))
        k = min(k, split.num_known)
        if k > 0:
            take = torch.randperm(split.num_known, generator=gen)[:k]
            for j in take.tolist():
                drop[s, split.known_indices[j]] = True
    return split, drop


# ----------------------------------------------------------------------------
# Tasks


class PriorTask:
    stage = "prior"

    def __init__(self, cfg: dict, episodes: list[StoryEpisode], encoder: JointEncoder):
        self.cfg = cfg
        self.iterations = cfgmod.cfg_int(cfg, "prior", "iterations")
        self.batch = cfgmod.cfg_int(cfg, "prior", "batch_size")
        self.lr = cfgmod.cfg_float(cfg, "prior", "lr")
        self.max_drop = cfgmod.cfg_int(cfg, "prior", "max_drop")
        self.cond_drop = cfgmod.cfg_float(cfg, "prior", "cond_drop_prob")
        seed = cfgmod.cfg_int(cfg, "prior", "seed")
        torch.manual_seed(seed)
        self.model = FramePriorModel(
            PriorConfig(
                layers=cfgmod.cfg_int(cfg, "prior", "layers"),
                width=cfgmod.cfg_int(cfg, "prior", "width"),
                heads=cfgmod.cfg_int(cfg, "prior", "heads"),
                embed_dim=encoder.config.embed_dim,
                caption_tokens=encoder.config.caption_length,
                image_tokens=encoder.config.image_tokens,
                include_hidden_visual=cfgmod.cfg_bool(cfg, "prior", "include_hidden_visual"),
            )
        )
        self.schedule = make_schedule(
            cfgmod.cfg_str(cfg, "prior", "schedule"), cfgmod.cfg_int(cfg, "prior", "timesteps")
        )
        self.opt = torch.optim.AdamW(
            self.model.parameters(),
            lr=self.lr,
            betas=(0.9, 0.999),
            weight_decay=cfgmod.cfg_float(cfg, "prior", "weight_decay"),
        )
        self.gen = torch.Generator().manual_seed(seed + 1)
        self.cache = build_cache(episodes, encoder)
        self.frames_per_story = episodes[0].num_frames

    def modules(self):
        return {"model": self.model}

    def optimizers(self):
        return {"opt": self.opt}

    def step(self, it: int) -> float:
        idx = torch.randint(0, self.cache.v_p.shape[0], (self.batch,), generator=self.gen)
        split, drop = sample_split_and_drop(self.frames_per_story, self.batch, self.max_drop, self.gen)
        bundle = self.cache.bundle(idx)
        loss = prior_training_loss(
            self.model, bundle, split, self.schedule, self.gen, drop=drop, uncond_drop_prob=self.cond_drop
        )
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return float(loss.detach())

    def save_final(self, out_dir: Path, flat_cfg: dict, step: int) -> Path:
        self.model.eval()
        return save_prior(out_dir / "prior.ckpt", self.model, flat_cfg, step)


class ContextualTask:
    stage = "contextual"

    def __init__(
        self,
        cfg: dict,
        episodes: list[StoryEpisode],
        encoder: JointEncoder,
        ae: LatentAutoencoder,
        fixtures: NullFixtures,
    ):
        self.cfg = cfg
        self.iterations = cfgmod.cfg_int(cfg, "contextual", "iterations")
        self.batch = cfgmod.cfg_int(cfg, "contextual", "batch_size")
        self.lr = cfgmod.cfg_float(cfg, "contextual", "lr")
        self.max_drop = cfgmod.cfg_int(cfg, "contextual", "max_drop")
        self.cond_drop = cfgmod.cfg_float(cfg, "contextual", "cond_drop_prob")
        seed = cfgmod.cfg_int(cfg, "contextual", "seed")
        torch.manual_seed(seed)
        self.model = ContextualDenoiser(contextual_config_from(cfg, encoder, ae))
        self.schedule = make_schedule(
            cfgmod.cfg_str(cfg, "contextual", "schedule"), cfgmod.cfg_int(cfg, "contextual", "timesteps")
        )
        self.opt = torch.optim.AdamW(
            self.model.parameters(),
            lr=self.lr,
            betas=(0.9, 0.999),
            weight_decay=cfgmod.cfg_float(cfg, "contextual", "weight_decay"),
        )
        self.gen = torch.Generator().manual_seed(seed + 1)
        self.cache = build_cache(episodes, encoder, ae)
        self.fixtures = fixtures
        self.frames_per_story = episodes[0].num_frames

    def modules(self):
        return {"model": self.model}

    def optimizers(self):
        return {"opt": self.opt}

    def step(self, it: int) -> float:
        cache = self.cache
        idx = torch.randint(0, cache.v_p.shape[0], (self.batch,), generator=self.gen)
        split, drop = sample_split_and_drop(self.frames_per_story, self.batch, self.max_drop, self.gen)
        z0 = cache.latents[idx]
        b, f = z0.shape[0], z0.shape[1]

        # dropped reference frames are physically black: their embeddings are
        # the recorded null fixtures and their image condition is zero
        v_h = cache.v_h[idx].clone()
        v_p = cache.v_p[idx].clone()
        if drop.any():
            v_h[drop] = self.fixtures.v_h
            v_p[drop] = self.fixtures.v_p
        known_mask = torch.zeros(b, f, dtype=torch.bool)
        known_mask[:, list(split.known_indices)] = True
        usable = known_mask & ~drop
        cond_latents = z0 * usable[:, :, None, None, None]
        marker = usable[:, :, None, None, None].float().expand(b, f, 1, z0.shape[3], z0.shape[4])
        image_cond = ImageLevelCondition(cond_latents, marker.contiguous())

        v_pred = cache.v_p[idx][:, list(split.unknown_indices)]  # teacher forcing
        context = self.model.build_feature_context(
            cache.t_h[idx], cache.t_p[idx], v_h, v_p, v_pred, split
        )
        loss = contextual_training_loss(
            self.model, z0, image_cond, context, self.schedule, self.gen, self.cond_drop
        )
        self.opt.zero_grad()
        loss.backward()
        self.opt.step()
        return float(loss.detach())

    def save_final(self, out_dir: Path, flat_cfg: dict, step: int) -> Path:
        self.model.eval()
        return save_contextual(out_dir / "contextual.ckpt", self.model, flat_cfg, step)


class EncodersTask:
    """Contrastive encoder phase followed by the autoencoder phase."""

    stage = "encoders"

    def __init__(self, cfg: dict, episodes: list[StoryEpisode], holdout: list[StoryEpisode], vocab_words):
        self.cfg = cfg
        self.clip_iters = cfgmod.cfg_int(cfg, "encoders", "clip_iterations")
        self.ae_iters = cfgmod.cfg_int(cfg, "encoders", "ae_iterations")
        self.iterations = self.clip_iters + self.ae_iters
        self.clip_batch = cfgmod.cfg_int(cfg, "encoders", "clip_batch")
        self.ae_batch = cfgmod.cfg_int(cfg, "encoders", "ae_batch")
        self.lr = cfgmod.cfg_float(cfg, "encoders", "clip_lr")
        self.psnr_floor = cfgmod.cfg_float(cfg, "encoders", "psnr_floor")
        self.vocab_words = vocab_words
        self.holdout = holdout
        seed = cfgmod.cfg_int(cfg, "encoders", "seed")
        spec_size = episodes[0].frames.shape[-1]
        torch.manual_seed(seed)
        self.encoder = JointEncoder(
            EncoderConfig(
                embed_dim=cfgmod.cfg_int(cfg, "encoders", "embed_dim"),
                text_layers=cfgmod.cfg_int(cfg, "encoders", "text_layers"),
                text_heads=cfgmod.cfg_int(cfg, "encoders", "text_heads"),
                caption_length=episodes[0].caption_ids.shape[1],
                vocab_size=len(vocab_words) + 1,  # +1 for padding id 0
                image_size=spec_size,
            )
        )
        self.ae = LatentAutoencoder(
            AutoencoderConfig(
                latent_channels=cfgmod.cfg_int(cfg, "encoders", "latent_channels"),
                downsample=cfgmod.cfg_int(cfg, "encoders", "downsample"),
                base_width=cfgmod.cfg_int(cfg, "encoders", "ae_base_width"),
                image_size=spec_size,
            )
        )
        self.clip_opt = torch.optim.AdamW(
            self.encoder.parameters(), lr=cfgmod.cfg_float(cfg, "encoders", "clip_lr"), weight_decay=0.01
        )
        self.ae_opt = torch.optim.AdamW(
            self.ae.parameters(), lr=cfgmod.cfg_float(cfg, "encoders", "ae_lr"), weight_decay=0.0
        )
        self.gen = torch.Generator().manual_seed(seed + 1)
        self.frames = torch.from_numpy(np.concatenate([ep.frames for ep in episodes]))
        self.captions = torch.from_numpy(np.concatenate([ep.caption_ids for ep in episodes]))
        self.chance = math.log(self.clip_batch)
        self.warmup = max(1, self.clip_iters // 4)

    def modules(self):
        return {"encoder": self.encoder, "ae": self.ae}

    def optimizers(self):
        return {"clip": self.clip_opt, "ae": self.ae_opt}

    def step(self, it: int) -> float:
        if it < self.clip_iters:
            idx = torch.randint(0, self.frames.shape[0], (self.clip_batch,), generator=self.gen)
            v_p, _ = self.encoder.encode_frames(self.frames[idx])
            t_p, _ = self.encoder.encode_captions(self.captions[idx])
            logits = self.encoder.logit_scale.exp().clamp(max=100.0) * v_p[:, 0] @ t_p[:, 0].T
            labels = torch.arange(self.clip_batch)
            loss = 0.5 * (F.cross_entropy(logits, labels) + F.cross_entropy(logits.T, labels))
            value = float(loss.detach())
            if it >= self.warmup and value > self.chance:
                raise TrainingFailure(
                    f"contrastive loss {value:.3f} above chance {self.chance:.3f} at iteration {it}"
                )
            self.clip_opt.zero_grad()
            loss.backward()
            self.clip_opt.step()
            return value
        idx = torch.randint(0, self.frames.shape[0], (self.ae_batch,), generator=self.gen)
        x = self.frames[idx]
        recon = self.ae.decoder(self.ae.encode_raw(x))
        loss = F.mse_loss(recon, x * 2 - 1)
        if not torch.isfinite(loss):
            raise NumericalFailure("non-finite autoencoder loss")
        self.ae_opt.zero_grad()
        loss.backward()
        self.ae_opt.step()
        return float(loss.detach())

    def save_final(self, out_dir: Path, flat_cfg: dict, step: int) -> Path:
        with torch.no_grad():
            z = self.ae.encode_raw(self.frames[: min(512, self.frames.shape[0])])
            self.ae.latent_scale.fill_(float(z.std().clamp(min=1e-8)))
            self.ae.is_trained.fill_(True)
        freeze(self.encoder)
        freeze(self.ae)
        rec = reconstruction_psnr(self.ae, self.holdout)
        if rec < self.psnr_floor:
            raise TrainingFailure(f"reconstruction PSNR {rec:.2f} dB below floor {self.psnr_floor} dB")
        acc = retrieval_accuracy(self.encoder, self.holdout)
        fixtures = compute_null_fixtures(self.encoder, self.ae)
        stats = {"psnr": rec, "retrieval_accuracy": acc, "step": step}
        return save_encoders(out_dir / "encoders.ckpt", self.encoder, self.ae, fixtures, self.vocab_words, stats)


def contextual_config_from(cfg: dict, encoder: JointEncoder, ae: LatentAutoencoder) -> ContextualConfig:
    return ContextualConfig(
        latent_channels=ae.config.latent_channels,
        latent_size=ae.config.latent_size,
        base_width=cfgmod.cfg_int(cfg, "contextual", "base_width"),
        heads=cfgmod.cfg_int(cfg, "contextual", "heads"),
        context_dim=cfgmod.cfg_int(cfg, "contextual", "context_dim"),
        embed_dim=encoder.config.embed_dim,
        caption_tokens=encoder.config.caption_length,
        image_tokens=encoder.config.image_tokens,
        use_image_condition=cfgmod.cfg_bool(cfg, "contextual", "use_image_condition"),
        use_mim=cfgmod.cfg_bool(cfg, "contextual", "use_mim"),
        use_ssm=cfgmod.cfg_bool(cfg, "contextual", "use_ssm"),
        use_stage1_prior=cfgmod.cfg_bool(cfg, "contextual", "use_stage1_prior"),
        use_frame_attention=cfgmod.cfg_bool(cfg, "contextual", "use_frame_attention"),
    )


# ----------------------------------------------------------------------------
# Harness


@dataclass
class TrainResult:
    final_checkpoint: Path
    artifact: Path | None
    metrics_path: Path
    step: int
    last_loss: float


def _optimizer_tensors(name: str, opt: torch.optim.Optimizer) -> tuple[dict, list]:
    tensors = {}
    sd = opt.state_dict()
    for idx, state in sd["state"].items():
        for key, value in state.items():
            if not torch.is_tensor(value):
                value = torch.tensor(value)
            tensors[f"opt.{name}.{idx}.{key}"] = value
    return tensors, sd["param_groups"]


def _load_optimizer(name: str, opt: torch.optim.Optimizer, tensors: dict, param_groups: list) -> None:
    state: dict[int, dict] = {}
    prefix = f"opt.{name}."
    for key, value in tensors.items():
        if not key.startswith(prefix):
            continue
        idx_str, field = key[len(prefix) :].split(".", 1)
        state.setdefault(int(idx_str), {})[field] = value
    opt.load_state_dict({"state": state, "param_groups": param_groups})


class Trainer:
    def __init__(self, task, out_dir: Path, flat_cfg: dict, log_every: int, checkpoint_every: int):
        self.task = task
        self.out_dir = Path(out_dir)
        self.flat_cfg = dict(flat_cfg)
        self.log_every = max(1, log_every)
        self.checkpoint_every = max(1, checkpoint_every)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "checkpoints").mkdir(exist_ok=True)
        self.metrics_path = self.out_dir / "metrics.jsonl"
        self.metric_tail: list[list] = []

    def _log(self, step: int, loss: float) -> None:
        record = {"step": step, "loss": loss, "lr": self.task.lr, "wallclock": round(time.time(), 3)}
        with open(self.metrics_path, "a") as fh:
            fh.write(json.dumps(record, sort_keys=True) + "\n")
        self.metric_tail.append([step, loss])
        self.metric_tail = self.metric_tail[-5:]

    def _checkpoint(self, step: int, tag: str | None = None) -> Path:
        tensors = {"rng.state": self.task.gen.get_state()}
        for name, module in self.task.modules().items():
            tensors.update(ckpt.module_tensors(module, f"module.{name}."))
        groups = {}
        for name, opt in self.task.optimizers().items():
            opt_tensors, param_groups = _optimizer_tensors(name, opt)
            tensors.update(opt_tensors)
            groups[name] = param_groups
        header = {
            "kind": "train_state",
            "stage": self.task.stage,
            "config": self.flat_cfg,
            "config_hash": ckpt.config_hash(self.flat_cfg),
            "step": step,
            "total_iterations": self.task.iterations,
            "optimizer_groups": groups,
            "metric_tail": self.metric_tail,
        }
        name = tag or f"step_{step:08d}"
        return ckpt.write_checkpoint(self.out_dir / "checkpoints" / f"{name}.ckpt", header, tensors)

    def restore(self, checkpoint_path: Path) -> int:
        header, tensors = ckpt.read_checkpoint(checkpoint_path)
        if header.get("kind") != "train_state":
            raise ConfigurationError(f"not a training checkpoint: {checkpoint_path}")
        if header["stage"] != self.task.stage:
            raise ConfigurationError(
                f"checkpoint stage {header['stage']!r} does not match task {self.task.stage!r}"
            )
        stored = header["config"]
        if stored != self.flat_cfg:
            diff = []
            for key in sorted(set(stored) | set(self.flat_cfg)):
                a, b = stored.get(key), self.flat_cfg.get(key)
                if a != b:
                    diff.append(f"  {key}: checkpoint={a!r} requested={b!r}")
            raise ConfigurationError("config mismatch on resume:\n" + "\n".join(diff))
        for name, module in self.task.modules().items():
            ckpt.load_module_tensors(module, tensors, f"module.{name}.")
        for name, opt in self.task.optimizers().items():
            _load_optimizer(name, opt, tensors, header["optimizer_groups"][name])
        self.task.gen.set_state(tensors["rng.state"])
        self.metric_tail = [list(x) for x in header["metric_tail"]]
        return int(header["step"])

    def run(self, resume_from: Path | None = None, stop_after_step: int | None = None) -> TrainResult:
        start = 0
        if resume_from is not None:
            start = self.restore(Path(resume_from))
        total = self.task.iterations
        last_loss = float("nan")
        step = start
        for step in range(start + 1, total + 1):
            try:
                last_loss = self.task.step(step - 1)
            except NumericalFailure as exc:
                path = self._checkpoint(step - 1, tag=f"abort_step_{step - 1:08d}")
                raise NumericalFailure(f"{exc}; last finite state saved to {path}") from exc
            if step % self.log_every == 0 or step == total:
                self._log(step, last_loss)
            if step % self.checkpoint_every == 0 and step != total:
                self._checkpoint(step)
            if stop_after_step is not None and step >= stop_after_step and step != total:
                path = self._checkpoint(step)
                return TrainResult(path, None, self.metrics_path, step, last_loss)
        final = self._checkpoint(total, tag="final")
        artifact = self.task.save_final(self.out_dir, self.flat_cfg, total)
        return TrainResult(final, artifact, self.metrics_path, total, last_loss)


# ----------------------------------------------------------------------------
# Entry points


def _require(path: Path | str | None, what: str) -> Path:
    if path is None:
        raise ConfigurationError(f"missing required artifact: {what}")
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"missing required artifact: {what} ({path})")
    return path


def build_task(cfg: dict, stage: str, data_dir: Path, encoders_path: Path | None):
    if stage not in STAGES:
        raise ConfigurationError(f"unknown training stage {stage!r} (expected one of {STAGES})")
    data_dir = _require(data_dir, "dataset directory")
    train, spec = load_dataset(data_dir, "train")
    if stage == "encoders":
        holdout, _ = load_dataset(data_dir, "test")
        vocab_words = spec.vocabulary().id_to_word[1:]
        return EncodersTask(cfg, train, holdout, vocab_words)
    encoder, ae, fixtures, _ = load_encoders(_require(encoders_path, "encoders checkpoint"))
    if stage == "prior":
        return PriorTask(cfg, train, encoder)
    return ContextualTask(cfg, train, encoder, ae, fixtures)


def run_training(
    cfg: dict,
    stage: str,
    data_dir: Path | str,
    out_dir: Path | str,
    encoders_path: Path | str | None = None,
    resume_from: Path | str | None = None,
    stop_after_step: int | None = None,
) -> TrainResult:
    torch.set_num_threads(cfgmod.cfg_int(cfg, "runtime", "threads"))
    section = "encoders" if stage == "encoders" else stage
    task = build_task(cfg, stage, Path(data_dir), Path(encoders_path) if encoders_path else None)
    flat = cfgmod.flatten(cfg)
    flat["stage"] = stage
    trainer = Trainer(
        task,
        Path(out_dir),
        flat,
        log_every=cfgmod.cfg_int(cfg, section, "log_every"),
        checkpoint_every=cfgmod.cfg_int(cfg, section, "checkpoint_every"),
    )
    return trainer.run(resume_from=Path(resume_from) if resume_from else None, stop_after_step=stop_after_step)


def resume_training(
    checkpoint_path: Path | str,
    data_dir: Path | str,
    out_dir: Path | str,
    encoders_path: Path | str | None = None,
    cfg: dict | None = None,
    stop_after_step: int | None = None,
) -> TrainResult:
    """Continue a run from a checkpoint; a no-op if it is already complete."""
    header, _ = ckpt.read_checkpoint(checkpoint_path)
    if header.get("kind") != "train_state":
        raise ConfigurationError(f"not a training checkpoint: {checkpoint_path}")
    stored_flat = dict(header["config"])
    stage = stored_flat.pop("stage")
    if cfg is None:
        nested: dict[str, dict[str, str]] = {}
        for key, value in stored_flat.items():
            section, name = key.split(".", 1)
            nested.setdefault(section, {})[name] = value
        cfg = nested
    if int(header["step"]) >= int(header["total_iterations"]):
        return TrainResult(Path(checkpoint_path), None, Path(out_dir) / "metrics.jsonl",
                           int(header["step"]), float("nan"))
    return run_training(
        cfg, stage, data_dir, out_dir,
        encoders_path=encoders_path, resume_from=checkpoint_path, stop_after_step=stop_after_step,
    )
