"""End-to-end story generation.

From reference frames plus all captions to a finished story: encode, predict
the unknown frames' embeddings (stage 1), denoise all frames in one joint
trajectory (stage 2), decode, and compose with the references kept verbatim.
An autoregressive mode runs one trajectory per generated frame with the same
trained models, for the architecture comparison.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .contextual import (
    ContextualDenoiser,
    ImageLevelCondition,
    load_contextual,
    sample_contextual,
)
from .data import Vocabulary, make_split
from .diffusion import GuidanceConfig, SamplerConfig, make_schedule
from .encoders import EmbeddingBundle, JointEncoder, LatentAutoencoder, NullFixtures, load_encoders
from .errors import ConfigurationError, ValidationError
from .prior import FramePriorModel, load_prior, sample_prior

STAGE1_SEED_OFFSET = 1
STAGE2_SEED_OFFSET = 2


@dataclass
class StoryRequest:
    captions: list[str]
    references: list[tuple[int, np.ndarray]] = field(default_factory=list)
    seed: int = 0
    guidance_scale: float = 2.0
    steps: int = 20
    mode: str = "single_pass"  # or "autoregressive"

    @property
    def num_frames(self) -> int:
        return len(self.captions)

    def validate(self) -> None:
        if not self.captions:
            raise ValidationError("request must contain at least one caption")
        indices = [i for i, _ in self.references]
        if len(set(indices)) != len(indices):
            raise ValidationError("reference indices must be distinct")
        for i, frame in self.references:
            if not 0 <= i < self.num_frames:
                raise ValidationError(f"reference index {i} out of range [0, {self.num_frames})")
            if frame.ndim != 3:
                raise ValidationError("reference frames must be [C, H, W] arrays")
        if len(indices) >= self.num_frames:
            raise ValidationError("at least one frame must be generated")
        if self.mode not in ("single_pass", "autoregressive"):
            raise ValidationError(f"unknown mode {self.mode!r}")


@dataclass
class StoryResult:
    frames: np.ndarray  # [f, 3, H, W] float32
    known_indices: tuple[int, ...]
    predicted_embeddings: torch.Tensor | None
    timing: dict
    denoiser_invocations: int
    seeds: dict
    mode: str


class StoryPipeline:
    def __init__(
        self,
        encoder: JointEncoder,
        ae: LatentAutoencoder,
        fixtures: NullFixtures,
        vocab: Vocabulary,
        contextual_model: ContextualDenoiser,
        contextual_schedule_kind: str,
        contextual_timesteps: int,
        prior_model: FramePriorModel | None = None,
        prior_schedule_kind: str = "cosine",
        prior_timesteps: int = 1000,
    ):
        self.encoder = encoder
        self.ae = ae
        self.fixtures = fixtures
        self.vocab = vocab
        self.contextual = contextual_model
        self.contextual_schedule = make_schedule(contextual_schedule_kind, contextual_timesteps)
        self.prior = prior_model
        self.prior_schedule = make_schedule(prior_schedule_kind, prior_timesteps) if prior_model else None
        if contextual_model.config.use_stage1_prior and prior_model is None:
            raise ConfigurationError("contextual model expects stage-1 embeddings but no prior was given")
        if prior_model is not None and prior_model.config.embed_dim != encoder.config.embed_dim:
            raise ConfigurationError(
                f"embedding width mismatch: encoder d={encoder.config.embed_dim}, "
                f"prior d={prior_model.config.embed_dim}"
            )
        if contextual_model.config.embed_dim != encoder.config.embed_dim:
            raise ConfigurationError(
                f"embedding width mismatch: encoder d={encoder.config.embed_dim}, "
                f"contextual d={contextual_model.config.embed_dim}"
            )
        if contextual_model.config.latent_channels != ae.config.latent_channels:
            raise ConfigurationError("latent channel mismatch between codec and contextual model")

    @classmethod
    def from_checkpoints(cls, encoders_path, contextual_path, prior_path=None) -> "StoryPipeline":
        encoder, ae, fixtures, enc_header = load_encoders(encoders_path)
        vocab = Vocabulary(enc_header["vocab"])
        contextual_model, c_header = load_contextual(contextual_path)
        prior_model = None
        prior_kind, prior_steps = "cosine", 1000
        if prior_path is not None:
            prior_model, p_header = load_prior(prior_path)
            prior_kind = p_header["config"].get("prior.schedule", "cosine")
            prior_steps = int(p_header["config"].get("prior.timesteps", "1000"))
        return cls(
            encoder,
            ae,
            fixtures,
            vocab,
            contextual_model,
            c_header["config"].get("contextual.schedule", "linear"),
            int(c_header["config"].get("contextual.timesteps", "1000")),
            prior_model=prior_model,
            prior_schedule_kind=prior_kind,
            prior_timesteps=prior_steps,
        )

    # ------------------------------------------------------------------

    def _encode_request(self, request: StoryRequest):
        f = request.num_frames
        cfg = self.encoder.config
        ids = np.stack([self.vocab.encode(c, cfg.caption_length) for c in request.captions])
        caption_ids = torch.from_numpy(ids)
        known = tuple(sorted(i for i, _ in request.references))
        split = make_split(f, known)
        with torch.no_grad():
            t_p, t_h = self.encoder.encode_captions(caption_ids)
            d = cfg.embed_dim
            v_p = self.fixtures.v_p.expand(f, 1, d).clone()
            v_h = self.fixtures.v_h.expand(f, cfg.image_tokens, d).clone()
            if known:
                ref_frames = torch.stack(
                    [torch.from_numpy(np.array(fr, dtype=np.float32)) for _, fr in sorted(request.references)]
                )
                rv_p, rv_h = self.encoder.encode_frames(ref_frames)
                for j, i in enumerate(known):
                    v_p[i] = rv_p[j]
                    v_h[i] = rv_h[j]
        bundle = EmbeddingBundle(v_p=v_p, v_h=v_h, t_p=t_p, t_h=t_h)
        return bundle, split

    def _image_condition(self, request: StoryRequest, split) -> ImageLevelCondition:
        f = request.num_frames
        c, s = self.ae.config.latent_channels, self.ae.config.latent_size
        cond = torch.zeros(f, c, s, s)
        marker = torch.zeros(f, 1, s, s)
        if split.known_indices:
            ref_frames = torch.stack(
                [torch.from_numpy(np.array(fr, dtype=np.float32)) for _, fr in sorted(request.references)]
            )
            with torch.no_grad():
                z = self.ae.encode_latent(ref_frames)
            for j, i in enumerate(split.known_indices):
                cond[i] = z[j]
                marker[i] = 1.0
        return ImageLevelCondition(cond, marker)

    def _predict_embeddings(self, bundle, split, request) -> tuple[torch.Tensor | None, float]:
        if not self.contextual.config.use_stage1_prior:
            return None, 0.0
        t0 = time.perf_counter()
        v_pred = sample_prior(
            self.prior,
            bundle,
            split,
            self.prior_schedule,
            SamplerConfig(steps=request.steps, prediction_mode="x0"),
            GuidanceConfig(scale=request.guidance_scale),
            seed=request.seed + STAGE1_SEED_OFFSET,
        )
        return v_pred, time.perf_counter() - t0

    def _compose(self, request: StoryRequest, split, generated: dict[int, np.ndarray]) -> np.ndarray:
        refs = {i: fr for i, fr in request.references}
        frames = []
        for i in range(request.num_frames):
            if i in refs:
                frames.append(np.array(refs[i], dtype=np.float32))  # verbatim
            else:
                frames.append(generated[i])
        return np.stack(frames)

    def generate(self, request: StoryRequest) -> StoryResult:
        request.validate()
        if request.mode == "autoregressive":
            return self.generate_autoregressive(request)
        bundle, split = self._encode_request(request)
        v_pred, stage1_s = self._predict_embeddings(bundle, split, request)
        image_cond = self._image_condition(request, split)
        with torch.no_grad():
            context = self.contextual.build_feature_context(
                bundle.t_h[None], bundle.t_p[None], bundle.v_h[None], bundle.v_p[None],
                v_pred[None] if v_pred is not None else None, split,
            )
        calls_before = self.contextual.eval_calls
        t0 = time.perf_counter()
        latents = sample_contextual(
            self.contextual,
            image_cond,
            context,
            self.contextual_schedule,
            SamplerConfig(steps=request.steps, prediction_mode="epsilon"),
            GuidanceConfig(scale=request.guidance_scale),
            seed=request.seed + STAGE2_SEED_OFFSET,
            num_frames=request.num_frames,
        )
        stage2_s = time.perf_counter() - t0
        t0 = time.perf_counter()
        with torch.no_grad():
            decoded = self.ae.decode_latent(latents[list(split.unknown_indices)])
        decode_s = time.perf_counter() - t0
        generated = {i: decoded[j].numpy() for j, i in enumerate(split.unknown_indices)}
        frames = self._compose(request, split, generated)
        return StoryResult(
            frames=frames,
            known_indices=split.known_indices,
            predicted_embeddings=v_pred,
            timing={"stage1_s": stage1_s, "stage2_s": stage2_s, "decode_s": decode_s},
            denoiser_invocations=self.contextual.eval_calls - calls_before,
            seeds={
                "request": request.seed,
                "stage1": request.seed + STAGE1_SEED_OFFSET,
                "stage2": request.seed + STAGE2_SEED_OFFSET,
            },
            mode="single_pass",
        )

    def generate_autoregressive(self, request: StoryRequest) -> StoryResult:
        """One sampler trajectory per generated frame, earlier outputs become context."""
        request.validate()
        bundle, split0 = self._encode_request(request)
        v_pred, stage1_s = self._predict_embeddings(bundle, split0, request)
        pred_by_frame = (
            {i: v_pred[j] for j, i in enumerate(split0.unknown_indices)} if v_pred is not None else {}
        )
        f = request.num_frames
        refs = {i: np.array(fr, dtype=np.float32) for i, fr in request.references}
        generated: dict[int, np.ndarray] = {}
        calls_before = self.contextual.eval_calls
        stage2_s = 0.0
        decode_s = 0.0
        for target in split0.unknown_indices:
            known_now = tuple(sorted(set(refs) | set(generated)))
            split = make_split(f, known_now)
            known_frames = torch.stack(
                [torch.from_numpy(refs.get(i, generated.get(i))) for i in known_now]
            ) if known_now else None

            v_p = self.fixtures.v_p.expand(f, 1, -1).clone()
            v_h = self.fixtures.v_h.expand(f, self.encoder.config.image_tokens, -1).clone()
            c, s = self.ae.config.latent_channels, self.ae.config.latent_size
            cond = torch.zeros(f, c, s, s)
            marker = torch.zeros(f, 1, s, s)
            if known_frames is not None:
                with torch.no_grad():
                    kv_p, kv_h = self.encoder.encode_frames(known_frames)
                    kz = self.ae.encode_latent(known_frames)
                for j, i in enumerate(known_now):
                    v_p[i], v_h[i] = kv_p[j], kv_h[j]
                    cond[i], marker[i] = kz[j], 1.0
            step_bundle = EmbeddingBundle(v_p=v_p, v_h=v_h, t_p=bundle.t_p, t_h=bundle.t_h)
            step_pred = None
            if pred_by_frame:
                step_pred = torch.stack([pred_by_frame[i] for i in split.unknown_indices])
            with torch.no_grad():
                context = self.contextual.build_feature_context(
                    step_bundle.t_h[None], step_bundle.t_p[None], step_bundle.v_h[None],
                    step_bundle.v_p[None], step_pred[None] if step_pred is not None else None, split,
                )
            t0 = time.perf_counter()
            latents = sample_contextual(
                self.contextual,
                ImageLevelCondition(cond, marker),
                context,
                self.contextual_schedule,
                SamplerConfig(steps=request.steps, prediction_mode="epsilon"),
                GuidanceConfig(scale=request.guidance_scale),
                seed=request.seed + STAGE2_SEED_OFFSET + target,
                num_frames=f,
            )
            stage2_s += time.perf_counter() - t0
            t0 = time.perf_counter()
            with torch.no_grad():
                decoded = self.ae.decode_latent(latents[target : target + 1])
            decode_s += time.perf_counter() - t0
            generated[target] = decoded[0].numpy()
        frames = self._compose(request, split0, generated)
        return StoryResult(
            frames=frames,
            known_indices=split0.known_indices,
            predicted_embeddings=v_pred,
            timing={"stage1_s": stage1_s, "stage2_s": stage2_s, "decode_s": decode_s},
            denoiser_invocations=self.contextual.eval_calls - calls_before,
            seeds={"request": request.seed, "stage1": request.seed + STAGE1_SEED_OFFSET},
            mode="autoregressive",
        )


def frames_to_uint8(frames: np.ndarray) -> np.ndarray:
    return np.clip(np.round(frames * 255.0), 0, 255).astype(np.uint8)


def write_story(result: StoryResult, request: StoryRequest, out_dir: Path | str) -> Path:
    """One PNG per frame plus a deterministic metadata file; timings go to a
    separate file so output directories stay byte-comparable across runs."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(result.frames.shape[0]):
        arr = frames_to_uint8(result.frames[i]).transpose(1, 2, 0)
        Image.fromarray(arr).save(out_dir / f"frame_{i}.png")
    metadata = {
        "captions": request.captions,
        "reference_indices": sorted(i for i, _ in request.references),
        "seed": request.seed,
        "seeds": result.seeds,
        "guidance_scale": request.guidance_scale,
        "steps": request.steps,
        "mode": result.mode,
        "denoiser_invocations": result.denoiser_invocations,
    }
    with open(out_dir / "metadata.json", "w") as fh:
        json.dump(metadata, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "timings.json", "w") as fh:
        json.dump(result.timing, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out_dir
