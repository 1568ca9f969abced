"""Metric stack: character metrics via a small classifier, Fréchet feature
distance, scene-consistency score, the ablation runner, and the speed bench.

The classifier must clear a validity floor on held-out real frames before any
generated-frame number is trusted; the toy dataset's exact labels make that
floor checkable.
"""

from __future__ import annotations

import dataclasses
import json
import statistics
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from . import config as cfgmod
from .data import StoryEpisode
from .errors import TrainingFailure, ValidationError
from .pipeline import StoryPipeline, StoryRequest

ABLATION_VARIANTS: dict[str, dict[str, str]] = {
    "B0": {
        "use_image_condition": "false",
        "use_mim": "false",
        "use_ssm": "false",
        "use_stage1_prior": "true",
    },
    "B1": {
        "use_image_condition": "true",
        "use_mim": "false",
        "use_ssm": "false",
        "use_stage1_prior": "true",
    },
    "B2": {
        "use_image_condition": "true",
        "use_mim": "true",
        "use_ssm": "false",
        "use_stage1_prior": "true",
    },
    "B3": {
        "use_image_condition": "true",
        "use_mim": "false",
        "use_ssm": "true",
        "use_stage1_prior": "true",
    },
    "B4": {
        "use_image_condition": "true",
        "use_mim": "true",
        "use_ssm": "true",
        "use_stage1_prior": "false",
    },
    "full": {
        "use_image_condition": "true",
        "use_mim": "true",
        "use_ssm": "true",
        "use_stage1_prior": "true",
    },
}


@dataclass(frozen=True)
class ClassifierConfig:
    num_characters: int
    num_scenes: int
    image_size: int = 32


class CharClassifier(nn.Module):
    """Multi-label character head plus a scene head over single frames.

    Character presence is read off a spatial max over per-character response
    maps; glyphs are small, so average pooling would wash them out.
    """

    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        self.features = nn.Sequential(
            nn.Conv2d(3, 32, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(64, 128, 3, padding=1),
            nn.SiLU(),
        )
        self.char_map = nn.Conv2d(128, config.num_characters, 1)
        self.scene_head = nn.Linear(128, config.num_scenes)

    def forward(self, frames: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.features(frames * 2 - 1)
        char_logits = self.char_map(h).amax(dim=(2, 3))
        scene_logits = self.scene_head(h.mean(dim=(2, 3)))
        return char_logits, scene_logits

    @torch.no_grad()
    def classify(self, frames: torch.Tensor) -> tuple[list[frozenset[int]], list[int]]:
        char_logits, scene_logits = self.forward(frames)
        present = char_logits > 0  # sigmoid(x) > 0.5
        char_sets = [frozenset(torch.nonzero(row).flatten().tolist()) for row in present]
        scenes = scene_logits.argmax(dim=1).tolist()
        return char_sets, scenes


def _episode_frames_labels(episodes: list[StoryEpisode]):
    frames = torch.from_numpy(np.concatenate([ep.frames for ep in episodes]))
    char_labels: list[frozenset[int]] = []
    scene_labels: list[int] = []
    for ep in episodes:
        char_labels.extend(ep.char_labels)
        scene_labels.extend([ep.scene_label] * ep.num_frames)
    return frames, char_labels, scene_labels


def exact_set_accuracy(classifier: CharClassifier, frames: torch.Tensor, labels: list[frozenset[int]]) -> float:
    pred_sets, _ = classifier.classify(frames)
    return sum(1 for p, l in zip(pred_sets, labels) if p == l) / len(labels)


def train_char_classifier(
    episodes: list[StoryEpisode],
    holdout: list[StoryEpisode],
    config: ClassifierConfig,
    iterations: int = 2500,
    batch_size: int = 64,
    lr: float = 1e-3,
    seed: int = 0,
    accuracy_floor: float = 0.95,
    black_frame_fraction: float = 0.1,
) -> tuple[CharClassifier, dict]:
    """Supervised training on real frames; black frames as empty-set negatives.

    Raises TrainingFailure if held-out exact-set accuracy misses the floor,
    since character metrics would be meaningless below it.
    """
    torch.manual_seed(seed)
    model = CharClassifier(config)
    frames, char_labels, scene_labels = _episode_frames_labels(episodes)
    char_targets = torch.zeros(frames.shape[0], config.num_characters)
    for i, labels in enumerate(char_labels):
        for c in labels:
            char_targets[i, c] = 1.0
    scene_targets = torch.tensor(scene_labels)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, weight_decay=1e-4)
    gen = torch.Generator().manual_seed(seed + 1)
    n_black = max(1, int(batch_size * black_frame_fraction))
    for it in range(iterations):
        idx = torch.randint(0, frames.shape[0], (batch_size - n_black,), generator=gen)
        x = torch.cat([frames[idx], torch.zeros(n_black, *frames.shape[1:])])
        y_char = torch.cat([char_targets[idx], torch.zeros(n_black, config.num_characters)])
        char_logits, scene_logits = model(x)
        loss = F.binary_cross_entropy_with_logits(char_logits, y_char)
        # scene supervision only on real frames
        loss = loss + F.cross_entropy(scene_logits[: batch_size - n_black], scene_targets[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    val_frames, val_chars, val_scenes = _episode_frames_labels(holdout)
    acc = exact_set_accuracy(model, val_frames, val_chars)
    _, scene_pred = model.classify(val_frames)
    scene_acc = sum(1 for p, l in zip(scene_pred, val_scenes) if p == l) / len(val_scenes)
    black_sets, _ = model.classify(torch.zeros(4, *val_frames.shape[1:]))
    stats = {
        "holdout_exact_set_accuracy": acc,
        "holdout_scene_accuracy": scene_acc,
        "black_frame_empty": all(s == frozenset() for s in black_sets),
    }
    if acc < accuracy_floor:
        raise TrainingFailure(
            f"classifier held-out exact-set accuracy {acc:.3f} below validity floor {accuracy_floor}"
        )
    return model, stats


def save_classifier(path, model: CharClassifier, stats: dict):
    header = {"kind": "classifier", "config": dataclasses.asdict(model.config), "stats": stats}
    return ckpt.write_checkpoint(path, header, ckpt.module_tensors(model, "model."))


def load_classifier(path) -> tuple[CharClassifier, dict]:
    header, tensors = ckpt.read_checkpoint(path)
    if header.get("kind") != "classifier":
        raise ValidationError(f"expected a classifier checkpoint, got kind={header.get('kind')!r}")
    model = CharClassifier(ClassifierConfig(**header["config"]))
    ckpt.load_module_tensors(model, tensors, "model.")
    model.eval()
    return model, header["stats"]


# ----------------------------------------------------------------------------
# Metrics


def char_metrics(
    classifier: CharClassifier,
    frames: torch.Tensor,
    labels: list[frozenset[int]],
) -> tuple[float, float]:
    """Exact-set accuracy and micro-averaged F1 of character presence."""
    if frames.shape[0] != len(labels):
        raise ValidationError(f"{frames.shape[0]} frames but {len(labels)} label sets")
    pred_sets, _ = classifier.classify(frames)
    acc = sum(1 for p, l in zip(pred_sets, labels) if p == l) / len(labels)
    tp = fp = fn = 0
    for p, l in zip(pred_sets, labels):
        tp += len(p & l)
        fp += len(p - l)
        fn += len(l - p)
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0
    return acc, f1


def frechet_distance(feats_real: np.ndarray, feats_gen: np.ndarray) -> float:
    """Distance between Gaussian fits of two feature sets.

    ||mu_r - mu_g||^2 + tr(S_r + S_g - 2 (S_r S_g)^{1/2}), with the matrix
    square root taken through eigen-decompositions and negative eigenvalues
    clamped to zero.
    """
    real = np.asarray(feats_real, dtype=np.float64)
    gen = np.asarray(feats_gen, dtype=np.float64)
    if real.ndim != 2 or gen.ndim != 2 or real.shape[1] != gen.shape[1]:
        raise ValidationError("feature arrays must be [N, d] with matching d")
    if real.shape[0] < 2 or gen.shape[0] < 2:
        raise ValidationError("need at least 2 samples per side for a covariance")
    mu_r, mu_g = real.mean(axis=0), gen.mean(axis=0)
    cov_r = np.cov(real, rowvar=False)
    cov_g = np.cov(gen, rowvar=False)

    vals_r, vecs_r = np.linalg.eigh(cov_r)
    sqrt_r = (vecs_r * np.sqrt(np.clip(vals_r, 0, None))) @ vecs_r.T
    inner = sqrt_r @ cov_g @ sqrt_r
    vals = np.linalg.eigvalsh(inner)
    tr_sqrt = float(np.sqrt(np.clip(vals, 0, None)).sum())
    fd = float(((mu_r - mu_g) ** 2).sum() + np.trace(cov_r) + np.trace(cov_g) - 2 * tr_sqrt)
    return max(fd, 0.0)


@dataclass
class MetricReport:
    char_acc: float
    char_f1: float
    fd: float
    consistency: float
    num_stories: int
    mean_story_seconds: float = 0.0
    extra: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def save(self, path: Path | str) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    @staticmethod
    def load(path) -> "MetricReport":
        d = json.loads(Path(path).read_text())
        return MetricReport(**d)


def format_report_table(reports: dict[str, MetricReport]) -> str:
    header = f"{'variant':<10} {'char_acc':>9} {'char_f1':>9} {'fd':>10} {'consistency':>12}"
    lines = [header, "-" * len(header)]
    for name, r in reports.items():
        lines.append(
            f"{name:<10} {r.char_acc:>9.4f} {r.char_f1:>9.4f} {r.fd:>10.4f} {r.consistency:>12.4f}"
        )
    return "\n".join(lines) + "\n"


def request_from_episode(
    episode: StoryEpisode,
    known: tuple[int, ...] = (0,),
    seed: int = 0,
    steps: int = 20,
    guidance_scale: float = 2.0,
    mode: str = "single_pass",
) -> StoryRequest:
    references = [(int(i), episode.frames[int(i)]) for i in known]
    return StoryRequest(
        captions=list(episode.captions),
        references=references,
        seed=seed,
        guidance_scale=guidance_scale,
        steps=steps,
        mode=mode,
    )


def evaluate_pipeline(
    pipeline: StoryPipeline,
    episodes: list[StoryEpisode],
    classifier: CharClassifier,
    num_stories: int,
    seed: int = 0,
    steps: int = 20,
    guidance_scale: float = 2.0,
    known: tuple[int, ...] = (0,),
) -> MetricReport:
    """Generate stories for held-out episodes and score the generated frames."""
    episodes = episodes[:num_stories]
    if not episodes:
        raise ValidationError("no episodes to evaluate")
    gen_frames = []
    gen_labels: list[frozenset[int]] = []
    real_frames = []
    consistent = 0
    story_seconds = []
    for k, ep in enumerate(episodes):
        request = request_from_episode(ep, known=known, seed=seed + 1000 * k, steps=steps,
                                       guidance_scale=guidance_scale)
        result = pipeline.generate(request)
        unknown = [i for i in range(ep.num_frames) if i not in result.known_indices]
        for i in unknown:
            gen_frames.append(torch.from_numpy(result.frames[i]))
            gen_labels.append(ep.char_labels[i])
            real_frames.append(torch.from_numpy(np.array(ep.frames[i])))
        _, scenes = classifier.classify(torch.stack([torch.from_numpy(result.frames[i]) for i in unknown]))
        if all(s == ep.scene_label for s in scenes):
            consistent += 1
        story_seconds.append(result.timing["stage1_s"] + result.timing["stage2_s"])
    gen_batch = torch.stack(gen_frames)
    real_batch = torch.stack(real_frames)
    acc, f1 = char_metrics(classifier, gen_batch, gen_labels)
    with torch.no_grad():
        feats_gen, _ = pipeline.encoder.encode_frames(gen_batch)
        feats_real, _ = pipeline.encoder.encode_frames(real_batch)
    fd = frechet_distance(feats_real[:, 0].numpy(), feats_gen[:, 0].numpy())
    return MetricReport(
        char_acc=acc,
        char_f1=f1,
        fd=fd,
        consistency=consistent / len(episodes),
        num_stories=len(episodes),
        mean_story_seconds=float(np.mean(story_seconds)),
    )


# ----------------------------------------------------------------------------
# Ablations and speed


def run_ablations(
    cfg: dict,
    data_dir: Path | str,
    encoders_path: Path | str,
    workspace: Path | str,
    variants: list[str] | None = None,
    seeds: list[int] | None = None,
    num_stories: int | None = None,
) -> dict[int, dict[str, MetricReport]]:
    """Train and evaluate ablation variants under identical budgets per seed.

    The stage-1 prior is trained once per seed and shared by every variant
    that uses it; variants differ only in their conditioning switches.
    """
    from .data import load_dataset
    from .runtime import run_training

    variants = variants or list(ABLATION_VARIANTS)
    for v in variants:
        if v not in ABLATION_VARIANTS:
            raise ValidationError(f"unknown ablation variant {v!r}")
    seeds = seeds or [cfgmod.cfg_int(cfg, "contextual", "seed")]
    workspace = Path(workspace)
    test_episodes, spec = load_dataset(data_dir, "test")
    train_episodes, _ = load_dataset(data_dir, "train")
    if num_stories is None:
        num_stories = min(cfgmod.cfg_int(cfg, "evaluation", "num_stories"), len(test_episodes))

    classifier_path = workspace / "classifier.ckpt"
    classifier = ensure_classifier(cfg, train_episodes, test_episodes, spec, classifier_path)

    results: dict[int, dict[str, MetricReport]] = {}
    for seed in seeds:
        seed_dir = workspace / f"seed{seed}"
        per_variant: dict[str, MetricReport] = {}
        needs_prior = any(ABLATION_VARIANTS[v]["use_stage1_prior"] == "true" for v in variants)
        prior_path = None
        if needs_prior:
            prior_cfg = {k: dict(v) for k, v in cfg.items()}
            prior_cfg["prior"]["seed"] = str(seed)
            prior_dir = seed_dir / "prior"
            prior_path = prior_dir / "prior.ckpt"
            if not prior_path.exists():
                run_training(prior_cfg, "prior", data_dir, prior_dir, encoders_path=encoders_path)
        for variant in variants:
            var_cfg = {k: dict(v) for k, v in cfg.items()}
            var_cfg["contextual"].update(ABLATION_VARIANTS[variant])
            var_cfg["contextual"]["seed"] = str(seed)
            var_dir = seed_dir / variant
            ckpt_path = var_dir / "contextual.ckpt"
            if not ckpt_path.exists():
                run_training(var_cfg, "contextual", data_dir, var_dir, encoders_path=encoders_path)
            uses_prior = ABLATION_VARIANTS[variant]["use_stage1_prior"] == "true"
            pipeline = StoryPipeline.from_checkpoints(
                encoders_path, ckpt_path, prior_path=prior_path if uses_prior else None
            )
            report = evaluate_pipeline(
                pipeline,
                test_episodes,
                classifier,
                num_stories=num_stories,
                seed=cfgmod.cfg_int(cfg, "evaluation", "seed"),
                steps=cfgmod.cfg_int(cfg, "sampler", "steps"),
                guidance_scale=cfgmod.cfg_float(cfg, "sampler", "guidance_scale"),
            )
            report.extra["variant"] = variant
            report.extra["seed"] = seed
            report.save(var_dir / "report.json")
            per_variant[variant] = report
        results[seed] = per_variant
        (seed_dir / "table.txt").write_text(format_report_table(per_variant))
    return results


def ensure_classifier(cfg, train_episodes, test_episodes, spec, path: Path) -> CharClassifier:
    if Path(path).exists():
        classifier, _ = load_classifier(path)
        return classifier
    classifier, stats = train_char_classifier(
        train_episodes,
        test_episodes,
        ClassifierConfig(spec.num_characters, spec.num_scenes, spec.image_size),
        iterations=cfgmod.cfg_int(cfg, "evaluation", "classifier_iterations"),
        batch_size=cfgmod.cfg_int(cfg, "evaluation", "classifier_batch"),
        lr=cfgmod.cfg_float(cfg, "evaluation", "classifier_lr"),
        seed=cfgmod.cfg_int(cfg, "evaluation", "seed"),
        accuracy_floor=cfgmod.cfg_float(cfg, "evaluation", "classifier_floor"),
    )
    save_classifier(path, classifier, stats)
    return classifier


def bench_speed(
    pipeline: StoryPipeline,
    requests: list[StoryRequest],
    repetitions: int = 3,
) -> dict[str, dict[str, float]]:
    """Sampler-only wall-clock per story for both modes; warmup excluded."""
    table: dict[str, dict[str, float]] = {}
    for mode in ("single_pass", "autoregressive"):
        times = []
        invocations = []
        warm = dataclasses.replace(requests[0], mode=mode)
        pipeline.generate(warm)  # warmup, not timed
        for rep in range(repetitions):
            for request in requests:
                result = pipeline.generate(dataclasses.replace(request, mode=mode))
                times.append(result.timing["stage1_s"] + result.timing["stage2_s"])
                invocations.append(result.denoiser_invocations)
        table[mode] = {
            "mean_s": statistics.mean(times),
            "std_s": statistics.stdev(times) if len(times) > 1 else 0.0,
            "stories": float(len(times)),
            "denoiser_invocations": float(invocations[0]),
        }
    return table
