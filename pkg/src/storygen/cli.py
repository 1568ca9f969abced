"""Command-line entry point.

Subcommands: make-data, train-encoders, train-prior, train-contextual,
generate, evaluate, ablate, bench-speed. Every command takes --config/--set
overrides, an output directory that is never overwritten silently, and a
--seed that feeds all randomness. Exit codes are stable per error category.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as cfgmod
from .data import generate_dataset, load_dataset, save_dataset
from .errors import (
    ConfigurationError,
    DataError,
    IntegrityError,
    NumericalFailure,
    StateError,
    StorygenError,
    TrainingFailure,
    ValidationError,
)
from .evaluation import (
    MetricReport,
    bench_speed,
    char_metrics,
    ensure_classifier,
    format_report_table,
    frechet_distance,
    request_from_episode,
    run_ablations,
)
from .pipeline import StoryPipeline, StoryRequest, frames_to_uint8, write_story
from .runtime import run_training

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_TRAINING = 5
EXIT_NUMERICAL = 6

_ERROR_CODES: list[tuple[type, int, str]] = [
    (NumericalFailure, EXIT_NUMERICAL, "numerical"),
    (TrainingFailure, EXIT_TRAINING, "training"),
    (DataError, EXIT_DATA, "data"),
    (IntegrityError, EXIT_DATA, "data"),
    (ConfigurationError, EXIT_CONFIG, "config"),
    (ValidationError, EXIT_CONFIG, "config"),
    (StateError, EXIT_CONFIG, "config"),
]


def data_root() -> Path:
    return Path(os.environ.get("STORYGEN_DATA_ROOT", "runs"))


def _prepare_out(out: str | Path, force: bool) -> Path:
    out = Path(out)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigurationError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_cfg(args) -> dict:
    cfg = cfgmod.load_config(args.config)
    cfg = cfgmod.apply_overrides(cfg, args.set or [])
    if getattr(args, "seed", None) is not None:
        for section in ("data", "encoders", "prior", "contextual", "evaluation"):
            cfg[section]["seed"] = str(args.seed)
    torch.set_num_threads(cfgmod.cfg_int(cfg, "runtime", "threads"))
    return cfg


def _echo_config(cfg: dict, out: Path) -> None:
    cfgmod.save_config(cfg, out / "effective.cfg")


# ----------------------------------------------------------------------------
# Contact sheets


def render_contact_sheet(frames: np.ndarray, captions: list[str], path: Path | str, upscale: int = 4) -> Path:
    """One row per story: frames left to right, caption text beneath each cell."""
    from PIL import Image, ImageDraw, ImageFont

    f, _, h, w = frames.shape
    cell_w, cell_h = w * upscale, h * upscale
    text_h = 36
    pad = 4
    sheet = Image.new("RGB", (f * (cell_w + pad) + pad, cell_h + text_h + 2 * pad), (245, 245, 245))
    draw = ImageDraw.Draw(sheet)
    font = ImageFont.load_default()
    for i in range(f):
        cell = Image.fromarray(frames_to_uint8(frames[i]).transpose(1, 2, 0)).resize(
            (cell_w, cell_h), Image.NEAREST
        )
        x = pad + i * (cell_w + pad)
        sheet.paste(cell, (x, pad))
        words = captions[i].split()
        lines, line = [], ""
        for word in words:
            trial = f"{line} {word}".strip()
            if draw.textlength(trial, font=font) > cell_w and line:
                lines.append(line)
                line = word
            else:
                line = trial
        lines.append(line)
        for j, text in enumerate(lines[:3]):
            draw.text((x, cell_h + pad + 2 + j * 11), text, fill=(20, 20, 20), font=font)
    path = Path(path)
    sheet.save(path)
    return path


# ----------------------------------------------------------------------------
# Commands


def cmd_make_data(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(args.out or data_root() / "data", args.force)
    spec = cfgmod.dataset_spec_from(cfg)
    for split in ("train", "test"):
        episodes = generate_dataset(spec, split)
        save_dataset(episodes, spec, out, split)
        print(f"wrote {len(episodes)} {split} episodes to {out / split}")
    _echo_config(cfg, out)
    return EXIT_OK


def cmd_train(args, stage: str) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(args.out or data_root() / stage, args.force)
    _echo_config(cfg, out)
    result = run_training(
        cfg,
        stage,
        data_dir=args.data or data_root() / "data",
        out_dir=out,
        encoders_path=getattr(args, "encoders", None),
        resume_from=args.resume,
    )
    print(f"finished at step {result.step}; artifact: {result.artifact}")
    return EXIT_OK


def _build_pipeline(args) -> StoryPipeline:
    encoders = args.encoders or data_root() / "encoders" / "encoders.ckpt"
    contextual = args.contextual or data_root() / "contextual" / "contextual.ckpt"
    prior = args.prior or data_root() / "prior" / "prior.ckpt"
    if prior and not Path(prior).exists():
        prior = None
    return StoryPipeline.from_checkpoints(encoders, contextual, prior_path=prior)


def cmd_generate(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(args.out or data_root() / "stories", args.force)
    _echo_config(cfg, out)
    pipeline = _build_pipeline(args)
    episodes, _ = load_dataset(args.data or data_root() / "data", args.split)
    by_id = {ep.episode_id: ep for ep in episodes}
    steps = cfgmod.cfg_int(cfg, "sampler", "steps")
    guidance = cfgmod.cfg_float(cfg, "sampler", "guidance_scale")
    known = tuple(int(k) for k in args.known.split(",") if k != "") if args.known else ()
    seed = args.seed if args.seed is not None else 0

    if args.num_stories:
        targets = episodes[: args.num_stories]
    else:
        episode_id = args.episode_id if args.episode_id is not None else episodes[0].episode_id
        if episode_id not in by_id:
            raise DataError(f"episode {episode_id} not found in split {args.split!r}")
        targets = [by_id[episode_id]]

    for k, ep in enumerate(targets):
        request = request_from_episode(
            ep, known=known, seed=seed + 1000 * k, steps=steps, guidance_scale=guidance, mode=args.mode
        )
        if args.caption:
            if len(args.caption) != ep.num_frames:
                raise ValidationError(
                    f"expected {ep.num_frames} --caption flags, got {len(args.caption)}"
                )
            request.captions = list(args.caption)
        result = pipeline.generate(request)
        story_dir = out / f"story_{ep.episode_id:05d}"
        write_story(result, request, story_dir)
        with open(story_dir / "metadata.json") as fh:
            metadata = json.load(fh)
        metadata["episode_id"] = ep.episode_id
        with open(story_dir / "metadata.json", "w") as fh:
            json.dump(metadata, fh, indent=2, sort_keys=True)
            fh.write("\n")
        render_contact_sheet(result.frames, request.captions, story_dir / "contact_sheet.png")
        print(f"story {ep.episode_id}: {story_dir} ({result.denoiser_invocations} denoiser calls)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(args.out or data_root() / "evaluation", args.force)
    _echo_config(cfg, out)
    data_dir = args.data or data_root() / "data"
    train_eps, spec = load_dataset(data_dir, "train")
    test_eps, _ = load_dataset(data_dir, "test")
    by_id = {ep.episode_id: ep for ep in test_eps}

    classifier = ensure_classifier(cfg, train_eps, test_eps, spec, Path(args.classifier or out / "classifier.ckpt"))

    stories_dir = Path(args.stories)
    story_dirs = sorted(p for p in stories_dir.glob("story_*") if p.is_dir())
    if not story_dirs:
        raise DataError(f"no story_* directories under {stories_dir}")

    from PIL import Image

    gen_frames, gen_labels, real_frames = [], [], []
    consistent = 0
    for story in story_dirs:
        meta_path = story / "metadata.json"
        if not meta_path.exists():
            raise DataError(f"missing metadata file: {meta_path}")
        meta = json.loads(meta_path.read_text())
        ep = by_id.get(meta.get("episode_id"))
        if ep is None:
            raise DataError(f"story {story.name} references unknown episode {meta.get('episode_id')}")
        known = set(meta.get("reference_indices", []))
        scene_frames = []
        for i in range(ep.num_frames):
            frame_path = story / f"frame_{i}.png"
            if not frame_path.exists():
                raise DataError(f"missing frame file: {frame_path}")
            if i in known:
                continue
            arr = np.asarray(Image.open(frame_path).convert("RGB"), dtype=np.float32) / 255.0
            tensor = torch.from_numpy(arr.transpose(2, 0, 1))
            gen_frames.append(tensor)
            scene_frames.append(tensor)
            gen_labels.append(ep.char_labels[i])
            real_frames.append(torch.from_numpy(np.array(ep.frames[i])))
        _, scenes = classifier.classify(torch.stack(scene_frames))
        if all(s == ep.scene_label for s in scenes):
            consistent += 1

    gen_batch = torch.stack(gen_frames)
    real_batch = torch.stack(real_frames)
    acc, f1 = char_metrics(classifier, gen_batch, gen_labels)
    from .encoders import load_encoders

    encoder, _, _, _ = load_encoders(args.encoders or data_root() / "encoders" / "encoders.ckpt")
    with torch.no_grad():
        feats_gen, _ = encoder.encode_frames(gen_batch)
        feats_real, _ = encoder.encode_frames(real_batch)
    fd = frechet_distance(feats_real[:, 0].numpy(), feats_gen[:, 0].numpy())
    report = MetricReport(
        char_acc=acc, char_f1=f1, fd=fd,
        consistency=consistent / len(story_dirs), num_stories=len(story_dirs),
    )
    report.save(out / "report.json")
    (out / "table.txt").write_text(format_report_table({"evaluated": report}))
    print(format_report_table({"evaluated": report}))
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(args.out or data_root() / "ablations", args.force)
    _echo_config(cfg, out)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    variants = args.variants.split(",") if args.variants else None
    results = run_ablations(
        cfg,
        data_dir=args.data or data_root() / "data",
        encoders_path=args.encoders or data_root() / "encoders" / "encoders.ckpt",
        workspace=out,
        variants=variants,
        seeds=seeds,
        num_stories=args.num_stories,
    )
    combined = {}
    for seed, per_variant in results.items():
        for variant, report in per_variant.items():
            combined[f"{variant}@seed{seed}"] = report
    (out / "combined_table.txt").write_text(format_report_table(combined))
    print(format_report_table(combined))
    return EXIT_OK


def cmd_bench_speed(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out(args.out or data_root() / "bench", args.force)
    _echo_config(cfg, out)
    pipeline = _build_pipeline(args)
    episodes, _ = load_dataset(args.data or data_root() / "data", "test")
    steps = cfgmod.cfg_int(cfg, "sampler", "steps")
    guidance = cfgmod.cfg_float(cfg, "sampler", "guidance_scale")
    requests = [
        request_from_episode(ep, known=(0,), seed=args.seed or 0, steps=steps, guidance_scale=guidance)
        for ep in episodes[: args.num_stories]
    ]
    table = bench_speed(pipeline, requests, repetitions=args.repetitions)
    with open(out / "timings.json", "w") as fh:
        json.dump(table, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for mode, stats in table.items():
        print(
            f"{mode}: {stats['mean_s']:.3f} s/story (std {stats['std_s']:.3f}, "
            f"{int(stats['denoiser_invocations'])} denoiser calls)"
        )
    return EXIT_OK


# ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="storygen", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", default=None, help="INI config file (defaults built in)")
        p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")
        if needs_out:
            p.add_argument("--out", default=None, help="output directory")

    p = sub.add_parser("make-data", help="generate the toy dataset")
    common(p)

    for stage in ("encoders", "prior", "contextual"):
        p = sub.add_parser(f"train-{stage}", help=f"train the {stage} stage")
        common(p)
        p.add_argument("--data", default=None, help="dataset directory")
        p.add_argument("--resume", default=None, help="training checkpoint to resume from")
        if stage != "encoders":
            p.add_argument("--encoders", default=None, help="encoders checkpoint")

    p = sub.add_parser("generate", help="generate stories")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--encoders", default=None)
    p.add_argument("--prior", default=None)
    p.add_argument("--contextual", default=None)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--episode-id", type=int, default=None)
    p.add_argument("--num-stories", type=int, default=None, help="generate for the first N test episodes")
    p.add_argument("--known", default="0", help="comma-separated reference frame indices ('' for caption-only)")
    p.add_argument("--caption", action="append", help="override captions (repeat once per frame)")
    p.add_argument("--mode", default="single_pass", choices=("single_pass", "autoregressive"))

    p = sub.add_parser("evaluate", help="score a directory of generated stories")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--encoders", default=None)
    p.add_argument("--stories", required=True, help="directory containing story_* subdirectories")
    p.add_argument("--classifier", default=None, help="classifier checkpoint (trained+cached if missing)")

    p = sub.add_parser("ablate", help="train and evaluate the ablation variants")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--encoders", default=None)
    p.add_argument("--variants", default=None, help="comma list (default: B0,B1,B2,B3,B4,full)")
    p.add_argument("--seeds", default=None, help="comma list of seeds (default: config seed)")
    p.add_argument("--num-stories", type=int, default=None)

    p = sub.add_parser("bench-speed", help="compare single-pass vs autoregressive wall-clock")
    common(p)
    p.add_argument("--data", default=None)
    p.add_argument("--encoders", default=None)
    p.add_argument("--prior", default=None)
    p.add_argument("--contextual", default=None)
    p.add_argument("--num-stories", type=int, default=2)
    p.add_argument("--repetitions", type=int, default=3)

    return parser


COMMANDS = {
    "make-data": cmd_make_data,
    "train-encoders": lambda a: cmd_train(a, "encoders"),
    "train-prior": lambda a: cmd_train(a, "prior"),
    "train-contextual": lambda a: cmd_train(a, "contextual"),
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "bench-speed": cmd_bench_speed,
}


def dispatch(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except StorygenError as exc:
        for err_type, code, category in _ERROR_CODES:
            if isinstance(exc, err_type):
                print(f"error [{category}]: {exc}", file=sys.stderr)
                return code
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
