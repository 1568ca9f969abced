"""Procedural toy story dataset.

Episodes are short sequences of frames rendered from a closed world: a small
cast of glyph characters placed on a scene-specific background, one caption
per frame naming exactly the characters shown. Generation is a pure function
of (spec, episode_id), so datasets are bit-reproducible and every label is
exact by construction.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, DataError, ValidationError

# Closed world: (name, RGB color, glyph shape). Order defines character ids.
CHARACTER_TABLE = [
    ("ava", (220, 40, 40), "square"),
    ("ben", (40, 80, 220), "disc"),
    ("cleo", (235, 200, 40), "triangle"),
    ("dax", (200, 50, 200), "diamond"),
    ("eli", (40, 200, 200), "cross"),
    ("fay", (240, 140, 40), "ring"),
    ("gus", (120, 40, 160), "square"),
    ("ivy", (40, 180, 70), "disc"),
    ("kai", (150, 100, 40), "triangle"),
    ("lua", (230, 120, 170), "diamond"),
]

SCENE_TABLE = ["meadow", "beach", "cave", "snowfield", "desert", "harbor"]

# (singular, plural) verb forms; the action is caption-only flavour and does
# not change the rendering.
ACTION_TABLE = [
    ("dances", "dance"),
    ("jumps", "jump"),
    ("naps", "nap"),
    ("waves", "wave"),
    ("sings", "sing"),
    ("reads", "read"),
]

PAD_ID = 0


class Vocabulary:
    """Closed vocabulary built from the caption templates. Token id 0 is padding."""

    def __init__(self, words: list[str]):
        self.id_to_word = ["<pad>"] + sorted(set(words))
        self.word_to_id = {w: i for i, w in enumerate(self.id_to_word)}

    def __len__(self) -> int:
        return len(self.id_to_word)

    def encode(self, text: str, length: int) -> np.ndarray:
        ids = [self.word_to_id[w] for w in text.split()]
        if len(ids) > length:
            raise ValidationError(f"caption longer than {length} tokens: {text!r}")
        ids = ids + [PAD_ID] * (length - len(ids))
        return np.asarray(ids, dtype=np.int64)

    def decode(self, ids) -> str:
        return " ".join(self.id_to_word[int(i)] for i in ids if int(i) != PAD_ID)

    @staticmethod
    def from_world(num_characters: int, num_scenes: int) -> "Vocabulary":
        words = ["and", "in", "the"]
        words += [name for name, _, _ in CHARACTER_TABLE[:num_characters]]
        words += SCENE_TABLE[:num_scenes]
        for singular, plural in ACTION_TABLE:
            words += [singular, plural]
        return Vocabulary(words)


@dataclass(frozen=True)
class DatasetSpec:
    """Everything needed to regenerate a dataset bit-identically."""

    num_characters: int = 8
    num_scenes: int = 4
    frames_per_story: int = 5
    image_size: int = 32
    caption_length: int = 16
    num_train: int = 512
    num_test: int = 200
    seed: int = 7

    def validate(self) -> None:
        if not (2 <= self.num_characters <= len(CHARACTER_TABLE)):
            raise ConfigurationError(
                f"num_characters must be in [2, {len(CHARACTER_TABLE)}], got {self.num_characters}"
            )
        if not (2 <= self.num_scenes <= len(SCENE_TABLE)):
            raise ConfigurationError(
                f"num_scenes must be in [2, {len(SCENE_TABLE)}], got {self.num_scenes}"
            )
        if self.frames_per_story < 2:
            raise ConfigurationError("frames_per_story must be >= 2")
        if self.image_size < 16 or self.image_size % 4 != 0:
            raise ConfigurationError("image_size must be >= 16 and divisible by 4")
        if self.caption_length < 8:
            raise ConfigurationError("caption_length must be >= 8")
        if self.num_train < 1 or self.num_test < 1:
            raise ConfigurationError("num_train and num_test must be positive")

    def vocabulary(self) -> Vocabulary:
        return Vocabulary.from_world(self.num_characters, self.num_scenes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @staticmethod
    def from_dict(d: dict) -> "DatasetSpec":
        return DatasetSpec(**d)


@dataclass
class StoryEpisode:
    """One story: f frames, f captions, exact per-frame labels."""

    frames: np.ndarray  # [f, 3, H, W] float32 in [0, 1]
    captions: list[str]
    caption_ids: np.ndarray  # [f, n_t] int64
    char_labels: list[frozenset[int]]
    scene_label: int
    episode_id: int

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    def freeze(self) -> "StoryEpisode":
        self.frames.flags.writeable = False
        self.caption_ids.flags.writeable = False
        return self


@dataclass(frozen=True)
class ClipSplit:
    """Partition of frame indices into reference (known) and generated (unknown)."""

    known_indices: tuple[int, ...]
    unknown_indices: tuple[int, ...]

    @property
    def num_known(self) -> int:
        return len(self.known_indices)

    @property
    def num_unknown(self) -> int:
        return len(self.unknown_indices)

    def validate(self, num_frames: int) -> None:
        known, unknown = set(self.known_indices), set(self.unknown_indices)
        if known & unknown:
            raise ValidationError(f"overlapping split indices: {sorted(known & unknown)}")
        union = known | unknown
        if union != set(range(num_frames)):
            raise ValidationError(
                f"split does not partition 0..{num_frames - 1}: got {sorted(union)}"
            )
        if len(self.unknown_indices) < 1:
            raise ValidationError("at least one frame must be unknown")
        if tuple(sorted(known)) != self.known_indices or tuple(sorted(unknown)) != self.unknown_indices:
            raise ValidationError("split indices must be sorted")


def make_split(num_frames: int, known: tuple[int, ...] | list[int]) -> ClipSplit:
    """Build a split from the known indices; the unknown clip is the complement."""
    known = tuple(sorted(int(i) for i in known))
    for i in known:
        if not 0 <= i < num_frames:
            raise ValidationError(f"known index {i} out of range [0, {num_frames})")
    if len(set(known)) != len(known):
        raise ValidationError("duplicate known indices")
    unknown = tuple(i for i in range(num_frames) if i not in set(known))
    split = ClipSplit(known, unknown)
    split.validate(num_frames)
    return split


def first_frame_known(num_frames: int) -> ClipSplit:
    """Default evaluation protocol: frame 0 given, rest generated."""
    return make_split(num_frames, (0,))


@dataclass(frozen=True)
class DropMask:
    """Which frames were blacked out by the drop augmentation."""

    dropped: tuple[bool, ...]

    @staticmethod
    def none(num_frames: int) -> "DropMask":
        return DropMask(tuple(False for _ in range(num_frames)))

    @property
    def count(self) -> int:
        return sum(self.dropped)


@dataclass
class Clip:
    """A subsequence of an episode (frames and captions share ordering)."""

    indices: tuple[int, ...]
    frames: np.ndarray
    captions: list[str]
    caption_ids: np.ndarray


# ----------------------------------------------------------------------------
# Rendering


def _scene_background(scene_id: int, size: int) -> np.ndarray:
    """Deterministic background per scene, uint8 [H, W, 3]."""
    h = w = size
    img = np.zeros((h, w, 3), dtype=np.uint8)
    ys = np.arange(h)[:, None]
    xs = np.arange(w)[None, :]
    if scene_id == 0:  # meadow: green with light horizontal stripes
        img[:] = (60, 140, 60)
        img[(ys % 8 < 2).repeat(w, axis=1)] = (90, 170, 80)
    elif scene_id == 1:  # beach: sky over sand
        img[:] = (210, 190, 130)
        img[: int(0.4 * h)] = (120, 180, 220)
    elif scene_id == 2:  # cave: dark with diagonal bands
        img[:] = (70, 65, 80)
        band = ((ys + xs) % 10 < 3)
        img[band] = (50, 45, 60)
    elif scene_id == 3:  # snowfield: near white with pale blue stripes
        img[:] = (225, 230, 240)
        img[(ys % 6 < 2).repeat(w, axis=1)] = (200, 215, 235)
    elif scene_id == 4:  # desert: warm with dune curves
        img[:] = (225, 185, 110)
        band = ((ys + (xs // 2)) % 9 < 2)
        img[band] = (205, 160, 90)
    else:  # harbor: blue-gray with vertical posts
        img[:] = (110, 130, 150)
        img[(xs % 9 < 2).repeat(h, axis=0)] = (80, 100, 125)
    return img


def _glyph_mask(shape: str, g: int) -> np.ndarray:
    """Boolean [g, g] footprint of a glyph shape."""
    ys, xs = np.mgrid[0:g, 0:g]
    c = (g - 1) / 2.0
    dy, dx = ys - c, xs - c
    if shape == "square":
        return np.ones((g, g), dtype=bool)
    if shape == "disc":
        return dy**2 + dx**2 <= c**2
    if shape == "triangle":
        return (np.abs(dx) * 2 <= ys) & (ys < g)
    if shape == "diamond":
        return np.abs(dy) + np.abs(dx) <= c
    if shape == "cross":
        third = g // 3
        return (np.abs(dy) <= third / 2) | (np.abs(dx) <= third / 2)
    if shape == "ring":
        r2 = dy**2 + dx**2
        return (r2 <= c**2) & (r2 >= (c * 0.35) ** 2)
    raise ConfigurationError(f"unknown glyph shape {shape!r}")


def _dilate(mask: np.ndarray) -> np.ndarray:
    out = mask.copy()
    out[1:] |= mask[:-1]
    out[:-1] |= mask[1:]
    out[:, 1:] |= mask[:, :-1]
    out[:, :-1] |= mask[:, 1:]
    return out


def _render_frame(
    scene_id: int, char_ids: tuple[int, ...], positions: list[tuple[int, int]], size: int
) -> np.ndarray:
    img = _scene_background(scene_id, size).copy()
    g = max(6, size * 10 // 32)
    for char_id, (top, left) in zip(char_ids, positions):
        _, color, shape = CHARACTER_TABLE[char_id]
        mask = _glyph_mask(shape, g)
        # dark outline keeps glyphs legible on every background
        outline = _dilate(mask) & ~mask
        cell = img[top : top + g, left : left + g]
        cell[outline] = (15, 15, 15)
        cell[mask] = color
    return img


def _frame_to_float(img_u8: np.ndarray) -> np.ndarray:
    """[H, W, 3] uint8 -> [3, H, W] float32 in [0, 1]."""
    return (img_u8.astype(np.float32) / 255.0).transpose(2, 0, 1)


def _float_to_frame(arr: np.ndarray) -> np.ndarray:
    """[3, H, W] float in [0, 1] -> [H, W, 3] uint8 (round-trip exact for /255 values)."""
    return np.clip(np.round(arr.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def _caption_for(char_ids: tuple[int, ...], action_id: int, scene_id: int) -> str:
    names = [CHARACTER_TABLE[c][0] for c in sorted(char_ids)]
    singular, plural = ACTION_TABLE[action_id]
    verb = singular if len(names) == 1 else plural
    who = " and ".join(names)
    return f"{who} {verb} in the {SCENE_TABLE[scene_id]}"


# ----------------------------------------------------------------------------
# Generation


def _episode_rng(spec: DatasetSpec, episode_id: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence((spec.seed, episode_id))))


def generate_episode(spec: DatasetSpec, episode_id: int, vocab: Vocabulary | None = None) -> StoryEpisode:
    """Render one episode. Pure function of (spec, episode_id)."""
    spec.validate()
    vocab = vocab or spec.vocabulary()
    rng = _episode_rng(spec, episode_id)
    size = spec.image_size
    f = spec.frames_per_story
    g = max(6, size * 10 // 32)

    cast = tuple(int(c) for c in rng.choice(spec.num_characters, size=2, replace=False))
    scene = int(rng.integers(spec.num_scenes))

    frames = np.zeros((f, 3, size, size), dtype=np.float32)
    captions: list[str] = []
    caption_ids = np.zeros((f, spec.caption_length), dtype=np.int64)
    char_labels: list[frozenset[int]] = []

    half = size // 2
    for i in range(f):
        n_chars = int(rng.integers(1, 3))
        if n_chars == 2:
            chars = cast
            # one glyph per half keeps characters separable for the metrics
            positions = [
                (int(rng.integers(0, size - g)), int(rng.integers(0, half - g))),
                (int(rng.integers(0, size - g)), int(rng.integers(half, size - g))),
            ]
        else:
            chars = (cast[int(rng.integers(2))],)
            positions = [(int(rng.integers(0, size - g)), int(rng.integers(0, size - g)))]
        action = int(rng.integers(len(ACTION_TABLE)))

        frames[i] = _frame_to_float(_render_frame(scene, chars, positions, size))
        caption = _caption_for(chars, action, scene)
        captions.append(caption)
        caption_ids[i] = vocab.encode(caption, spec.caption_length)
        char_labels.append(frozenset(int(c) for c in chars))

    return StoryEpisode(
        frames=frames,
        captions=captions,
        caption_ids=caption_ids,
        char_labels=char_labels,
        scene_label=scene,
        episode_id=episode_id,
    ).freeze()


def generate_dataset(spec: DatasetSpec, split: str) -> list[StoryEpisode]:
    """Generate the train or test split. Episode ids of the two splits are disjoint."""
    spec.validate()
    vocab = spec.vocabulary()
    if split == "train":
        ids = range(spec.num_train)
    elif split == "test":
        ids = range(spec.num_train, spec.num_train + spec.num_test)
    else:
        raise ConfigurationError(f"unknown split {split!r} (expected 'train' or 'test')")
    return [generate_episode(spec, i, vocab) for i in ids]


# ----------------------------------------------------------------------------
# Clip operations


def split_clip(episode: StoryEpisode, split: ClipSplit) -> tuple[Clip, Clip]:
    """Partition an episode into its known and unknown clips, order preserved."""
    split.validate(episode.num_frames)

    def take(indices: tuple[int, ...]) -> Clip:
        idx = list(indices)
        return Clip(
            indices=tuple(idx),
            frames=episode.frames[idx],
            captions=[episode.captions[i] for i in idx],
            caption_ids=episode.caption_ids[idx],
        )

    return take(split.known_indices), take(split.unknown_indices)


def apply_drop_augmentation(
    episode: StoryEpisode,
    rng: np.random.Generator,
    max_drop: int,
    eligible: tuple[int, ...] | None = None,
) -> tuple[StoryEpisode, DropMask]:
    """Replace k ~ Uniform{0..max_drop} frames with black images.

    `eligible` restricts which frames may be dropped (training drops reference
    frames only); by default every frame is eligible. Captions are untouched.
    """
    f = episode.num_frames
    if not 0 <= max_drop <= f:
        raise ValidationError(f"max_drop must be in [0, {f}], got {max_drop}")
    pool = tuple(range(f)) if eligible is None else tuple(eligible)
    k = int(rng.integers(0, max_drop + 1))
    k = min(k, len(pool))
    chosen = sorted(int(i) for i in rng.choice(len(pool), size=k, replace=False)) if k else []
    dropped = tuple(pool[j] for j in chosen)

    frames = episode.frames.copy()
    for i in dropped:
        frames[i] = 0.0
    mask = DropMask(tuple(i in dropped for i in range(f)))
    out = StoryEpisode(
        frames=frames,
        captions=list(episode.captions),
        caption_ids=episode.caption_ids.copy(),
        char_labels=list(episode.char_labels),
        scene_label=episode.scene_label,
        episode_id=episode.episode_id,
    ).freeze()
    return out, mask


def build_marker(split: ClipSplit, drop: DropMask, h_lat: int, w_lat: int) -> np.ndarray:
    """Single-channel validity marker at latent resolution, [f, 1, h, w].

    A plane is all ones only for frames that are both known and not dropped;
    unknown or dropped frames get an all-zero plane so black content is never
    mistaken for valid context.
    """
    f = len(drop.dropped)
    split.validate(f)
    marker = np.zeros((f, 1, h_lat, w_lat), dtype=np.float32)
    for i in split.known_indices:
        if not drop.dropped[i]:
            marker[i] = 1.0
    return marker


# ----------------------------------------------------------------------------
# Persistence


def save_dataset(episodes: list[StoryEpisode], spec: DatasetSpec, out_dir: Path | str, split: str) -> Path:
    """Write one directory per split: index.jsonl plus per-frame PNGs."""
    out_dir = Path(out_dir)
    split_dir = out_dir / split
    split_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "spec.json", "w") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    records = []
    for ep in episodes:
        frame_files = []
        for i in range(ep.num_frames):
            name = f"ep{ep.episode_id:05d}_f{i}.png"
            Image.fromarray(_float_to_frame(ep.frames[i])).save(split_dir / name)
            frame_files.append(name)
        records.append(
            {
                "episode_id": ep.episode_id,
                "scene": ep.scene_label,
                "char_labels": [sorted(s) for s in ep.char_labels],
                "captions": ep.captions,
                "frames": frame_files,
            }
        )
    with open(split_dir / "index.jsonl", "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    return split_dir


def load_dataset(out_dir: Path | str, split: str) -> tuple[list[StoryEpisode], DatasetSpec]:
    out_dir = Path(out_dir)
    spec_path = out_dir / "spec.json"
    if not spec_path.exists():
        raise DataError(f"missing dataset spec: {spec_path}")
    spec = DatasetSpec.from_dict(json.loads(spec_path.read_text()))
    vocab = spec.vocabulary()
    split_dir = out_dir / split
    index_path = split_dir / "index.jsonl"
    if not index_path.exists():
        raise DataError(f"missing dataset index: {index_path}")

    episodes = []
    with open(index_path) as fh:
        for line in fh:
            rec = json.loads(line)
            frames = []
            for name in rec["frames"]:
                path = split_dir / name
                if not path.exists():
                    raise DataError(f"missing frame file: {path}")
                frames.append(_frame_to_float(np.asarray(Image.open(path).convert("RGB"))))
            caption_ids = np.stack(
                [vocab.encode(c, spec.caption_length) for c in rec["captions"]]
            )
            episodes.append(
                StoryEpisode(
                    frames=np.stack(frames),
                    captions=list(rec["captions"]),
                    caption_ids=caption_ids,
                    char_labels=[frozenset(s) for s in rec["char_labels"]],
                    scene_label=int(rec["scene"]),
                    episode_id=int(rec["episode_id"]),
                ).freeze()
            )
    return episodes, spec
