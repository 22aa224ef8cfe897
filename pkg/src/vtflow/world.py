"""Bit-reproducible synthetic world: moving-square videos on an 8x8 grid,
short prompts, long deterministic captions, the fixed word vocabulary, and
the exactly invertible patchify codec standing in for a learned VAE.
"""

import json
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, FormatError, VocabularyError

GRID = 8
SQUARE = 2
FRAMES = 4
CHANNELS = 3
PATCH = 4
N_VIDEO_TOKENS = 16       # 4 frames x 4 patches
VIDEO_TOKEN_DIM = 48      # 4x4 patch x 3 channels
MAX_PROMPT_LEN = 8
MAX_CAPTION_LEN = 48

COLORS = ("red", "green", "blue")
DIRECTIONS = ("up", "down", "left", "right")
DIRECTION_VECTORS = {"up": (-1, 0), "down": (1, 0), "left": (0, -1), "right": (0, 1)}
HELD_OUT_COMBINATION = ("blue", "left")

PAD, BOS, EOS = 0, 1, 2

_WORDS = (
    "a", "the", "video", "shows", "square", "of", "size", "two", "on", "black",
    "background", "it", "starts", "at", "row", "column", "and", "moves", "by",
    "cell", "cells", "per", "frame", "over", "four", "frames", "ending",
    "red", "green", "blue", "up", "down", "left", "right",
    "zero", "one", "three", "five", "six", "seven",
)

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven")


class Vocabulary:
    """Fixed word-level vocabulary: PAD/BOS/EOS then the caption words."""

    def __init__(self):
        self.tokens = ("<pad>", "<bos>", "<eos>") + _WORDS
        self._ids = {w: i for i, w in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def id_of(self, word):
        try:
            return self._ids[word]
        except KeyError:
            raise VocabularyError(f"no vocabulary entry for {word!r}") from None

    def word_of(self, token_id):
        if not 0 <= token_id < len(self.tokens):
            raise VocabularyError(f"token id {token_id} out of range")
        return self.tokens[token_id]

    def encode(self, words, pad_to):
        ids = [BOS] + [self.id_of(w) for w in words] + [EOS]
        if len(ids) > pad_to:
            raise ContractError(f"sequence of {len(ids)} tokens exceeds budget {pad_to}")
        return np.array(ids + [PAD] * (pad_to - len(ids)), dtype=np.int64)


VOCAB = Vocabulary()


@dataclass(frozen=True)
class Scene:
    color: str
    direction: str
    speed: int
    start_row: int
    start_col: int

    def position(self, frame):
        dr, dc = DIRECTION_VECTORS[self.direction]
        return (self.start_row + frame * self.speed * dr,
                self.start_col + frame * self.speed * dc)

    def in_bounds(self):
        for k in range(FRAMES):
            r, c = self.position(k)
            if not (0 <= r <= GRID - SQUARE and 0 <= c <= GRID - SQUARE):
                return False
        return True

    def to_dict(self):
        return {"color": self.color, "direction": self.direction, "speed": self.speed,
                "start_row": self.start_row, "start_col": self.start_col}

    @staticmethod
    def from_dict(d):
        return Scene(d["color"], d["direction"], int(d["speed"]),
                     int(d["start_row"]), int(d["start_col"]))


@dataclass
class VideoSample:
    scene: Scene
    frames: np.ndarray          # (4, 8, 8, 3) float32 in {0, 1}
    prompt_ids: np.ndarray      # (8,) int64
    caption_ids: np.ndarray     # (48,) int64


def valid_starts(direction, speed):
    """All in-bounds top-left starts for a (direction, speed), row-major order."""
    starts = []
    for r in range(GRID - SQUARE + 1):
        for c in range(GRID - SQUARE + 1):
            if Scene("red", direction, speed, r, c).in_bounds():
                starts.append((r, c))
    return starts


def sample_scene(rng):
    """Draw a scene, consuming the stream in the fixed field order.

    Order: color (mod 3), direction (mod 4 over up/down/left/right),
    speed (1 + mod 2), then one draw indexing the row-major list of
    in-bounds starts for that (direction, speed).
    """
    color = COLORS[rng.randint(3)]
    direction = DIRECTIONS[rng.randint(4)]
    speed = 1 + rng.randint(2)
    starts = valid_starts(direction, speed)
    r, c = starts[rng.randint(len(starts))]
    return Scene(color, direction, speed, r, c)


def render(scene):
    """Rasterize the scene: one-hot color channel at the square's cells."""
    if not scene.in_bounds():
        raise ContractError(f"scene leaves the grid: {scene}")
    frames = np.zeros((FRAMES, GRID, GRID, CHANNELS), dtype=np.float32)
    ch = COLORS.index(scene.color)
    for k in range(FRAMES):
        r, c = scene.position(k)
        frames[k, r:r + SQUARE, c:c + SQUARE, ch] = 1.0
    return frames


def prompt_of(scene):
    """BOS a <color> square moves <direction> EOS, padded to 8."""
    return VOCAB.encode(["a", scene.color, "square", "moves", scene.direction],
                        pad_to=MAX_PROMPT_LEN)


def caption_words(scene):
    r0, c0 = scene.position(0)
    r3, c3 = scene.position(FRAMES - 1)
    cell_word = "cell" if scene.speed == 1 else "cells"
    return ["the", "video", "shows", "a", scene.color, "square", "of", "size",
            "two", "on", "a", "black", "background", "it", "starts", "at",
            "row", NUMBER_WORDS[r0], "column", NUMBER_WORDS[c0], "and",
            "moves", scene.direction, "by", NUMBER_WORDS[scene.speed],
            cell_word, "per", "frame", "over", "four", "frames", "ending",
            "at", "row", NUMBER_WORDS[r3], "column", NUMBER_WORDS[c3]]


def caption_of(scene):
    """Deterministic detailed caption, padded to 48."""
    return VOCAB.encode(caption_words(scene), pad_to=MAX_CAPTION_LEN)


# slot positions inside the padded caption (BOS at index 0)
CAPTION_SLOTS = {"color": 5, "start_row": 18, "start_col": 20, "direction": 23,
                 "speed": 25, "end_row": 35, "end_col": 37}
PROMPT_SLOTS = {"color": 2, "direction": 5}


def make_sample(scene):
    return VideoSample(scene=scene, frames=render(scene),
                       prompt_ids=prompt_of(scene), caption_ids=caption_of(scene))


def encode_video(frames):
    """Patchify each frame into four 4x4 patches -> (16, 48) latent.

    Patch order per frame is row-major: top-left, top-right, bottom-left,
    bottom-right; each patch flattens row-major, channel-last. Tokens are
    ordered frame-major. Exactly inverted by decode_video.
    """
    frames = np.asarray(frames, dtype=np.float32)
    if frames.shape[-4:] != (FRAMES, GRID, GRID, CHANNELS):
        raise DimensionError(f"expected frames (..., 4, 8, 8, 3), got {frames.shape}")
    lead = frames.shape[:-4]
    x = frames.reshape(lead + (FRAMES, 2, PATCH, 2, PATCH, CHANNELS))
    x = np.moveaxis(x, -3, -4)  # (..., 4, 2, 2, 4, 4, 3)
    return np.ascontiguousarray(x.reshape(lead + (N_VIDEO_TOKENS, VIDEO_TOKEN_DIM)))


def decode_video(latent):
    """Inverse of encode_video."""
    latent = np.asarray(latent, dtype=np.float32)
    if latent.shape[-2:] != (N_VIDEO_TOKENS, VIDEO_TOKEN_DIM):
        raise DimensionError(f"expected latent (..., 16, 48), got {latent.shape}")
    lead = latent.shape[:-2]
    x = latent.reshape(lead + (FRAMES, 2, 2, PATCH, PATCH, CHANNELS))
    x = np.moveaxis(x, -4, -3)  # (..., 4, 2, 4, 2, 4, 3)
    return np.ascontiguousarray(x.reshape(lead + (FRAMES, GRID, GRID, CHANNELS)))


SPLIT_RULES = ("all", "held-out", "held-out-only")


def build_dataset(n, seed, split="all"):
    """n samples from sequential scene draws under the given split rule.

    "held-out" rejects every (blue, left) scene (the training side of the
    held-out-combination split); "held-out-only" keeps only those scenes;
    "all" keeps everything.
    """
    from .prng import SplitMix64
    if n < 1:
        raise ContractError(f"dataset size must be >= 1, got {n}")
    if split not in SPLIT_RULES:
        raise ContractError(f"unknown split rule {split!r}; expected one of {SPLIT_RULES}")
    rng = SplitMix64(seed)
    samples = []
    while len(samples) < n:
        scene = sample_scene(rng)
        held = (scene.color, scene.direction) == HELD_OUT_COMBINATION
        if split == "held-out" and held:
            continue
        if split == "held-out-only" and not held:
            continue
        samples.append(make_sample(scene))
    return samples


# ---------------------------------------------------------------------------
# dataset files
# ---------------------------------------------------------------------------

DATASET_MAGIC = b"UVGUDATA"
DATASET_VERSION = 1
_FRAME_BYTES = FRAMES * GRID * GRID * CHANNELS


def save_dataset_jsonl(path, samples):
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            rec = {"scene": s.scene.to_dict(),
                   "prompt_ids": s.prompt_ids.tolist(),
                   "caption_ids": s.caption_ids.tolist(),
                   "frames": s.frames.astype(np.int64).reshape(-1).tolist()}
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def load_dataset_jsonl(path):
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh):
            try:
                rec = json.loads(line)
                scene = Scene.from_dict(rec["scene"])
                frames = np.array(rec["frames"], dtype=np.float32).reshape(
                    FRAMES, GRID, GRID, CHANNELS)
                samples.append(VideoSample(
                    scene=scene, frames=frames,
                    prompt_ids=np.array(rec["prompt_ids"], dtype=np.int64),
                    caption_ids=np.array(rec["caption_ids"], dtype=np.int64)))
            except (KeyError, ValueError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}:{line_no + 1}: bad dataset record: {exc}") from exc
    return samples


def save_dataset_binary(path, samples):
    """Fixed-size binary records after an 8-byte magic + version/count header."""
    with open(path, "wb") as fh:
        fh.write(DATASET_MAGIC)
        fh.write(struct.pack("<II", DATASET_VERSION, len(samples)))
        for s in samples:
            fh.write(struct.pack("<5B", COLORS.index(s.scene.color),
                                 DIRECTIONS.index(s.scene.direction),
                                 s.scene.speed, s.scene.start_row, s.scene.start_col))
            fh.write(s.prompt_ids.astype(np.uint8).tobytes())
            fh.write(s.caption_ids.astype(np.uint8).tobytes())
            fh.write(s.frames.astype(np.uint8).tobytes())


def load_dataset_binary(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != DATASET_MAGIC:
        raise FormatError(f"{path}: bad dataset magic")
    version, count = struct.unpack_from("<II", blob, 8)
    if version != DATASET_VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    rec_size = 5 + MAX_PROMPT_LEN + MAX_CAPTION_LEN + _FRAME_BYTES
    if len(blob) != 16 + count * rec_size:
        raise FormatError(f"{path}: truncated dataset file")
    samples = []
    off = 16
    for _ in range(count):
        color_i, dir_i, speed, r, c = struct.unpack_from("<5B", blob, off)
        off += 5
        prompt = np.frombuffer(blob, dtype=np.uint8, count=MAX_PROMPT_LEN, offset=off).astype(np.int64)
        off += MAX_PROMPT_LEN
        caption = np.frombuffer(blob, dtype=np.uint8, count=MAX_CAPTION_LEN, offset=off).astype(np.int64)
        off += MAX_CAPTION_LEN
        frames = np.frombuffer(blob, dtype=np.uint8, count=_FRAME_BYTES, offset=off).astype(
            np.float32).reshape(FRAMES, GRID, GRID, CHANNELS)
        off += _FRAME_BYTES
        scene = Scene(COLORS[color_i], DIRECTIONS[dir_i], int(speed), int(r), int(c))
        samples.append(VideoSample(scene=scene, frames=frames,
                                   prompt_ids=prompt, caption_ids=caption))
    return samples
