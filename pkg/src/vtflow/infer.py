"""The three inference procedures (understanding, generation, joint
co-denoising) plus the oracle scene classifier, caption parser, and the
attribute-accuracy evaluator.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ContractError, IntegrationError, NumericError
from .flow import FlowState, decode_tokens
from .model import forward
from .prng import SplitMix64, splitmix64
from .tensor import Tensor
from .world import (CAPTION_SLOTS, COLORS, DIRECTIONS, EOS, MAX_CAPTION_LEN, NUMBER_WORDS,
                    PAD, VOCAB, Scene, caption_of, decode_video, encode_video)


@dataclass
class InferenceConfig:
    steps: int = 50
    mode: str = "understand"
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ContractError(f"steps must be >= 1, got {self.steps}")
        if self.mode not in ("understand", "generate", "joint"):
            raise ContractError(f"unknown inference mode {self.mode!r}")
        return self

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class EvalReport:
    mode: str
    exact_match_rate: float
    attribute_accuracy: dict
    video_match_rate: float
    sample_count: int

    def to_dict(self):
        return {"mode": self.mode, "exact_match_rate": self.exact_match_rate,
                "attribute_accuracy": dict(self.attribute_accuracy),
                "video_match_rate": self.video_match_rate,
                "sample_count": self.sample_count}


def _per_sample_noise(seed, shape, dtype):
    """Stack per-sample gaussian blocks, each from its own seeded substream.

    Sample i draws from SplitMix64(splitmix64(seed + i)), so results do not
    depend on how samples are grouped into batches.
    """
    batch = shape[0]
    out = np.empty(shape, dtype=dtype)
    for i in range(batch):
        out[i] = SplitMix64(splitmix64(seed + i)).gaussian_array(shape[1:], dtype=dtype)
    return out


def _check_velocity(arr, step):
    if not np.all(np.isfinite(arr)):
        raise IntegrationError(f"non-finite velocity at inference step {step}", step=step)


def canonical_tokens(ids):
    """Replace everything after the first EOS with PAD, per row."""
    ids = np.asarray(ids)
    out = ids.copy()
    for row in out.reshape(-1, out.shape[-1]):
        eos = np.nonzero(row == EOS)[0]
        if eos.size:
            row[eos[0] + 1:] = PAD
    return out


def understand(model, frames, condition_ids=None, cfg=None, text_len=None,
               step_trace=None):
    """Decode text from clean video: tau_v is pinned at 1, the text flow is
    Euler-integrated from noise, and the final latent is argmax-decoded.

    frames: (B, 4, 8, 8, 3). condition_ids None runs with the null
    condition. Returns (B, text_len) token ids.
    """
    cfg = (cfg or InferenceConfig(mode="understand")).validate()
    c = model.config
    if text_len is None:
        text_len = c.max_caption_len
    z_v = np.asarray(encode_video(frames), dtype=model.dtype)
    batch = z_v.shape[0]
    z_t = _per_sample_noise(cfg.seed, (batch, text_len, c.d_e), model.dtype)
    mask_all = np.ones((batch, text_len), dtype=bool)
    tau_v = np.ones(batch)
    dt = 1.0 / cfg.steps
    z_v_t = Tensor(z_v)
    with T.no_grad():
        for k in range(cfg.steps):
            tau = k * dt
            state = FlowState(z_v_tau=z_v_t, z_t_tau=Tensor(z_t), tau_v=tau_v,
                              tau_t=np.full(batch, tau), text_mask=mask_all)
            try:
                pair, _ = forward(model, state, condition_ids=condition_ids)
            except NumericError as exc:
                raise IntegrationError(f"non-finite forward at inference step {k}: {exc}",
                                       step=k) from exc
            v = pair.v_t.data
            _check_velocity(v, k)
            z_t = z_t + model.dtype.type(dt) * v
            if step_trace is not None:
                step_trace.append((k, z_v_t.data.tobytes(), z_t.tobytes()))
    return decode_tokens(z_t, model.embedding_table, mask_all)


def generate(model, prompt_ids, cfg=None, step_trace=None):
    """Generate video from a prompt: tau_t pinned at 1 on the embedded
    prompt, video flow integrated from noise, decoded and clamped to [0, 1].
    """
    cfg = (cfg or InferenceConfig(mode="generate")).validate()
    c = model.config
    prompt_ids = np.asarray(prompt_ids)
    batch = prompt_ids.shape[0]
    with T.no_grad():
        z_t1 = T.gather_rows(model.params["embed.E"], prompt_ids).data
    text_mask = prompt_ids != PAD
    z_v = _per_sample_noise(cfg.seed, (batch, c.n_video_tokens, c.d_v), model.dtype)
    tau_t = np.ones(batch)
    dt = 1.0 / cfg.steps
    with T.no_grad():
        for k in range(cfg.steps):
            tau = k * dt
            state = FlowState(z_v_tau=Tensor(z_v), z_t_tau=Tensor(z_t1),
                              tau_v=np.full(batch, tau), tau_t=tau_t,
                              text_mask=text_mask)
            try:
                pair, _ = forward(model, state, condition_ids=prompt_ids)
            except NumericError as exc:
                raise IntegrationError(f"non-finite forward at inference step {k}: {exc}",
                                       step=k) from exc
            v = pair.v_v.data
            _check_velocity(v, k)
            z_v = z_v + model.dtype.type(dt) * v
            if step_trace is not None:
                step_trace.append((k, z_t1.tobytes(), z_v.tobytes()))
    return np.clip(decode_video(z_v), 0.0, 1.0)


def joint_generate(model, condition_ids=None, batch=1, cfg=None, text_len=None,
                   decouple_streams=False):
    """Co-denoise both modalities from noise with a single shared clock.

    Returns (frames, token ids). condition_ids None uses the null vector.
    """
    cfg = (cfg or InferenceConfig(mode="joint")).validate()
    c = model.config
    if condition_ids is not None:
        condition_ids = np.asarray(condition_ids)
        batch = condition_ids.shape[0]
    if text_len is None:
        text_len = c.max_caption_len
    z_v = _per_sample_noise(cfg.seed, (batch, c.n_video_tokens, c.d_v), model.dtype)
    z_t = _per_sample_noise(cfg.seed + (1 << 20), (batch, text_len, c.d_e), model.dtype)
    mask_all = np.ones((batch, text_len), dtype=bool)
    dt = 1.0 / cfg.steps
    with T.no_grad():
        for k in range(cfg.steps):
            tau = np.full(batch, k * dt)
            state = FlowState(z_v_tau=Tensor(z_v), z_t_tau=Tensor(z_t),
                              tau_v=tau, tau_t=tau, text_mask=mask_all)
            try:
                pair, _ = forward(model, state, condition_ids=condition_ids,
                                  decouple_streams=decouple_streams)
            except NumericError as exc:
                raise IntegrationError(f"non-finite forward at inference step {k}: {exc}",
                                       step=k) from exc
            v_v, v_t = pair.v_v.data, pair.v_t.data
            _check_velocity(v_v, k)
            _check_velocity(v_t, k)
            z_v = z_v + model.dtype.type(dt) * v_v
            z_t = z_t + model.dtype.type(dt) * v_t
    frames = np.clip(decode_video(z_v), 0.0, 1.0)
    ids = decode_tokens(z_t, model.embedding_table, mask_all)
    return frames, ids


# ---------------------------------------------------------------------------
# oracle classifier and caption parser
# ---------------------------------------------------------------------------

def oracle_classify(frames):
    """Recover (color, direction, speed, start) from rendered frames.

    Exact on ground-truth renders; centroid-displacement fit on generated
    frames. Returns a Scene, or None when no coherent moving square is
    present (a frame without mass in the dominant channel, a displacement
    that rounds to an invalid speed, or an out-of-bounds fit).
    """
    frames = np.asarray(frames, dtype=np.float64)
    sums = frames.sum(axis=(0, 1, 2))
    if sums.max() <= 0:
        return None
    ch = int(sums.argmax())
    centroids = []
    for k in range(frames.shape[0]):
        plane = frames[k, :, :, ch]
        mass = plane.sum()
        if mass <= 0:
            return None
        rows = (plane.sum(axis=1) * np.arange(8)).sum() / mass
        cols = (plane.sum(axis=0) * np.arange(8)).sum() / mass
        centroids.append((rows, cols))
    start = (int(round(centroids[0][0] - 0.5)), int(round(centroids[0][1] - 0.5)))
    dr = centroids[3][0] - centroids[0][0]
    dc = centroids[3][1] - centroids[0][1]
    if abs(dr) >= abs(dc):
        direction = "up" if dr < 0 else "down"
        disp = abs(dr)
    else:
        direction = "left" if dc < 0 else "right"
        disp = abs(dc)
    speed = int(round(disp / 3.0))
    if speed not in (1, 2):
        return None
    scene = Scene(COLORS[ch], direction, speed, start[0], start[1])
    return scene if scene.in_bounds() else None


_WORD_TO_NUMBER = {w: i for i, w in enumerate(NUMBER_WORDS)}


def parse_caption(ids):
    """Match decoded tokens against the fixed caption template.

    Returns an attribute dict (color, direction, speed, start_row,
    start_col, end_row, end_col) or None when the scaffold does not match.
    """
    ids = np.asarray(ids).reshape(-1)
    try:
        words = [VOCAB.word_of(int(i)) for i in ids]
    except Exception:
        return None
    template = caption_of(Scene("red", "right", 1, 3, 3))
    # the word after the speed slot ("cell"/"cells") co-varies with speed
    unit_pos = CAPTION_SLOTS["speed"] + 1
    slots = set(CAPTION_SLOTS.values()) | {unit_pos}
    length = 39  # BOS + 37 template words + EOS
    if len(words) < length:
        return None
    for pos in range(length):
        if pos in slots:
            continue
        if int(ids[pos]) != int(template[pos]):
            return None
    out = {}
    color = words[CAPTION_SLOTS["color"]]
    direction = words[CAPTION_SLOTS["direction"]]
    if color not in COLORS or direction not in DIRECTIONS:
        return None
    out["color"] = color
    out["direction"] = direction
    for key in ("start_row", "start_col", "end_row", "end_col", "speed"):
        word = words[CAPTION_SLOTS[key]]
        if word not in _WORD_TO_NUMBER:
            return None
        out[key] = _WORD_TO_NUMBER[word]
    if words[unit_pos] != ("cell" if out["speed"] == 1 else "cells"):
        return None
    return out


_ATTRS = ("color", "direction", "speed", "start", "end")


def _score_attrs(parsed, scene):
    """Per-attribute booleans of a parsed caption against the true scene."""
    if parsed is None:
        return {a: False for a in _ATTRS}
    r3, c3 = scene.position(3)
    return {"color": parsed["color"] == scene.color,
            "direction": parsed["direction"] == scene.direction,
            "speed": parsed["speed"] == scene.speed,
            "start": (parsed["start_row"], parsed["start_col"]) == (scene.start_row, scene.start_col),
            "end": (parsed["end_row"], parsed["end_col"]) == (r3, c3)}


def evaluate(model, samples, mode, cfg=None, batch_size=64, condition=True):
    """Attribute-accuracy evaluation over a dataset.

    understand: decode captions from clean video (condition = prompt when
    `condition`), score each attribute against the scene; exact_match_rate
    is full-caption match. generate: oracle-classify generated frames
    against the prompt scene; video_match_rate scores (color, direction).
    joint: video_match_rate is caption-vs-frames internal consistency on
    (color, direction), with the caption attributes read from their fixed
    template slots; `condition` selects the conditioned or null joint
    process (both are supported inference modes).
    """
    cfg = (cfg or InferenceConfig(mode=mode)).validate()
    if not samples:
        raise ContractError("evaluate needs a nonempty dataset")
    attr_hits = {a: 0 for a in _ATTRS}
    exact = 0
    video_hits = 0
    n = len(samples)
    for lo in range(0, n, batch_size):
        chunk = samples[lo:lo + batch_size]
        sub = InferenceConfig(steps=cfg.steps, mode=cfg.mode, seed=cfg.seed + lo)
        if mode == "understand":
            frames = np.stack([s.frames for s in chunk])
            cond = np.stack([s.prompt_ids for s in chunk]) if condition else None
            ids = understand(model, frames, condition_ids=cond, cfg=sub,
                             text_len=MAX_CAPTION_LEN)
            ids = canonical_tokens(ids)
            for i, s in enumerate(chunk):
                parsed = parse_caption(ids[i])
                for a, hit in _score_attrs(parsed, s.scene).items():
                    attr_hits[a] += hit
                if np.array_equal(ids[i], s.caption_ids):
                    exact += 1
                got = oracle_classify(s.frames)
                video_hits += got is not None and (got.color, got.direction) == (
                    s.scene.color, s.scene.direction)
        elif mode == "generate":
            prompts = np.stack([s.prompt_ids for s in chunk])
            frames = generate(model, prompts, cfg=sub)
            for i, s in enumerate(chunk):
                got = oracle_classify(frames[i])
                scored = _score_attrs(None, s.scene)
                if got is not None:
                    scored = {"color": got.color == s.scene.color,
                              "direction": got.direction == s.scene.direction,
                              "speed": got.speed == s.scene.speed,
                              "start": (got.start_row, got.start_col) == (
                                  s.scene.start_row, s.scene.start_col),
                              "end": got.position(3) == s.scene.position(3)}
                for a, hit in scored.items():
                    attr_hits[a] += hit
                ok = scored["color"] and scored["direction"]
                video_hits += ok
                exact += all(scored.values())
        elif mode == "joint":
            cond = np.stack([s.prompt_ids for s in chunk]) if condition else None
            frames, ids = joint_generate(model, condition_ids=cond, batch=len(chunk),
                                         cfg=sub)
            ids = canonical_tokens(ids)
            for i in range(len(chunk)):
                parsed = parse_caption(ids[i])
                got = oracle_classify(frames[i])
                cap_color, cap_direction = caption_slot_attrs(ids[i])
                consistent = (got is not None
                              and cap_color == got.color
                              and cap_direction == got.direction)
                video_hits += consistent
                if parsed is not None and got is not None:
                    for a, hit in _score_attrs(parsed, got).items():
                        attr_hits[a] += hit
                exact += (parsed is not None and got is not None
                          and all(_score_attrs(parsed, got).values()))
        else:
            raise ContractError(f"unknown evaluation mode {mode!r}")
    return EvalReport(mode=mode,
                      exact_match_rate=exact / n,
                      attribute_accuracy={a: attr_hits[a] / n for a in _ATTRS},
                      video_match_rate=video_hits / n,
                      sample_count=n)


def caption_slot_attrs(ids):
    """(color, direction) read straight from their fixed caption slots.

    Attribute-level scoring: a corrupted number slot elsewhere in the
    caption does not void the color/direction attributes the way the strict
    full-template parse does. Returns (None, None) when a slot does not
    hold a valid color/direction word.
    """
    ids = np.asarray(ids).reshape(-1)
    try:
        color = VOCAB.word_of(int(ids[CAPTION_SLOTS["color"]]))
        direction = VOCAB.word_of(int(ids[CAPTION_SLOTS["direction"]]))
    except Exception:
        return None, None
    return (color if color in COLORS else None,
            direction if direction in DIRECTIONS else None)


def caption_color_direction_accuracy(model, samples, cfg=None, batch_size=64,
                                     condition=True):
    """Fraction of samples whose decoded caption gets color AND direction right."""
    cfg = (cfg or InferenceConfig(mode="understand")).validate()
    hits = 0
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo:lo + batch_size]
        sub = InferenceConfig(steps=cfg.steps, mode=cfg.mode, seed=cfg.seed + lo)
        frames = np.stack([s.frames for s in chunk])
        cond = np.stack([s.prompt_ids for s in chunk]) if condition else None
        ids = canonical_tokens(understand(model, frames, condition_ids=cond, cfg=sub))
        for i, s in enumerate(chunk):
            color, direction = caption_slot_attrs(ids[i])
            hits += color == s.scene.color and direction == s.scene.direction
    return hits / len(samples)


def prompt_exact_match(model, samples, cfg=None, condition=False):
    """Stage-1 recall metric: decoded tokens vs the sample's prompt.

    Runs understand() at prompt length, conditioning on the prompt itself
    when `condition` is True (null condition otherwise), and counts
    canonicalized exact matches.
    """
    frames = np.stack([s.frames for s in samples])
    prompts = np.stack([s.prompt_ids for s in samples])
    ids = understand(model, frames, condition_ids=prompts if condition else None,
                     cfg=cfg, text_len=prompts.shape[1])
    ids = canonical_tokens(ids)
    hits = int((ids == prompts).all(axis=1).sum())
    return hits, len(samples)
