import numpy as np
import pytest

from vtflow import world
from vtflow.errors import ContractError
from vtflow.infer import (InferenceConfig, canonical_tokens, evaluate, generate,
                          joint_generate, oracle_classify, parse_caption,
                          prompt_exact_match, understand)
from vtflow.model import ModelConfig, init_fresh
from vtflow.prng import SplitMix64
from vtflow.world import EOS, PAD, Scene, build_dataset, caption_of, render


SMALL = ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ffn=32, d_v=48, d_e=8,
                    d_c=16, max_prompt_len=8, max_caption_len=48, n_video_tokens=16)


@pytest.fixture(scope="module")
def model():
    return init_fresh(SMALL, SplitMix64(0))


@pytest.fixture(scope="module")
def samples():
    return build_dataset(4, 0)


def test_config_validation():
    with pytest.raises(ContractError):
        InferenceConfig(steps=0).validate()
    with pytest.raises(ContractError):
        InferenceConfig(mode="dream").validate()


def test_canonical_tokens_truncates_after_eos():
    ids = np.array([[1, 5, EOS, 9, 9], [1, 5, 6, 7, 8]])
    out = canonical_tokens(ids)
    assert out[0].tolist() == [1, 5, EOS, PAD, PAD]
    assert out[1].tolist() == [1, 5, 6, 7, 8]  # no EOS: unchanged


# ---------------------------------------------------------------------------
# oracle classifier: exact on ground-truth renders
# ---------------------------------------------------------------------------

def test_oracle_exact_on_all_renders():
    for color in world.COLORS:
        for direction in world.DIRECTIONS:
            for speed in (1, 2):
                starts = world.valid_starts(direction, speed)
                for r, c in starts[:: max(1, len(starts) // 3)]:
                    scene = Scene(color, direction, speed, r, c)
                    assert oracle_classify(render(scene)) == scene


def test_oracle_rejects_blank_and_static():
    assert oracle_classify(np.zeros((4, 8, 8, 3))) is None
    static = np.zeros((4, 8, 8, 3), dtype=np.float32)
    static[:, 3:5, 3:5, 0] = 1.0  # square that never moves -> speed 0
    assert oracle_classify(static) is None


def test_oracle_robust_to_small_noise():
    scene = Scene("blue", "down", 1, 2, 2)
    frames = render(scene) + 0.05 * SplitMix64(1).gaussian_array((4, 8, 8, 3))
    frames = np.clip(frames, 0.0, 1.0)
    assert oracle_classify(frames) == scene


# ---------------------------------------------------------------------------
# caption parser
# ---------------------------------------------------------------------------

def test_parse_caption_roundtrip():
    scene = Scene("green", "left", 2, 4, 6)
    parsed = parse_caption(caption_of(scene))
    assert parsed == {"color": "green", "direction": "left", "speed": 2,
                      "start_row": 4, "start_col": 6, "end_row": 4, "end_col": 0}


def test_parse_caption_rejects_broken_scaffold():
    ids = caption_of(Scene("red", "up", 1, 5, 5)).copy()
    ids[1] = world.VOCAB.id_of("square")  # clobber a template word
    assert parse_caption(ids) is None
    assert parse_caption(np.zeros(48, dtype=np.int64)) is None
    # out-of-vocabulary garbage
    assert parse_caption(np.full(48, 99, dtype=np.int64)) is None


def test_parse_caption_rejects_bad_slot_word():
    ids = caption_of(Scene("red", "up", 1, 5, 5)).copy()
    ids[world.CAPTION_SLOTS["color"]] = world.VOCAB.id_of("frame")
    assert parse_caption(ids) is None


# ---------------------------------------------------------------------------
# inference procedures on an untrained model: shape/determinism contracts
# ---------------------------------------------------------------------------

def test_understand_shapes_and_determinism(model, samples):
    frames = np.stack([s.frames for s in samples])
    cfg = InferenceConfig(steps=5, mode="understand", seed=1)
    a = understand(model, frames, cfg=cfg)
    b = understand(model, frames, cfg=cfg)
    assert a.shape == (4, 48)
    assert np.array_equal(a, b)
    c = understand(model, frames, cfg=InferenceConfig(steps=5, mode="understand", seed=2))
    assert a.dtype == np.int64 and c.shape == a.shape


def test_understand_batching_invariance(model, samples):
    """Per-sample noise substreams make results independent of batch grouping."""
    frames = np.stack([s.frames for s in samples])
    cfg = InferenceConfig(steps=4, mode="understand", seed=0)
    full = understand(model, frames, cfg=cfg)
    # seeds are indexed per sample within the call, so a prefix batch matches
    part = understand(model, frames[:2], cfg=cfg)
    assert np.array_equal(full[:2], part)


def test_generate_shapes_and_range(model, samples):
    prompts = np.stack([s.prompt_ids for s in samples])
    frames = generate(model, prompts, cfg=InferenceConfig(steps=5, mode="generate"))
    assert frames.shape == (4, 4, 8, 8, 3)
    assert frames.min() >= 0.0 and frames.max() <= 1.0


def test_joint_shapes_and_condition(model, samples):
    cfg = InferenceConfig(steps=4, mode="joint", seed=3)
    frames, ids = joint_generate(model, condition_ids=None, batch=3, cfg=cfg)
    assert frames.shape == (3, 4, 8, 8, 3) and ids.shape == (3, 48)
    prompts = np.stack([s.prompt_ids for s in samples])
    f2, i2 = joint_generate(model, condition_ids=prompts, cfg=cfg)
    assert f2.shape[0] == 4 and i2.shape == (4, 48)


def test_evaluate_report_structure(model, samples):
    cfg = InferenceConfig(steps=3, mode="understand")
    rep = evaluate(model, samples, "understand", cfg=cfg)
    d = rep.to_dict()
    assert d["sample_count"] == 4
    assert set(d["attribute_accuracy"]) == {"color", "direction", "speed", "start", "end"}
    assert 0.0 <= d["exact_match_rate"] <= 1.0
    # clean renders always satisfy the video-side oracle in understand mode
    assert d["video_match_rate"] == 1.0
    rep_g = evaluate(model, samples, "generate", cfg=InferenceConfig(steps=3, mode="generate"))
    assert rep_g.mode == "generate"
    rep_j = evaluate(model, samples, "joint", cfg=InferenceConfig(steps=3, mode="joint"))
    assert rep_j.sample_count == 4
    with pytest.raises(ContractError):
        evaluate(model, [], "understand", cfg=cfg)


def test_prompt_exact_match_counts(model, samples):
    cfg = InferenceConfig(steps=3, mode="understand")
    hits, n = prompt_exact_match(model, samples, cfg, condition=False)
    assert n == 4 and 0 <= hits <= 4
