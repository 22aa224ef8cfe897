"""Acceptance criteria A1-A9.

Each test prints one `Ax ... PASS`/`FAIL` line. The training-based criteria
(A5-A8) run the real staged pipeline and take minutes; checkpoints are cached
per session so the ablation (A6) and the inference criteria (A8) reuse the
models trained for A5/A7 instead of retraining.
"""

import os
import time

import numpy as np
import pytest

from vtflow import tensor as T
from vtflow import world
from vtflow.acceptance_checks import run_gradcheck_suite
from vtflow.flow import (FlowState, VelocityPair, euler_integrate, interpolate,
                         lambda_text, unified_loss, velocity_target)
from vtflow.infer import (InferenceConfig, caption_color_direction_accuracy,
                          evaluate, prompt_exact_match)
from vtflow.model import (ModelConfig, forward, forward_video_only, init_fresh,
                          init_from_video_checkpoint, load_model, save_model)
from vtflow.prng import SplitMix64
from vtflow.tensor import Tensor
from vtflow.train import TrainConfig, train_stage

SEEDS = (0, 1, 2)

# Stage-1 recall recipe (A5/A6). The stage structure (2000 stage-0 steps,
# <= 5000 stage-1 steps, p = 0.7) is fixed by the criterion; learning rate,
# batch size, and the stage-1 video-loss weight are free and tuned for the
# 16-sample overfit run. Decoding uses a small Euler step count: the
# one/two-step x1-prediction is markedly more accurate than a long
# trajectory, which drifts off the training interpolant manifold.
A5_STAGE0_STEPS = 2000
A5_STAGE1_STEPS = 5000
A5_LR = 1e-3
A5_BATCH = 32
A5_LAMBDA_V = 0.1
A5_INFER_STEPS = 2

# Stage-2 refinement recipe (A7) on the 1024-sample held-out split.
A7_STAGE1_STEPS = 3000
A7_STAGE2_STEPS = 10000
A7_S1_LR = 1e-3
A7_S2_LR = 5e-4
A7_BATCH = 32
A7_INFER_STEPS = 2

# Generation pipeline (A8): a dedicated run on a 64-sample dataset (the
# criterion's "64 training prompts"). Generating a modality from noise needs
# the positional tables to dominate the input signal at low tau, hence the
# scaled positional init; Stage 0 learns conditioned video generation, a
# Stage 2 pass adds captioning for the joint mode.
A8_DATASET = 64
A8_POS_SCALE = 50.0
A8_S0_STEPS = 25000
A8_S2_STEPS = 7500
A8_LR = 5e-4
A8_BATCH = 32
A8_INFER_STEPS = 8

_cache = {}


def _line(name, ok, detail=""):
    tag = "PASS" if ok else "FAIL"
    print(f"\n{name} ... {tag}" + (f"  ({detail})" if detail else ""))
    return ok


# ---------------------------------------------------------------------------
# A1 - gradient correctness
# ---------------------------------------------------------------------------

def test_a1_gradient_correctness():
    t0 = time.perf_counter()
    results = run_gradcheck_suite(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(err for _, err in results)
    ok = worst <= 1e-4 and elapsed < 60.0
    assert _line("A1 gradient correctness", ok,
                 f"max rel err {worst:.2e} over {len(results)} checks, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# A2 - flow-path invariants
# ---------------------------------------------------------------------------

def test_a2_flow_invariants():
    t0 = time.perf_counter()
    rng = SplitMix64(2)
    ok = True
    for _ in range(100):
        z0 = Tensor(rng.gaussian_array((3, 5), dtype=np.float64))
        z1 = Tensor(rng.gaussian_array((3, 5), dtype=np.float64))
        tau = rng.uniforms(1)[0]
        ok &= np.array_equal(interpolate(z0, z1, 0.0).data, z0.data)
        ok &= np.array_equal(interpolate(z0, z1, 1.0).data, z1.data)
        z_tau = interpolate(z0, z1, tau).data
        u = velocity_target(z0, z1).data
        ok &= np.max(np.abs(z_tau + (1.0 - tau) * u - z1.data)) <= 1e-6
    z0 = rng.gaussian_array((4, 6), dtype=np.float64)
    z1 = rng.gaussian_array((4, 6), dtype=np.float64)
    const = z1 - z0
    for steps in (1, 4, 50):
        out = euler_integrate(z0, lambda z, tau: const, steps)
        ok &= np.max(np.abs(out - z1)) <= 1e-6
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 5.0
    assert _line("A2 flow-path invariants", ok, f"{elapsed:.2f}s")


# ---------------------------------------------------------------------------
# A3 - loss weighting
# ---------------------------------------------------------------------------

def test_a3_loss_weighting():
    lam = lambda_text(30000, 256)
    ok = lam == 117.1875
    # uniform residual eps on every entry: each modality's total weighted
    # contribution to the loss is identical (lambda_t = |z_v|/|z_t| exactly
    # cancels the token-count asymmetry of the per-token means)
    rng = SplitMix64(3)
    n_v, n_t, d_v, d_e = 16, 7, 48, 32
    eps = 0.37
    base_v = rng.gaussian_array((2, n_v, d_v), dtype=np.float64)
    base_t = rng.gaussian_array((2, n_t, d_e), dtype=np.float64)
    pred = VelocityPair(v_v=Tensor(base_v + eps), v_t=Tensor(base_t + eps))
    target = VelocityPair(v_v=Tensor(base_v), v_t=Tensor(base_t))
    mask = np.ones((2, n_t), dtype=bool)
    lam_t = lambda_text(n_v, n_t)
    loss_v = T.masked_mse(pred.v_v, target.v_v).item()          # eps^2
    loss_t = T.masked_mse(pred.v_t, target.v_t).item()          # eps^2
    contrib_v = 1.0 * loss_v * n_v
    contrib_t = lam_t * loss_t * n_t
    ok &= abs(contrib_v - contrib_t) <= 1e-6 * max(contrib_v, 1.0)
    total = unified_loss(pred, target, mask, 1.0, lam_t).item()
    ok &= abs(total - (loss_v + lam_t * loss_t)) <= 1e-9
    assert _line("A3 loss weighting", ok,
                 f"lambda 30000/256 = {lam}, contributions {contrib_v:.6f} vs {contrib_t:.6f}")


# ---------------------------------------------------------------------------
# A4 - routing and sharing
# ---------------------------------------------------------------------------

def test_a4_routing_and_sharing():
    cfg = ModelConfig(d_model=16, n_heads=2, n_layers=2, d_ffn=24, d_v=6, d_e=5,
                      d_c=12, vocab_size=11, max_prompt_len=4, max_caption_len=6,
                      n_video_tokens=4)
    rng = SplitMix64(4)
    model = init_fresh(cfg, SplitMix64(7))
    ok = True

    # (1) zero cross-modality expert firings over a traced epoch
    cross = v_fire = t_fire = 0
    for _ in range(10):
        state = FlowState(
            z_v_tau=Tensor(rng.gaussian_array((2, 4, 6), dtype=np.float32)),
            z_t_tau=Tensor(rng.gaussian_array((2, 3, 5), dtype=np.float32)),
            tau_v=rng.uniforms(2), tau_t=rng.uniforms(2),
            text_mask=np.ones((2, 3), dtype=bool))
        _, tr = forward(model, state, trace=True)
        cross += tr.cross_modal_firings
        v_fire += tr.ffn_v_firings
        t_fire += tr.ffn_t_firings
    ok &= cross == 0 and v_fire > 0 and t_fire > 0

    # (2) attention is shared: a text-only update changes a video-only forward
    # (the output heads are zero-initialized, so give them a nonzero readout
    # first or every velocity is identically zero)
    for head in ("video_out.w", "text_out.w"):
        model.params[head].data += 0.05 * rng.gaussian_array(
            model.params[head].data.shape, dtype=np.float32)
    z_v = rng.gaussian_array((1, 4, 6), dtype=np.float32)
    tau = rng.uniforms(1)
    before, _ = forward_video_only(model, Tensor(z_v), tau)
    before = before.data.copy()
    model.zero_grads()
    state = FlowState(
        z_v_tau=Tensor(rng.gaussian_array((1, 4, 6), dtype=np.float32)),
        z_t_tau=Tensor(rng.gaussian_array((1, 3, 5), dtype=np.float32),
                       requires_grad=False),
        tau_v=rng.uniforms(1), tau_t=rng.uniforms(1),
        text_mask=np.ones((1, 3), dtype=bool))
    pred, _ = forward(model, state)
    T.backward(T.masked_mse(pred.v_t, Tensor(np.ones_like(pred.v_t.data))))
    attn = "blocks.0.attn.wq"
    g = model.params[attn].grad
    # step along the text-loss gradient direction with a fixed magnitude so
    # the float32 update is visible regardless of the raw gradient scale
    model.params[attn].data -= (0.1 / np.linalg.norm(g)) * g
    after, _ = forward_video_only(model, Tensor(z_v), tau)
    delta = float(np.linalg.norm(after.data - before))
    ok &= delta > 0.0

    # (3) asymmetric init preserves the donor's video-only forward bit-exactly
    donor = init_fresh(cfg, SplitMix64(11))
    donor.params["video_out.w"].data += 0.05 * rng.gaussian_array(
        donor.params["video_out.w"].data.shape, dtype=np.float32)
    ref, _ = forward_video_only(donor, Tensor(z_v), tau)
    grafted = init_from_video_checkpoint(cfg, donor.state_arrays(), SplitMix64(99))
    got, _ = forward_video_only(grafted, Tensor(z_v), tau)
    ok &= got.data.tobytes() == ref.data.tobytes()

    assert _line("A4 routing and sharing", ok,
                 f"cross firings 0, attn delta {delta:.2e}, graft bit-exact")


# ---------------------------------------------------------------------------
# A5/A6 - knowledge recall and the shortcut ablation
# ---------------------------------------------------------------------------

def _stage0_model(seed, samples):
    key = ("s0", seed)
    if key not in _cache:
        model = init_fresh(ModelConfig(), SplitMix64(seed))
        train_stage(model, samples,
                    TrainConfig.for_stage(0, steps=A5_STAGE0_STEPS, seed=seed))
        _cache[key] = model
    return _cache[key]


def _recall_model(seed, samples, p):
    key = ("s1", seed, p)
    if key not in _cache:
        donor = _stage0_model(seed, samples)
        model = init_from_video_checkpoint(ModelConfig(), donor.state_arrays(),
                                           SplitMix64(seed))
        train_stage(model, samples,
                    TrainConfig.for_stage(1, steps=A5_STAGE1_STEPS, lr=A5_LR,
                                          batch_size=A5_BATCH, seed=seed,
                                          lambda_v=A5_LAMBDA_V,
                                          condition_dropout_p=p))
        _cache[key] = model
    return _cache[key]


def test_a5_knowledge_recall():
    results = []
    passes = 0
    for seed in SEEDS:
        samples = world.build_dataset(16, seed)
        t0 = time.perf_counter()
        model = _recall_model(seed, samples, 0.7)
        elapsed = time.perf_counter() - t0
        hits, n = prompt_exact_match(model, samples,
                                     InferenceConfig(mode="understand", seed=seed,
                                                     steps=A5_INFER_STEPS),
                                     condition=False)
        good = hits >= 14 and elapsed < 600.0
        passes += good
        results.append(f"seed {seed}: {hits}/{n} in {elapsed:.0f}s")
        if passes >= 2:
            break
    ok = passes >= 2
    assert _line("A5 knowledge recall", ok, "; ".join(results))


def test_a6_shortcut_ablation():
    seed = SEEDS[0]
    samples = world.build_dataset(16, seed)
    icfg = InferenceConfig(mode="understand", seed=seed, steps=A5_INFER_STEPS)
    with_dropout = prompt_exact_match(_recall_model(seed, samples, 0.7),
                                      samples, icfg, condition=False)[0]
    without = prompt_exact_match(_recall_model(seed, samples, 0.0),
                                 samples, icfg, condition=False)[0]
    ok = without < with_dropout
    assert _line("A6 shortcut ablation", ok,
                 f"p=0.0 null-match {without}/16 < p=0.7 null-match {with_dropout}/16")


# ---------------------------------------------------------------------------
# A7/A8 - capability refinement, generation, joint consistency
# ---------------------------------------------------------------------------

def _refined_model(seed):
    key = ("s2", seed)
    if key not in _cache:
        train = world.build_dataset(1024, seed, split="held-out")
        donor = init_fresh(ModelConfig(), SplitMix64(seed))
        train_stage(donor, train,
                    TrainConfig.for_stage(0, steps=A5_STAGE0_STEPS, seed=seed))
        model = init_from_video_checkpoint(ModelConfig(), donor.state_arrays(),
                                           SplitMix64(seed))
        train_stage(model, train,
                    TrainConfig.for_stage(1, steps=A7_STAGE1_STEPS, lr=A7_S1_LR,
                                          batch_size=A7_BATCH, seed=seed,
                                          lambda_v=A5_LAMBDA_V))
        train_stage(model, train,
                    TrainConfig.for_stage(2, steps=A7_STAGE2_STEPS, lr=A7_S2_LR,
                                          batch_size=A7_BATCH, seed=seed))
        _cache[key] = (model, train)
    return _cache[key]


def test_a7_capability_refinement():
    results = []
    passes = 0
    for seed in SEEDS:
        t0 = time.perf_counter()
        model, train = _refined_model(seed)
        elapsed = time.perf_counter() - t0
        icfg = InferenceConfig(mode="understand", seed=seed, steps=A7_INFER_STEPS)
        held_in = caption_color_direction_accuracy(model, train[:256], icfg)
        held_out = caption_color_direction_accuracy(
            model, world.build_dataset(64, seed + 1000, split="held-out-only"), icfg)
        good = held_in >= 0.90 and held_out >= 0.70 and elapsed < 3600.0
        passes += good
        results.append(f"seed {seed}: held-in {held_in:.3f} held-out {held_out:.3f} "
                       f"in {elapsed:.0f}s")
        if passes >= 2:
            break
    ok = passes >= 2
    assert _line("A7 capability refinement", ok, "; ".join(results))


def _generation_model(seed):
    key = ("a8", seed)
    if key not in _cache:
        train = world.build_dataset(A8_DATASET, seed, split="held-out")
        model = init_fresh(ModelConfig(pos_init_scale=A8_POS_SCALE), SplitMix64(seed))
        train_stage(model, train,
                    TrainConfig.for_stage(0, steps=A8_S0_STEPS, lr=A8_LR,
                                          batch_size=A8_BATCH, seed=seed))
        train_stage(model, train,
                    TrainConfig.for_stage(2, steps=A8_S2_STEPS, lr=A8_LR,
                                          batch_size=A8_BATCH, seed=seed))
        _cache[key] = (model, train)
    return _cache[key]


def test_a8_generation_and_joint():
    seed = SEEDS[0]
    model, train = _generation_model(seed)
    gen = evaluate(model, train[:64], "generate",
                   InferenceConfig(mode="generate", seed=seed, steps=A8_INFER_STEPS))
    joint = evaluate(model, train[:64], "joint",
                     InferenceConfig(mode="joint", seed=seed, steps=A8_INFER_STEPS))
    ok = gen.video_match_rate >= 0.80 and joint.video_match_rate >= 0.60
    assert _line("A8 generation and joint", ok,
                 f"generate match {gen.video_match_rate:.3f}, "
                 f"joint consistency {joint.video_match_rate:.3f}")


# ---------------------------------------------------------------------------
# A9 - determinism and serialization
# ---------------------------------------------------------------------------

def test_a9_determinism_serialization(tmp_path, monkeypatch):
    monkeypatch.setenv("UVGU_REFERENCE_MODE", "1")
    samples = world.build_dataset(8, 5)
    blobs = []
    for run in range(2):
        model = init_fresh(ModelConfig(), SplitMix64(5))
        mpath = tmp_path / f"m{run}.jsonl"
        train_stage(model, samples,
                    TrainConfig.for_stage(1, steps=40, seed=5, log_every=10),
                    metrics_path=str(mpath))
        cpath = tmp_path / f"m{run}.ckpt"
        save_model(str(cpath), model, 1)
        blobs.append((mpath.read_bytes(), cpath.read_bytes()))
    ok = blobs[0] == blobs[1]

    # checkpoint round-trip bit-identical
    model2, _ = load_model(str(tmp_path / "m0.ckpt"))
    save_model(str(tmp_path / "rt.ckpt"), model2, 1)
    ok &= (tmp_path / "rt.ckpt").read_bytes() == blobs[0][1]

    # dataset generation bit-identical across runs
    again = world.build_dataset(8, 5)
    ok &= all(a.frames.tobytes() == b.frames.tobytes()
              and np.array_equal(a.prompt_ids, b.prompt_ids)
              and np.array_equal(a.caption_ids, b.caption_ids)
              for a, b in zip(samples, again))
    assert _line("A9 determinism and serialization", ok)
