"""Three-stage training pipeline with Adam, condition dropout, and
token-count loss weighting.

Stage 0 pretrains the video path alone (the surrogate for a pretrained
video generator). Stage 1 reconstructs the conditioning prompt as the text
target under heavy condition dropout; Stage 2 swaps the target for the
detailed caption. Every step is deterministic given (config, dataset, seed).
"""

import json
import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, NumericError
from .flow import FlowState
from .model import forward, forward_video_only
from .prng import SplitMix64
from .tensor import Tensor
from .world import PAD, encode_video

REFERENCE_MODE_ENV = "UVGU_REFERENCE_MODE"


def reference_mode():
    return os.environ.get(REFERENCE_MODE_ENV, "") == "1"


@dataclass
class TrainConfig:
    stage: int = 0
    steps: int = 1000
    batch_size: int = 16
    lr: float = 2e-4
    beta1: float = 0.90
    beta2: float = 0.95
    eps: float = 1e-8
    condition_dropout_p: float = 0.0
    lambda_v: float = 1.0
    seed: int = 0
    grad_clip_norm: float = 1.0
    log_every: int = 50
    ckpt_every: int = 0          # 0 = final checkpoint only

    STAGE_DEFAULTS = {0: {"lr": 2e-4, "condition_dropout_p": 0.0},
                      1: {"lr": 2e-4, "condition_dropout_p": 0.7},
                      2: {"lr": 5e-5, "condition_dropout_p": 0.1}}

    @classmethod
    def for_stage(cls, stage, **overrides):
        if stage not in (0, 1, 2):
            raise ConfigError(f"stage must be 0, 1 or 2, got {stage}")
        kw = dict(cls.STAGE_DEFAULTS[stage])
        kw.update(overrides)
        return cls(stage=stage, **kw).validate()

    def validate(self):
        if not 0.0 <= self.condition_dropout_p <= 1.0:
            raise ConfigError(f"condition_dropout_p must lie in [0,1], got {self.condition_dropout_p}")
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.stage not in (0, 1, 2):
            raise ConfigError(f"stage must be 0, 1 or 2, got {self.stage}")
        return self

    def to_dict(self):
        return dict(self.__dict__)


class Adam:
    """Bias-corrected Adam over named parameters."""

    def __init__(self, beta1=0.90, beta2=0.95, eps=1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.moments = {}

    def state_for(self, name, shape, dtype):
        if name not in self.moments:
            self.moments[name] = (np.zeros(shape, dtype=dtype), np.zeros(shape, dtype=dtype))
        return self.moments[name]


def clip_global_norm(grads, clip):
    """Scale the gradient dict in place so its global norm is at most clip.

    Returns the pre-clip global norm.
    """
    total = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if clip > 0 and total > clip:
        factor = clip / total
        for name in grads:
            grads[name] = grads[name] * factor
    return total


def adam_update(named_params, grads, opt, lr, clip):
    """Global-norm clip then one bias-corrected Adam step, in place.

    Parameters whose gradient is absent are skipped entirely (their moments
    stay untouched), which leaves never-trained parameters bit-identical.
    """
    for name, p in named_params:
        if name in grads and grads[name].shape != p.data.shape:
            raise ContractError(
                f"gradient shape {grads[name].shape} does not match parameter "
                f"{name} of shape {p.data.shape}")
    norm = clip_global_norm(grads, clip)
    opt.step_count += 1
    t = opt.step_count
    b1, b2 = opt.beta1, opt.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in named_params:
        g = grads.get(name)
        if g is None:
            continue
        m, v = opt.state_for(name, p.data.shape, p.data.dtype)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + opt.eps)
    return norm


@dataclass
class TrainData:
    """Dataset pre-encoded into flat arrays for batched steps."""
    latents: np.ndarray     # (N, 16, 48)
    prompts: np.ndarray     # (N, 8)
    captions: np.ndarray    # (N, 48)
    samples: list = field(default_factory=list)

    def __len__(self):
        return self.latents.shape[0]

    @staticmethod
    def from_samples(samples):
        return TrainData(
            latents=encode_video(np.stack([s.frames for s in samples])),
            prompts=np.stack([s.prompt_ids for s in samples]),
            captions=np.stack([s.caption_ids for s in samples]),
            samples=list(samples))


def _collect_grads(model):
    return {name: p.grad for name, p in model.param_items() if p.grad is not None}


def train_step_stage0(model, data, idxs, opt, rng, cfg):
    """Video-only flow matching step; text-path parameters receive no update."""
    c = model.config
    B = len(idxs)
    tau_v = rng.uniforms(B)
    z_v0 = rng.gaussian_array((B, c.n_video_tokens, c.d_v), dtype=model.dtype)
    model.zero_grads()
    z_v1 = Tensor(data.latents[idxs].astype(model.dtype))
    z_v0_t = Tensor(z_v0)
    tv = Tensor(tau_v.astype(model.dtype)[:, None, None])
    omtv = Tensor((1.0 - tau_v).astype(model.dtype)[:, None, None])
    z_v_tau = T.add(T.mul(z_v0_t, omtv), T.mul(z_v1, tv))
    u_v = T.sub(z_v1, z_v0_t)
    v_v, _ = forward_video_only(model, z_v_tau, tau_v, condition_ids=data.prompts[idxs])
    loss = T.masked_mse(v_v, u_v)
    T.backward(loss)
    grads = _collect_grads(model)
    norm = adam_update(model.param_items(), grads, opt, cfg.lr, cfg.grad_clip_norm)
    lv = loss.item()
    return {"loss_total": lv, "loss_v": lv, "loss_t": 0.0,
            "lambda_t_mean": 0.0, "grad_norm": norm}


def _joint_step(model, data, idxs, opt, rng, cfg, target_tokens):
    """Shared body of Stage 1 (target = prompt) and Stage 2 (target = caption)."""
    c = model.config
    B = len(idxs)
    tok = target_tokens[idxs]
    n_t = tok.shape[1]
    mask = tok != PAD
    taus = rng.uniforms(2 * B)
    tau_v, tau_t = taus[0::2], taus[1::2]
    z_v0 = rng.gaussian_array((B, c.n_video_tokens, c.d_v), dtype=model.dtype)
    z_t0 = rng.gaussian_array((B, n_t, c.d_e), dtype=model.dtype)
    drop = rng.uniforms(B) < cfg.condition_dropout_p

    model.zero_grads()
    z_v1 = Tensor(data.latents[idxs].astype(model.dtype))
    z_v0_t, z_t0_t = Tensor(z_v0), Tensor(z_t0)
    # the embedding lookup is detached on both the input and the target
    # side: letting gradient reach the table moves rows toward whatever the
    # model already predicts, which collapses them (pairwise cosine -> 1)
    # and destroys argmax decoding; the table keeps its separated init
    with T.no_grad():
        z_t1 = T.gather_rows(model.params["embed.E"], tok)
    z_t1 = Tensor(z_t1.data)
    z_t1_tgt = z_t1
    tv = Tensor(tau_v.astype(model.dtype)[:, None, None])
    omtv = Tensor((1.0 - tau_v).astype(model.dtype)[:, None, None])
    tt = Tensor(tau_t.astype(model.dtype)[:, None, None])
    omtt = Tensor((1.0 - tau_t).astype(model.dtype)[:, None, None])
    z_v_tau = T.add(T.mul(z_v0_t, omtv), T.mul(z_v1, tv))
    z_t_tau = T.add(T.mul(z_t0_t, omtt), T.mul(z_t1, tt))
    u_v = T.sub(z_v1, z_v0_t)
    u_t = T.sub(z_t1_tgt, z_t0_t)

    state = FlowState(z_v_tau=z_v_tau, z_t_tau=z_t_tau, tau_v=tau_v, tau_t=tau_t,
                      text_mask=mask)
    pred, _ = forward(model, state, condition_ids=data.prompts[idxs], cond_drop=drop)

    loss_v = T.masked_mse(pred.v_v, u_v)
    lam = c.n_video_tokens / mask.sum(axis=1)          # per-sample |z_v| / |z_t|
    loss_t = T.weighted_masked_mse(pred.v_t, u_t, mask, lam / B)
    loss = T.add(T.scale(loss_v, cfg.lambda_v), loss_t)
    T.backward(loss)
    grads = _collect_grads(model)
    norm = adam_update(model.param_items(), grads, opt, cfg.lr, cfg.grad_clip_norm)
    model.embedding_table.renormalize()
    return {"loss_total": loss.item(), "loss_v": cfg.lambda_v * loss_v.item(),
            "loss_t": loss_t.item(), "lambda_t_mean": float(lam.mean()),
            "grad_norm": norm}


def train_step_stage1(model, data, idxs, opt, rng, cfg):
    return _joint_step(model, data, idxs, opt, rng, cfg, data.prompts)


def train_step_stage2(model, data, idxs, opt, rng, cfg):
    return _joint_step(model, data, idxs, opt, rng, cfg, data.captions)


_STEP_FNS = {0: train_step_stage0, 1: train_step_stage1, 2: train_step_stage2}


def train_stage(model, samples, cfg, metrics_path=None, progress=None):
    """Run one full stage; returns the list of logged metric records.

    Aborts with NumericError (annotated with the step index) on any
    non-finite loss or activation.
    """
    cfg.validate()
    data = samples if isinstance(samples, TrainData) else TrainData.from_samples(samples)
    rng = SplitMix64(cfg.seed)
    opt = Adam(beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    step_fn = _STEP_FNS[cfg.stage]
    ref = reference_mode()
    records = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for step in range(1, cfg.steps + 1):
            idxs = (rng.fill_u64(cfg.batch_size) % np.uint64(len(data))).astype(np.int64)
            t0 = time.perf_counter()
            try:
                metrics = step_fn(model, data, idxs, opt, rng, cfg)
            except NumericError as exc:
                raise NumericError(f"training aborted at step {step}: {exc}") from exc
            wall_ms = 0.0 if ref else (time.perf_counter() - t0) * 1000.0
            if cfg.log_every and (step % cfg.log_every == 0 or step == cfg.steps):
                rec = {"step": step, "stage": cfg.stage,
                       "loss_total": metrics["loss_total"],
                       "loss_v": metrics["loss_v"], "loss_t": metrics["loss_t"],
                       "lambda_t_mean": metrics["lambda_t_mean"],
                       "grad_norm": metrics["grad_norm"],
                       "lr": cfg.lr, "wall_ms": wall_ms}
                records.append(rec)
                if sink:
                    sink.write(json.dumps(rec, separators=(",", ":")) + "\n")
                if progress:
                    progress(rec)
    finally:
        if sink:
            sink.close()
    return records
