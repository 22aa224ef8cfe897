"""Modality-routed MoE Diffusion Transformer.

Shared self-attention runs over the concatenated video+text token streams,
shared cross-attention reads the conditioning prompt (or a learned null
vector), and each block routes token positions to a per-modality FFN expert
purely by modality identity. Time conditioning is a shared sinusoidal+MLP
encoder whose output is added per-modality after input projection.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ConfigError, ContractError, NumericError
from .flow import EmbeddingTable, VelocityPair
from .tensor import Tensor
from .world import PAD, VOCAB

TIME_DIM = 64
_MASKED = -1e9


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    n_layers: int = 4
    d_ffn: int = 256
    d_v: int = 48
    d_e: int = 32
    d_c: int = 64
    vocab_size: int = len(VOCAB)
    max_prompt_len: int = 8
    max_caption_len: int = 48
    n_video_tokens: int = 16
    # init-only: multiplies the fresh positional tables (pos_v and pos_t).
    # Generating a modality from noise needs token identity (frame index,
    # caption slot) to dominate the input signal at low tau, where the latent
    # itself carries no information; the std-0.02 default is too quiet for
    # that. The trained values live in the checkpoint, so this knob is not
    # serialized.
    pos_init_scale: float = 1.0

    def validate(self):
        dims = (self.d_model, self.n_heads, self.n_layers, self.d_ffn, self.d_v,
                self.d_e, self.d_c, self.vocab_size, self.max_prompt_len,
                self.max_caption_len, self.n_video_tokens)
        if any(d < 1 for d in dims):
            raise ConfigError(f"all model dimensions must be >= 1: {self}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if not self.pos_init_scale > 0:
            raise ConfigError(f"pos_init_scale must be positive: {self.pos_init_scale}")
        return self

    def to_dict(self):
        return dict(self.__dict__)


# parameter groups: names are relative to a block for per-block entries
_VIDEO_PATH_GLOBALS = ("video_in.w", "video_in.b", "video_out.w", "video_out.b",
                       "pos_v", "cond.E", "cond.pos", "cond.null",
                       "time.w1", "time.b1", "time.w2", "time.b2")
_TEXT_PATH_GLOBALS = ("text_in.w", "text_in.b", "text_out.w", "text_out.b",
                      "pos_t", "embed.E")
_BLOCK_VIDEO = ("norm1.g", "norm1.b", "norm2.g", "norm2.b",
                "attn.wq", "attn.wk", "attn.wv", "attn.wo",
                "cross.wq", "cross.wk", "cross.wv", "cross.wo",
                "ffn_v.w1", "ffn_v.b1", "ffn_v.w2", "ffn_v.b2")
_BLOCK_TEXT = ("ffn_t.w1", "ffn_t.b1", "ffn_t.w2", "ffn_t.b2")


def video_path_names(config):
    names = list(_VIDEO_PATH_GLOBALS)
    for i in range(config.n_layers):
        names += [f"blocks.{i}.{n}" for n in _BLOCK_VIDEO]
    return names


def text_path_names(config):
    names = list(_TEXT_PATH_GLOBALS)
    for i in range(config.n_layers):
        names += [f"blocks.{i}.{n}" for n in _BLOCK_TEXT]
    return names


@dataclass
class ForwardTrace:
    """Per-forward routing and masking record."""
    expert_per_block: list = field(default_factory=list)  # (n,) arrays: 0=video, 1=text, -1=PAD
    ffn_v_firings: int = 0
    ffn_t_firings: int = 0
    cross_modal_firings: int = 0
    cond_null: np.ndarray = None        # (B,) True where the null condition was used
    self_key_mask: np.ndarray = None    # (B, n) attention key visibility snapshot


class UniFlowModel:
    """Parameter container plus forward passes."""

    def __init__(self, config, params, dtype=np.float32):
        self.config = config
        self.params = params
        self.dtype = np.dtype(dtype)

    @property
    def embedding_table(self):
        return EmbeddingTable(self.params["embed.E"])

    def param_items(self):
        return list(self.params.items())

    def state_arrays(self):
        return {name: p.data for name, p in self.params.items()}

    def zero_grads(self):
        for p in self.params.values():
            p.grad = None


def _param_specs(config):
    """(name, shape, init) in fixed construction/draw order.

    init is one of "normal" (std 0.02), "zeros", "ones", "unit_rows".
    """
    c = config
    specs = [
        ("video_in.w", (c.d_v, c.d_model), "normal"),
        ("video_in.b", (c.d_model,), "zeros"),
        ("video_out.w", (c.d_model, c.d_v), "zeros"),
        ("video_out.b", (c.d_v,), "zeros"),
        ("text_in.w", (c.d_e, c.d_model), "normal"),
        ("text_in.b", (c.d_model,), "zeros"),
        ("text_out.w", (c.d_model, c.d_e), "zeros"),
        ("text_out.b", (c.d_e,), "zeros"),
        ("pos_v", (c.n_video_tokens, c.d_model), "normal"),
        ("pos_t", (c.max_caption_len, c.d_model), "normal"),
        ("embed.E", (c.vocab_size, c.d_e), "unit_rows"),
        ("cond.E", (c.vocab_size, c.d_c), "normal"),
        ("cond.pos", (c.max_prompt_len, c.d_c), "normal"),
        ("cond.null", (1, c.d_c), "normal"),
        ("time.w1", (TIME_DIM, TIME_DIM), "normal"),
        ("time.b1", (TIME_DIM,), "zeros"),
        ("time.w2", (TIME_DIM, c.d_model), "normal"),
        ("time.b2", (c.d_model,), "zeros"),
    ]
    for i in range(c.n_layers):
        b = f"blocks.{i}."
        specs += [
            (b + "norm1.g", (c.d_model,), "ones"),
            (b + "norm1.b", (c.d_model,), "zeros"),
            (b + "norm2.g", (c.d_model,), "ones"),
            (b + "norm2.b", (c.d_model,), "zeros"),
            (b + "attn.wq", (c.d_model, c.d_model), "normal"),
            (b + "attn.wk", (c.d_model, c.d_model), "normal"),
            (b + "attn.wv", (c.d_model, c.d_model), "normal"),
            (b + "attn.wo", (c.d_model, c.d_model), "normal"),
            (b + "cross.wq", (c.d_model, c.d_model), "normal"),
            (b + "cross.wk", (c.d_c, c.d_model), "normal"),
            (b + "cross.wv", (c.d_c, c.d_model), "normal"),
            (b + "cross.wo", (c.d_model, c.d_model), "normal"),
            (b + "ffn_v.w1", (c.d_model, c.d_ffn), "normal"),
            (b + "ffn_v.b1", (c.d_ffn,), "zeros"),
            (b + "ffn_v.w2", (c.d_ffn, c.d_model), "normal"),
            (b + "ffn_v.b2", (c.d_model,), "zeros"),
            (b + "ffn_t.w1", (c.d_model, c.d_ffn), "normal"),
            (b + "ffn_t.b1", (c.d_ffn,), "zeros"),
            (b + "ffn_t.w2", (c.d_ffn, c.d_model), "normal"),
            (b + "ffn_t.b2", (c.d_model,), "zeros"),
        ]
    return specs


def init_fresh(config, rng, dtype=np.float32):
    """Fresh model: scaled-normal weights (std 0.02), zero output heads,
    unit-normalized distinct embedding rows. Draw order is fixed, so two
    calls with equal seeds produce bit-identical parameters."""
    config.validate()
    params = {}
    for name, shape, init in _param_specs(config):
        if init == "normal":
            arr = 0.02 * rng.gaussian_array(shape, dtype=dtype)
            if name in ("pos_v", "pos_t"):
                arr = arr * np.asarray(config.pos_init_scale, dtype=dtype)
        elif init == "zeros":
            arr = np.zeros(shape, dtype=dtype)
        elif init == "ones":
            arr = np.ones(shape, dtype=dtype)
        else:  # unit_rows
            arr = EmbeddingTable.init_random(shape[0], shape[1], rng, dtype=dtype).E.data
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype)
    return UniFlowModel(config, params, dtype=dtype)


def init_from_video_checkpoint(config, ckpt_tensors, rng, dtype=np.float32):
    """Asymmetric initialization: copy the video path from a donor
    checkpoint, freshly initialize the text path (text expert FFNs, text
    projections, text positions, and the token embedding table)."""
    model = init_fresh(config, rng, dtype=dtype)
    for name in video_path_names(config):
        if name not in ckpt_tensors:
            raise CheckpointError(f"checkpoint is missing required tensor {name!r}")
        src = np.asarray(ckpt_tensors[name])
        if tuple(src.shape) != model.params[name].data.shape:
            raise CheckpointError(
                f"checkpoint tensor {name!r} has shape {tuple(src.shape)}, "
                f"expected {model.params[name].data.shape}")
        model.params[name] = Tensor(src.astype(dtype), requires_grad=True, dtype=dtype)
    return model


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

def sinusoidal_time_features(tau, dtype):
    """(B,) timesteps in [0,1] -> (B, TIME_DIM) fixed sinusoidal features."""
    tau = np.asarray(tau, dtype=np.float64).reshape(-1)
    half = TIME_DIM // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    args = tau[:, None] * 1000.0 * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=1).astype(dtype)


def _time_embedding(model, tau):
    p = model.params
    feat = Tensor(sinusoidal_time_features(tau, model.dtype))
    h = T.silu(T.add(T.matmul(feat, p["time.w1"]), p["time.b1"]))
    h = T.add(T.matmul(h, p["time.w2"]), p["time.b2"])
    return T.reshape(h, (h.data.shape[0], 1, model.config.d_model))


def _attention(h_q, kv, wq, wk, wv, wo, n_heads, key_bias):
    """Multi-head attention; key_bias is an additive (B, nq-or-1, nk) mask."""
    Q = T.matmul(h_q, wq)
    K = T.matmul(kv, wk)
    V = T.matmul(kv, wv)
    head_dim = Q.data.shape[-1] // n_heads
    sizes = [head_dim] * n_heads
    qs, ks, vs = (T.split(X, sizes, axis=2) for X in (Q, K, V))
    outs = []
    inv_sqrt = 1.0 / math.sqrt(head_dim)
    for qh, kh, vh in zip(qs, ks, vs):
        scores = T.scale(T.matmul(qh, T.transpose(kh)), inv_sqrt)
        if key_bias is not None:
            scores = T.add(scores, key_bias)
        outs.append(T.matmul(T.softmax_rows(scores), vh))
    return T.matmul(T.concat(outs, axis=2), wo)


def _build_condition(model, condition_ids, batch, drop_mask):
    """Condition key/value stream at width d_c plus its key visibility mask.

    condition_ids None (or a per-sample drop flag) replaces the whole
    condition with the learned null vector at position 0.
    """
    c = model.config
    p = model.params
    dt = model.dtype
    if condition_ids is None:
        null = T.reshape(p["cond.null"], (1, 1, c.d_c))
        ones = Tensor(np.ones((batch, 1, 1), dtype=dt))
        cond = T.mul(null, ones)
        key_mask = np.ones((batch, 1), dtype=bool)
        return cond, key_mask, np.ones(batch, dtype=bool)

    ids = np.asarray(condition_ids)
    if ids.ndim != 2 or ids.shape[0] != batch:
        raise ContractError(f"condition ids must be (batch, len), got {ids.shape}")
    if ids.shape[1] > c.max_prompt_len:
        raise ContractError(
            f"condition length {ids.shape[1]} exceeds max_prompt_len {c.max_prompt_len}")
    lc = ids.shape[1]
    emb = T.add(T.gather_rows(p["cond.E"], ids), T.take_rows(p["cond.pos"], lc))
    key_mask = ids != PAD
    if drop_mask is None:
        drop_mask = np.zeros(batch, dtype=bool)
    drop_mask = np.asarray(drop_mask, dtype=bool)
    if drop_mask.any():
        keep = Tensor(np.repeat((~drop_mask).astype(dt)[:, None, None], lc, axis=1))
        drop = Tensor(np.repeat(drop_mask.astype(dt)[:, None, None], lc, axis=1))
        null = T.reshape(p["cond.null"], (1, 1, c.d_c))
        emb = T.add(T.mul(emb, keep), T.mul(null, drop))
        null_key = np.zeros((batch, lc), dtype=bool)
        null_key[:, 0] = True
        key_mask = np.where(drop_mask[:, None], null_key, key_mask)
    return emb, key_mask, drop_mask


def _key_bias(key_mask, dtype):
    bias = np.where(key_mask, 0.0, _MASKED).astype(dtype)
    return Tensor(bias[:, None, :])


def forward(model, state, condition_ids=None, cond_drop=None, trace=False,
            decouple_streams=False):
    """Joint velocity prediction over the concatenated video+text streams.

    state.z_t_tau may be None for a video-only pass (Stage 0 / donor
    equivalence); the text output of the returned pair is then None.
    Returns (VelocityPair, ForwardTrace or None).
    """
    c = model.config
    p = model.params
    dt = model.dtype
    z_v = state.z_v_tau
    has_text = state.z_t_tau is not None
    batch = z_v.data.shape[0]
    n_v = z_v.data.shape[1]
    if n_v != c.n_video_tokens or z_v.data.shape[2] != c.d_v:
        raise ContractError(
            f"video latent shape {z_v.data.shape[1:]} does not match config "
            f"({c.n_video_tokens}, {c.d_v})")

    tr = ForwardTrace() if trace else None

    h_v = T.add(T.matmul(z_v, p["video_in.w"]), p["video_in.b"])
    h_v = T.add(h_v, T.take_rows(p["pos_v"], n_v))
    h_v = T.add(h_v, _time_embedding(model, state.tau_v))

    if has_text:
        z_t = state.z_t_tau
        n_t = z_t.data.shape[1]
        if n_t > c.max_caption_len or z_t.data.shape[2] != c.d_e:
            raise ContractError(
                f"text latent shape {z_t.data.shape[1:]} exceeds ({c.max_caption_len}, {c.d_e})")
        text_mask = np.asarray(state.text_mask, dtype=bool)
        h_t = T.add(T.matmul(z_t, p["text_in.w"]), p["text_in.b"])
        h_t = T.add(h_t, T.take_rows(p["pos_t"], n_t))
        h_t = T.add(h_t, _time_embedding(model, state.tau_t))
        h = T.concat([h_v, h_t], axis=1)
        self_key_mask = np.concatenate(
            [np.ones((batch, n_v), dtype=bool), text_mask], axis=1)
    else:
        n_t = 0
        text_mask = None
        h = h_v
        self_key_mask = np.ones((batch, n_v), dtype=bool)

    n = n_v + n_t
    if decouple_streams and has_text:
        block_mask = np.zeros((n, n), dtype=bool)
        block_mask[:n_v, n_v:] = True
        block_mask[n_v:, :n_v] = True
        bias = np.where(self_key_mask[:, None, :], 0.0, _MASKED).astype(dt)
        bias = bias + np.where(block_mask, _MASKED, 0.0).astype(dt)[None, :, :]
        self_bias = Tensor(np.maximum(bias, _MASKED))
    else:
        self_bias = _key_bias(self_key_mask, dt)

    cond, cond_key_mask, cond_null = _build_condition(model, condition_ids, batch, cond_drop)
    cond_bias = _key_bias(cond_key_mask, dt)
    if tr is not None:
        tr.cond_null = cond_null
        tr.self_key_mask = self_key_mask

    for i in range(c.n_layers):
        b = f"blocks.{i}."
        try:
            x = T.layer_norm(h, p[b + "norm1.g"], p[b + "norm1.b"], 1e-5)
            h = T.add(h, _attention(x, x, p[b + "attn.wq"], p[b + "attn.wk"],
                                    p[b + "attn.wv"], p[b + "attn.wo"],
                                    c.n_heads, self_bias))
            h = T.add(h, _attention(h, cond, p[b + "cross.wq"], p[b + "cross.wk"],
                                    p[b + "cross.wv"], p[b + "cross.wo"],
                                    c.n_heads, cond_bias))
            x = T.layer_norm(h, p[b + "norm2.g"], p[b + "norm2.b"], 1e-5)
            if has_text:
                x_v, x_t = T.split(x, [n_v, n_t], axis=1)
                f_v = _ffn(x_v, p, b + "ffn_v.")
                f_t = _ffn(x_t, p, b + "ffn_t.")
                h = T.add(h, T.concat([f_v, f_t], axis=1))
            else:
                h = T.add(h, _ffn(x, p, b + "ffn_v."))
        except NumericError as exc:
            raise NumericError(f"non-finite activation in block {i}: {exc}") from exc
        if tr is not None:
            experts = np.full(n, -1, dtype=np.int64)
            experts[:n_v] = 0
            if has_text:
                # per-position expert id of the first batch element
                experts[n_v:] = np.where(text_mask[0], 1, -1)
            tr.expert_per_block.append(experts)
            tr.ffn_v_firings += batch * n_v
            if has_text:
                tr.ffn_t_firings += int(text_mask.sum())

    if has_text:
        h_v_out, h_t_out = T.split(h, [n_v, n_t], axis=1)
        v_t = T.add(T.matmul(h_t_out, p["text_out.w"]), p["text_out.b"])
    else:
        h_v_out = h
        v_t = None
    v_v = T.add(T.matmul(h_v_out, p["video_out.w"]), p["video_out.b"])
    return VelocityPair(v_v=v_v, v_t=v_t), tr


def _ffn(x, p, prefix):
    h = T.silu(T.add(T.matmul(x, p[prefix + "w1"]), p[prefix + "b1"]))
    return T.add(T.matmul(h, p[prefix + "w2"]), p[prefix + "b2"])


def forward_video_only(model, z_v_tau, tau_v, condition_ids=None, cond_drop=None,
                       trace=False):
    """Single-modality forward used for Stage 0: identical computation to
    forward() with an empty text stream."""
    from .flow import FlowState
    state = FlowState(z_v_tau=z_v_tau, z_t_tau=None,
                      tau_v=np.asarray(tau_v, dtype=np.float64).reshape(-1),
                      tau_t=None, text_mask=None)
    pair, tr = forward(model, state, condition_ids=condition_ids,
                       cond_drop=cond_drop, trace=trace)
    return (pair.v_v, tr) if trace else (pair.v_v, None)


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

_CONFIG_FIELDS = ("d_model", "n_heads", "n_layers", "d_ffn", "d_v", "d_e", "d_c",
                  "vocab_size", "max_prompt_len", "max_caption_len", "n_video_tokens")


def save_model(path, model, stage):
    """Write all parameters plus meta.stage / meta.config entries."""
    from . import checkpoint
    arrs = dict(model.state_arrays())
    arrs["meta.stage"] = np.array([float(stage)], dtype=np.float32)
    arrs["meta.config"] = np.array(
        [getattr(model.config, f) for f in _CONFIG_FIELDS], dtype=np.float32)
    checkpoint.save(path, arrs)


def load_model(path, dtype=np.float32):
    """Load a model checkpoint; returns (model, stage)."""
    from . import checkpoint
    tensors = checkpoint.load(path)
    if "meta.config" not in tensors or "meta.stage" not in tensors:
        raise CheckpointError(f"{path}: missing meta.config / meta.stage entries")
    cfg_vals = tensors["meta.config"]
    if cfg_vals.shape != (len(_CONFIG_FIELDS),):
        raise CheckpointError(f"{path}: malformed meta.config")
    config = ModelConfig(**{f: int(round(float(v)))
                            for f, v in zip(_CONFIG_FIELDS, cfg_vals)}).validate()
    params = {}
    for name, shape, _ in _param_specs(config):
        if name not in tensors:
            raise CheckpointError(f"{path}: checkpoint is missing tensor {name!r}")
        arr = tensors[name]
        if tuple(arr.shape) != tuple(shape):
            raise CheckpointError(
                f"{path}: tensor {name!r} has shape {tuple(arr.shape)}, expected {tuple(shape)}")
        params[name] = Tensor(arr.astype(dtype), requires_grad=True, dtype=dtype)
    stage = int(round(float(tensors["meta.stage"][0])))
    return UniFlowModel(config, params, dtype=dtype), stage
