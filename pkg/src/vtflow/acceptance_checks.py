"""Finite-difference verification suite for every primitive and for a full
one-block model, in double precision. Used by the `gradcheck` CLI command
and by the acceptance tests.
"""

import numpy as np

from . import tensor as T
from .flow import FlowState, VelocityPair, unified_loss
from .gradcheck import check_gradients
from .model import ModelConfig, forward, init_fresh
from .prng import SplitMix64
from .tensor import Tensor


def _t(rng, shape):
    return Tensor(rng.gaussian_array(shape, dtype=np.float64), requires_grad=True)


def primitive_checks(seed=0):
    """(name, fn, tensors) triples; fn maps the tensor list to a scalar."""
    rng = SplitMix64(seed)
    mask = np.array([[True, True, False], [True, False, False]])
    cases = [
        ("matmul_2d", lambda ts: T.sum_all(T.matmul(ts[0], ts[1])),
         [_t(rng, (3, 4)), _t(rng, (4, 5))]),
        ("matmul_batched", lambda ts: T.sum_all(T.matmul(ts[0], ts[1])),
         [_t(rng, (2, 3, 4)), _t(rng, (2, 4, 3))]),
        ("matmul_weight", lambda ts: T.sum_all(T.matmul(ts[0], ts[1])),
         [_t(rng, (2, 3, 4)), _t(rng, (4, 5))]),
        ("add", lambda ts: T.sum_all(T.mul(T.add(ts[0], ts[1]), T.add(ts[0], ts[1]))),
         [_t(rng, (3, 4)), _t(rng, (3, 4))]),
        ("add_rowvec", lambda ts: T.sum_all(T.silu(T.add(ts[0], ts[1]))),
         [_t(rng, (3, 4)), _t(rng, (4,))]),
        ("sub_mul", lambda ts: T.sum_all(T.mul(T.sub(ts[0], ts[1]), ts[0])),
         [_t(rng, (2, 5)), _t(rng, (2, 5))]),
        ("scale", lambda ts: T.sum_all(T.mul(T.scale(ts[0], 2.5), ts[0])),
         [_t(rng, (4, 4))]),
        ("silu", lambda ts: T.sum_all(T.mul(T.silu(ts[0]), ts[0])),
         [_t(rng, (4, 6))]),
        ("softmax_rows", lambda ts: T.sum_all(T.mul(T.softmax_rows(ts[0]), ts[1])),
         [_t(rng, (3, 5)), _t(rng, (3, 5))]),
        ("layer_norm", lambda ts: T.sum_all(
            T.mul(T.layer_norm(ts[0], ts[1], ts[2], 1e-5), ts[3])),
         [_t(rng, (4, 8)), _t(rng, (8,)), _t(rng, (8,)), _t(rng, (4, 8))]),
        ("transpose", lambda ts: T.sum_all(T.mul(T.transpose(ts[0]), ts[1])),
         [_t(rng, (3, 4)), _t(rng, (4, 3))]),
        ("reshape", lambda ts: T.sum_all(T.mul(T.reshape(ts[0], (2, 6)), ts[1])),
         [_t(rng, (3, 4)), _t(rng, (2, 6))]),
        ("concat_split", lambda ts: T.sum_all(
            T.mul(T.concat(T.split(ts[0], [2, 3], axis=1), axis=1), ts[1])),
         [_t(rng, (2, 5)), _t(rng, (2, 5))]),
        ("take_rows", lambda ts: T.sum_all(T.mul(T.take_rows(ts[0], 2), ts[1])),
         [_t(rng, (4, 3)), _t(rng, (2, 3))]),
        ("gather_rows", lambda ts: T.sum_all(
            T.mul(T.gather_rows(ts[0], np.array([0, 2, 2, 1])), ts[1])),
         [_t(rng, (3, 4)), _t(rng, (4, 4))]),
        ("masked_mse", lambda ts: T.masked_mse(ts[0], ts[1], row_mask=mask),
         [_t(rng, (2, 3, 4)), _t(rng, (2, 3, 4))]),
        ("weighted_masked_mse", lambda ts: T.weighted_masked_mse(
            ts[0], ts[1], mask, np.array([0.7, 1.3])),
         [_t(rng, (2, 3, 4)), _t(rng, (2, 3, 4))]),
    ]
    return cases


def one_block_model_check(seed=0, h=1e-5):
    """FD-verify every parameter gradient of a one-block joint forward+loss."""
    config = ModelConfig(d_model=16, n_heads=2, n_layers=1, d_ffn=24, d_v=6,
                         d_e=5, d_c=12, vocab_size=11, max_prompt_len=4,
                         max_caption_len=4, n_video_tokens=2)
    rng = SplitMix64(seed)
    model = init_fresh(config, rng, dtype=np.float64)
    # perturb heads away from exact zero so their FD signal is nontrivial
    for name in ("video_out.w", "video_out.b", "text_out.w", "text_out.b"):
        p = model.params[name]
        p.data += 0.05 * rng.gaussian_array(p.data.shape, dtype=np.float64)

    z_v = Tensor(rng.gaussian_array((1, 2, config.d_v), dtype=np.float64))
    z_t = Tensor(rng.gaussian_array((1, 2, config.d_e), dtype=np.float64))
    u_v = Tensor(rng.gaussian_array((1, 2, config.d_v), dtype=np.float64))
    u_t = Tensor(rng.gaussian_array((1, 2, config.d_e), dtype=np.float64))
    mask = np.array([[True, True]])
    cond = np.array([[1, 3, 0, 0]])

    names = [n for n, _ in model.param_items()]
    tensors = [model.params[n] for n in names]

    def fn(ts):
        state = FlowState(z_v_tau=z_v, z_t_tau=z_t, tau_v=np.array([0.3]),
                          tau_t=np.array([0.6]), text_mask=mask)
        pred, _ = forward(model, state, condition_ids=cond)
        return unified_loss(pred, VelocityPair(u_v, u_t), mask, 1.0, 2.0)

    return check_gradients(fn, tensors, h=h)


def run_gradcheck_suite(seed=0):
    """Run all checks; returns [(name, max_rel_error)]."""
    results = []
    for name, fn, tensors in primitive_checks(seed):
        results.append((name, check_gradients(fn, tensors)))
    results.append(("one_block_model", one_block_model_check(seed)))
    return results
