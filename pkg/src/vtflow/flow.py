"""Flow-matching mathematics: interpolation paths, velocity targets,
independent time sampling, the token-count weighted unified loss, Euler
integration, and the embed/decode bridge between tokens and latents.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError, IntegrationError
from .tensor import Tensor

PAD_ID = 0


@dataclass
class FlowState:
    """The joint noised pair with its two independent timesteps.

    z_v_tau: (B, N_v, d_v) noised video latent.
    z_t_tau: (B, N_t, d_e) noised text embedding latent, or None for a
        video-only pass.
    tau_v / tau_t: per-sample arrays of shape (B,), each value in [0, 1].
    text_mask: (B, N_t) boolean, True at real (non-PAD) token positions.
    """
    z_v_tau: Tensor
    z_t_tau: Tensor
    tau_v: np.ndarray
    tau_t: np.ndarray
    text_mask: np.ndarray


@dataclass
class VelocityPair:
    v_v: Tensor
    v_t: Tensor


class EmbeddingTable:
    """Unit-norm token embedding rows with in-place renormalization."""

    def __init__(self, E):
        self.E = E if isinstance(E, Tensor) else Tensor(E, requires_grad=True)

    @property
    def vocab_size(self):
        return self.E.data.shape[0]

    @property
    def embed_dim(self):
        return self.E.data.shape[1]

    def renormalize(self):
        """Rescale every row to unit L2 norm (called after optimizer steps)."""
        norms = np.linalg.norm(self.E.data, axis=1, keepdims=True)
        np.divide(self.E.data, norms, out=self.E.data)

    def min_pairwise_gap(self):
        """1 - max pairwise cosine between distinct rows."""
        sims = self.E.data @ self.E.data.T
        np.fill_diagonal(sims, -np.inf)
        return 1.0 - float(sims.max())

    @staticmethod
    def init_random(vocab_size, embed_dim, rng, dtype=np.float32, max_tries=16):
        """Random unit rows, redrawn until pairwise cosines stay below 1 - 1e-6."""
        for _ in range(max_tries):
            rows = rng.gaussian_array((vocab_size, embed_dim), dtype=dtype)
            rows /= np.linalg.norm(rows, axis=1, keepdims=True)
            table = EmbeddingTable(Tensor(rows, requires_grad=True))
            if table.min_pairwise_gap() > 1e-6:
                return table
        raise ContractError("could not initialize distinct embedding rows")


def interpolate(z0, z1, tau):
    """Linear transport path (1 - tau) * z0 + tau * z1."""
    if z0.data.shape != z1.data.shape:
        raise DimensionError(f"interpolate shapes differ: {z0.data.shape} vs {z1.data.shape}")
    tau = float(tau)
    if not 0.0 <= tau <= 1.0:
        raise ContractError(f"tau must lie in [0, 1], got {tau}")
    if tau == 0.0:
        return z0
    if tau == 1.0:
        return z1
    return T.add(T.scale(z0, 1.0 - tau), T.scale(z1, tau))


def velocity_target(z0, z1):
    """Constant path velocity z1 - z0 (independent of tau)."""
    if z0.data.shape != z1.data.shape:
        raise DimensionError(f"velocity_target shapes differ: {z0.data.shape} vs {z1.data.shape}")
    return T.sub(z1, z0)


def sample_times(rng):
    """Independently sampled (tau_v, tau_t), each U(0, 1)."""
    return rng.uniform(), rng.uniform()


def embed_tokens(tokens, table):
    """Look up embedding rows for a token id array (PAD embeds the PAD row)."""
    return T.gather_rows(table.E, np.asarray(tokens))


def decode_tokens(z, table, mask=None):
    """Nearest-row argmax decode; ties break to the smallest token id.

    z is (..., N, d_e) array or Tensor; mask (..., N) marks real positions,
    masked-out positions decode to PAD.
    """
    arr = z.data if isinstance(z, Tensor) else np.asarray(z)
    if arr.shape[-1] != table.embed_dim:
        raise DimensionError(
            f"latent dim {arr.shape[-1]} does not match table dim {table.embed_dim}")
    scores = arr @ table.E.data.T
    ids = scores.argmax(axis=-1)  # np.argmax returns the first (smallest) index on ties
    if mask is not None:
        ids = np.where(np.asarray(mask, dtype=bool), ids, PAD_ID)
    return ids.astype(np.int64)


def lambda_text(n_video_tokens, n_text_tokens):
    """Token-count loss weight for the text branch: |z_v| / |z_t|."""
    if n_text_tokens <= 0:
        raise ContractError("lambda_text needs a positive text token count")
    return n_video_tokens / n_text_tokens


def unified_loss(pred, target, text_mask, lambda_v, lambda_t):
    """lambda_v * MSE over video entries + lambda_t * MSE over non-PAD text entries."""
    if lambda_v <= 0 or lambda_t <= 0:
        raise ContractError(f"loss weights must be positive, got {lambda_v}, {lambda_t}")
    text_mask = np.asarray(text_mask, dtype=bool)
    if not text_mask.any():
        raise ContractError("unified_loss with all-PAD text and lambda_t > 0")
    loss_v = T.masked_mse(pred.v_v, target.v_v)
    loss_t = T.masked_mse(pred.v_t, target.v_t, row_mask=text_mask)
    return T.add(T.scale(loss_v, lambda_v), T.scale(loss_t, lambda_t))


def euler_integrate(z0, field, steps, trace=None):
    """Forward Euler from tau=0 to tau=1 with step 1/steps.

    field(z, tau) returns the velocity array at (z, tau). A non-finite
    velocity raises IntegrationError carrying the step index. trace, if
    given, receives (step, tau) tuples for diagnostics.
    """
    if steps < 1:
        raise ContractError(f"steps must be >= 1, got {steps}")
    z = np.array(z0, copy=True)
    dt = 1.0 / steps
    for k in range(steps):
        tau = k * dt
        v = np.asarray(field(z, tau))
        if not np.all(np.isfinite(v)):
            raise IntegrationError(f"non-finite velocity at integration step {k}", step=k)
        z = z + z.dtype.type(dt) * v.astype(z.dtype)
        if trace is not None:
            trace.append((k, tau))
    return z
