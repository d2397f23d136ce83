"""Interactive multimodal alignment blocks.

One block per encoder level. Each block linearly projects the context
tokens to the level's channel width and runs a two-way attention
sequence against the flattened image tokens:

    1. context self-attention
    2. context -> image cross-attention
    3. context MLP
    4. image -> context cross-attention

Every path is residual with pre-normalization, single-head attention
scaled by 1/sqrt(Ch). Fixed sinusoidal positional codes (one ladder per
spatial axis, round-robin over channels) are added to the image-side
queries and keys only, so zeroed weights leave the image tokens exactly
unchanged. Context tokens carry no positional term, which keeps the
image output invariant to context-token order.
"""
from __future__ import annotations

import math

import numpy as np

from .engine import Tensor, ops
from .exceptions import ContractError, DimensionError


def sincos_positions(dims, channels: int, scale: float = 0.5) -> np.ndarray:
    """Fixed positional code for a flattened [H, W, S] token grid."""
    h, w, s = dims
    grid = np.stack(np.meshgrid(
        np.arange(h, dtype=np.float64),
        np.arange(w, dtype=np.float64),
        np.arange(s, dtype=np.float64),
        indexing="ij",
    ), axis=-1).reshape(-1, 3)
    norm = grid / np.maximum(np.array([h, w, s], dtype=np.float64) - 1.0, 1.0)
    out = np.zeros((grid.shape[0], channels), dtype=np.float64)
    for c in range(channels):
        axis = c % 3
        octave = c // 6
        freq = math.pi * (2.0 ** octave)
        phase = norm[:, axis] * freq
        out[:, c] = np.sin(phase) if (c // 3) % 2 == 0 else np.cos(phase)
    return (scale * out)


def _linear_params(rng, d_in, d_out, std, dtype):
    w = Tensor((rng.normal(size=(d_in, d_out)) * std).astype(dtype), requires_grad=True)
    b = Tensor(np.zeros(d_out, dtype=dtype), requires_grad=True)
    return w, b


class _Attention:
    def __init__(self, rng, ch, std, dtype):
        self.wq, self.bq = _linear_params(rng, ch, ch, std, dtype)
        self.wk, self.bk = _linear_params(rng, ch, ch, std, dtype)
        self.wv, self.bv = _linear_params(rng, ch, ch, std, dtype)
        self.wo, self.bo = _linear_params(rng, ch, ch, std, dtype)
        self.scale = 1.0 / math.sqrt(ch)

    def params(self, prefix):
        return {
            prefix + "wq": self.wq, prefix + "bq": self.bq,
            prefix + "wk": self.wk, prefix + "bk": self.bk,
            prefix + "wv": self.wv, prefix + "bv": self.bv,
            prefix + "wo": self.wo, prefix + "bo": self.bo,
        }

    def __call__(self, q_in: Tensor, k_in: Tensor, v_in: Tensor) -> Tensor:
        q = ops.linear(q_in, self.wq, self.bq)
        k = ops.linear(k_in, self.wk, self.bk)
        v = ops.linear(v_in, self.wv, self.bv)
        attn = ops.softmax(ops.scale(ops.matmul(q, ops.transpose2d(k)), self.scale))
        return ops.linear(ops.matmul(attn, v), self.wo, self.bo)


class _Norm:
    def __init__(self, ch, dtype):
        self.gamma = Tensor(np.ones(ch, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(ch, dtype=dtype), requires_grad=True)

    def params(self, prefix):
        return {prefix + "gamma": self.gamma, prefix + "beta": self.beta}

    def __call__(self, x: Tensor) -> Tensor:
        return ops.layer_norm(x, self.gamma, self.beta)


class AlignmentBlock:
    """Projection plus two-way attention for one encoder level."""

    def __init__(self, level: int, ctx_dim: int, channels: int, spatial_dims,
                 rng: np.random.Generator, dtype=np.float32, init_std: float = 0.05):
        self.level = level
        self.ctx_dim = ctx_dim
        self.channels = channels
        self.spatial_dims = tuple(spatial_dims)
        dt = np.dtype(dtype)
        self.w_proj, self.b_proj = _linear_params(rng, ctx_dim, channels, 1.0 / math.sqrt(ctx_dim), dt)
        self.self_attn = _Attention(rng, channels, init_std, dt)
        self.cross_t2i = _Attention(rng, channels, init_std, dt)
        self.cross_i2t = _Attention(rng, channels, init_std, dt)
        self.w_mlp1, self.b_mlp1 = _linear_params(rng, channels, 2 * channels, init_std, dt)
        self.w_mlp2, self.b_mlp2 = _linear_params(rng, 2 * channels, channels, init_std, dt)
        self.norm_sa = _Norm(channels, dt)
        self.norm_t2i = _Norm(channels, dt)
        self.norm_mlp = _Norm(channels, dt)
        self.norm_i2t = _Norm(channels, dt)
        self.pos = Tensor(sincos_positions(self.spatial_dims, channels).astype(dt))

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {prefix + "proj.w": self.w_proj, prefix + "proj.b": self.b_proj}
        out.update(self.self_attn.params(prefix + "sa."))
        out.update(self.cross_t2i.params(prefix + "t2i."))
        out.update(self.cross_i2t.params(prefix + "i2t."))
        out.update({
            prefix + "mlp.w1": self.w_mlp1, prefix + "mlp.b1": self.b_mlp1,
            prefix + "mlp.w2": self.w_mlp2, prefix + "mlp.b2": self.b_mlp2,
        })
        out.update(self.norm_sa.params(prefix + "ln_sa."))
        out.update(self.norm_t2i.params(prefix + "ln_t2i."))
        out.update(self.norm_mlp.params(prefix + "ln_mlp."))
        out.update(self.norm_i2t.params(prefix + "ln_i2t."))
        return out

    def project_context(self, g: Tensor) -> Tensor:
        """Map context tokens [L, D] to this level's width [L, Ch]."""
        if g.ndim != 2 or g.shape[1] != self.ctx_dim:
            raise DimensionError(f"context width {g.shape} does not match D={self.ctx_dim}")
        return ops.linear(g, self.w_proj, self.b_proj)

    def fuse(self, image_tokens: Tensor, g: Tensor) -> Tensor:
        """Two-way attention; returns image tokens with unchanged shape."""
        if image_tokens.shape[0] == 0 or g.shape[0] == 0:
            raise ContractError("fuse requires at least one token on each side")
        if image_tokens.shape != (int(np.prod(self.spatial_dims)), self.channels):
            raise DimensionError(
                f"image tokens {image_tokens.shape} do not match level grid "
                f"{self.spatial_dims} x {self.channels}")
        t = self.project_context(g)
        x = image_tokens
        x_pos = ops.add(x, self.pos)

        a = self.norm_sa(t)
        t = ops.add(t, self.self_attn(a, a, a))

        a = self.norm_t2i(t)
        t = ops.add(t, self.cross_t2i(a, x_pos, x))

        a = self.norm_mlp(t)
        h = ops.relu(ops.linear(a, self.w_mlp1, self.b_mlp1))
        t = ops.add(t, ops.linear(h, self.w_mlp2, self.b_mlp2))

        a = self.norm_i2t(x)
        a = ops.add(a, self.pos)
        return ops.add(x, self.cross_i2t(a, t, t))
