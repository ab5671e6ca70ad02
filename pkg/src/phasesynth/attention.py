"""Gaussian-decayed, causally masked multi-head self-attention.

Causality is structural: the token sequence passed in only ever contains
the current conditional block and previously generated phase blocks, so
no masking of future positions is needed. Temporal decay multiplies each
attention weight by exp(-(t_i - t_k)^2 / (2 sigma^2)) and renormalizes;
numerically this folds ln G into the logits before the stabilized
softmax, which is mathematically identical.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError


@dataclass
class DtamConfig:
    sigma: float = 0.7
    head_count: int = 4

    def validate(self, embed_dim):
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")
        if embed_dim % self.head_count != 0:
            raise ConfigError(f"embed_dim {embed_dim} not divisible by head_count {self.head_count}")


@dataclass
class PhaseTokenState:
    """Token blocks visible to the current step, oldest first.

    blocks: list of (tokens, time) pairs; the final block is the current
    phase's conditional tokens and carries the current time stamp, so its
    decay distance to itself is zero.
    """

    blocks: list

    def validate(self):
        times = [t for _, t in self.blocks]
        if times != sorted(times):
            raise ContractError("token blocks must appear in non-decreasing time order")


def gaussian_decay(t_i, t_k, sigma):
    """exp(-(t_i - t_k)^2 / (2 sigma^2)); accepts scalars or arrays."""
    if sigma <= 0:
        raise ConfigError("sigma must be positive")
    d = np.asarray(t_i, dtype=np.float64) - np.asarray(t_k, dtype=np.float64)
    out = np.exp(-(d * d) / (2.0 * sigma * sigma))
    return float(out) if out.ndim == 0 else out


def decay_log_bias(times_q, times_k, sigma):
    """ln G matrix for per-token time stamps; constant w.r.t. the tape."""
    g = gaussian_decay(np.asarray(times_q)[:, None], np.asarray(times_k)[None, :], sigma)
    return np.log(g)


def dtam_weights(queries, keys, times_q, times_k, sigma, use_decay=True):
    """Row-stochastic attention weights with Gaussian time decay.

    queries: (nq, d), keys: (nk, d); times are per-token stamps. The key
    set must already be restricted to the causal past.
    """
    if keys.shape[0] == 0:
        raise ContractError("empty key set")
    logits = ad.matmul(queries, ad.transpose(keys))
    if use_decay:
        logits = ad.add(logits, ad.Tensor(decay_log_bias(times_q, times_k, sigma)))
    return ad.softmax_last_axis(logits)


def attention_output(weights, values):
    """Weighted sum of value blocks: z = sum_k a_k v_k."""
    if weights.shape[-1] != values.shape[0]:
        raise ContractError(
            f"weight count {weights.shape[-1]} != value block count {values.shape[0]}")
    return ad.matmul(weights, values)


def mmhsa_block(tokens, token_times, cfg, params, use_decay=True, record=None):
    """Masked multi-head self-attention with position encoding and residual.

    tokens: (n, D) assembled input; token_times: per-token time stamps.
    Returns the updated (n, D) sequence (attention output + residual).
    """
    n, dim = tokens.shape
    cfg.validate(dim)
    head_dim = dim // cfg.head_count

    h = ad.linear(tokens, params["att.in_w"], params["att.in_b"])
    # absolute sequence positions: the current block always occupies the
    # leading slots, so later rows tag progressively older retained blocks
    pos = ad.slice_axis(params["att.pos"], 0, 0, n)
    h = ad.add(h, pos)

    q = ad.linear(h, params["att.q_w"])
    k = ad.linear(h, params["att.k_w"])
    v = ad.linear(h, params["att.v_w"])

    heads = []
    for i in range(cfg.head_count):
        lo, hi = i * head_dim, (i + 1) * head_dim
        w = dtam_weights(
            ad.slice_axis(q, 1, lo, hi), ad.slice_axis(k, 1, lo, hi),
            token_times, token_times, cfg.sigma, use_decay=use_decay)
        if record is not None:
            record.setdefault("weights", []).append(w.data.copy())
        heads.append(attention_output(w, ad.slice_axis(v, 1, lo, hi)))
    z = ad.concat(heads, axis=1)
    out = ad.linear(z, params["att.out_w"], params["att.out_b"])
    return ad.add(out, tokens)
