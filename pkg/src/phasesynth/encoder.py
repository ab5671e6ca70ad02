"""Conditional token construction.

A patch/conv feature encoder turns the (non-contrast image, tumor mask)
stack into a grid of anatomical tokens. Each synthesis step additionally
receives a learnable phase embedding and a sinusoidal encoding of the
normalized acquisition time; the two are fused by a learned linear map
into a single conditioning token appended to the grid.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, ContractError, DomainError

PHASE_INDEX = {"art": 0, "pv": 1, "delay": 2}


@dataclass
class EncoderConfig:
    patch_size: int = 8
    embed_dim: int = 64
    depth: int = 2

    def validate(self, image_size):
        if image_size % self.patch_size != 0:
            raise ConfigError(f"image size {image_size} not divisible by patch size {self.patch_size}")
        if self.embed_dim % 2 != 0:
            raise ConfigError("embed_dim must be even")

    def token_count(self, image_size):
        return (image_size // self.patch_size) ** 2


@dataclass
class TimeEncodingConfig:
    omega: float = math.pi

    def validate(self):
        if self.omega <= 0:
            raise ConfigError("omega must be positive")


@dataclass
class ConditionalToken:
    tokens: ad.Tensor  # (N+1, D) assembled sequence, or (N, D) without conditioning
    time: float  # normalized acquisition time, also the decay stamp
    t_time: np.ndarray  # (2,)
    has_condition_token: bool


def patchify(images, patch_size):
    """Stack of (H, W) channel images -> (N, channels * patch_size**2), row-major patches."""
    chans = [np.asarray(img, dtype=np.float64) for img in images]
    h, w = chans[0].shape
    g = h // patch_size
    flat = []
    for img in chans:
        p = img.reshape(g, patch_size, g, patch_size).transpose(0, 2, 1, 3).reshape(g * g, patch_size ** 2)
        flat.append(p)
    return np.concatenate(flat, axis=1)


def neighbor_mix_matrix(grid):
    """Constant (N, N) operator averaging each token with its 4-neighbors."""
    n = grid * grid
    a = np.zeros((n, n))
    for r in range(grid):
        for c in range(grid):
            i = r * grid + c
            neigh = [i]
            if r > 0:
                neigh.append(i - grid)
            if r < grid - 1:
                neigh.append(i + grid)
            if c > 0:
                neigh.append(i - 1)
            if c < grid - 1:
                neigh.append(i + 1)
            for j in neigh:
                a[i, j] = 1.0 / len(neigh)
    return a


def encode_features(ncmri, tumor_mask, cfg, params):
    """(ncmri, mask) -> token grid t_OT of shape (N, D)."""
    ncmri = np.asarray(ncmri, dtype=np.float64)
    tumor_mask = np.asarray(tumor_mask, dtype=np.float64)
    if ncmri.shape != tumor_mask.shape:
        raise ContractError(f"image/mask shape mismatch: {ncmri.shape} vs {tumor_mask.shape}")
    cfg.validate(ncmri.shape[0])
    grid = ncmri.shape[0] // cfg.patch_size
    # third channel: image gated by the mask, so lesion-interior intensity
    # reaches the tokens free of any background contribution
    patches = ad.Tensor(patchify([ncmri, tumor_mask, ncmri * tumor_mask], cfg.patch_size))
    x = ad.linear(patches, params["enc.patch_w"], params["enc.patch_b"])
    mix = ad.Tensor(neighbor_mix_matrix(grid))
    for s in range(cfg.depth):
        h = ad.relu(ad.linear(x, params[f"enc.mix{s}_w"], params[f"enc.mix{s}_b"]))
        x = ad.add(x, ad.matmul(mix, h))
    return ad.linear(x, params["enc.proj_w"], params["enc.proj_b"])


def time_encoding(t, omega=math.pi):
    """Continuous time token [sin(omega t), cos(omega t)]; unit norm."""
    if not 0.0 <= t <= 1.0:
        raise DomainError(f"normalized time {t} outside [0,1]")
    return np.array([math.sin(omega * t), math.cos(omega * t)])


def phase_embedding(phase, params):
    idx = PHASE_INDEX[phase] if isinstance(phase, str) else int(phase)
    return ad.embedding_lookup(params["enc.phase_table"], idx)


def build_conditional_token(t_ot, phase, t, cfg, params, omega=math.pi,
                            use_phase=True, use_time=True):
    """Assemble [t_OT, fused(phase, time)] for one synthesis step.

    use_phase / use_time implement the conditioning ablations: with both
    off the sequence is the bare token grid.
    """
    t_enc = time_encoding(t, omega)
    if not (use_phase or use_time):
        return ConditionalToken(tokens=t_ot, time=t, t_time=t_enc, has_condition_token=False)
    t_phase = phase_embedding(phase, params)
    parts = [t_phase, ad.Tensor(t_enc if use_time else np.zeros(2))]
    fused = ad.linear(ad.concat(parts, axis=0), params["enc.fuse_w"], params["enc.fuse_b"])
    if fused.shape[0] != t_ot.shape[1]:
        raise ContractError("fused condition token width differs from token grid width")
    tokens = ad.concat([t_ot, ad.reshape(fused, (1, -1))], axis=0)
    return ConditionalToken(tokens=tokens, time=t, t_time=t_enc, has_condition_token=True)
