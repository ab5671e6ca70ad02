"""Autoregressive multi-phase synthesis core.

One forward pass encodes the non-contrast inputs once, then synthesizes
the three contrast phases strictly in time order. Each step attends over
the current conditional tokens plus the token blocks retained from
earlier phases (the model's own outputs; no teacher forcing), decodes an
image, segmentation logits, and a pooled feature vector, and keeps the
updated conditional block as context for later phases.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import tcc as tcc_mod
from .attention import DtamConfig, PhaseTokenState, mmhsa_block
from .encoder import (EncoderConfig, build_conditional_token, encode_features,
                      time_encoding)
from .errors import ContractError
from .phantom import PHASE_NAMES
from .tcc import SignalNetConfig

# ablation -> (gaussian decay, phase token, time token, TCC participates)
ABLATIONS = {
    "full": (True, True, True, True),
    "no_dtam": (False, True, True, True),
    "no_cte": (True, False, False, True),
    "no_t_encoding": (True, True, False, True),
    "baseline": (False, False, False, False),
}


@dataclass
class ModelConfig:
    image_size: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    dtam: DtamConfig = field(default_factory=DtamConfig)
    signal: SignalNetConfig = field(default_factory=SignalNetConfig)
    omega: float = math.pi

    def validate(self):
        self.encoder.validate(self.image_size)
        self.dtam.validate(self.encoder.embed_dim)
        self.signal.validate()

    def echo(self):
        return {
            "image_size": self.image_size,
            "patch_size": self.encoder.patch_size,
            "embed_dim": self.encoder.embed_dim,
            "depth": self.encoder.depth,
            "sigma": self.dtam.sigma,
            "head_count": self.dtam.head_count,
            "latent_width": self.signal.latent_width,
            "hidden": list(self.signal.hidden),
            "tau": self.signal.tau,
            "omega": self.omega,
        }

    @classmethod
    def from_echo(cls, d):
        return cls(
            image_size=int(d["image_size"]),
            encoder=EncoderConfig(int(d["patch_size"]), int(d["embed_dim"]), int(d["depth"])),
            dtam=DtamConfig(float(d["sigma"]), int(d["head_count"])),
            signal=SignalNetConfig(int(d["latent_width"]), tuple(d["hidden"]), float(d["tau"])),
            omega=float(d["omega"]),
        )


@dataclass
class PhaseOutput:
    image: ad.Tensor  # (H, W) in [0,1]
    seg_logits: ad.Tensor  # (H, W)
    feature: ad.Tensor  # (D,)


@dataclass
class PredictionBundle:
    phase_outputs: list
    aggregated_mask: np.ndarray
    class_probs: ad.Tensor  # (2,) softmax over {benign, malignant}
    per_phase_cls: list  # 3 scalar Tensors
    signals: list  # 3 scalar Tensors
    signal_labels: list  # 3 ints, detached


# amplification applied to the masked-image token dims at init, keeping the
# class-discriminative lesion-intensity signal comparable in scale to the
# background-dominated image dims after mean pooling
GATE_GAIN = 8.0


def _group_average_map(n_in, n_out):
    """(n_in, n_out) matrix averaging contiguous groups; None if indivisible."""
    if n_out <= 0 or n_in % n_out != 0:
        return None
    m = n_in // n_out
    p = np.zeros((n_in, n_out))
    for j in range(n_out):
        p[j * m:(j + 1) * m, j] = 1.0 / m
    return p


def init_params(cfg, rng):
    """Seeded parameter initialization.

    The patch embedding and decoder start structure-preserving where the
    dimensions allow it: half the token dims carry a pooled copy of the
    image channel, a quarter the mask channel, an eighth the amplified
    masked image (the classification cue), and the decoder inverts the
    pooling, so the model reconstructs its input from the first step and
    training only has to learn the phase-dependent corrections.

    The remaining "carrier" dims stay empty in anatomical tokens and are
    where the conditional token writes its time/phase content. One
    attention head starts wired as a beacon: every token's query matches
    a constant marker in the conditional token's key, and the value/
    output projections pass the attended carrier content into the image
    dims as a global offset. That makes the conditioning pathway active
    from the first epoch instead of waiting for attention weights to
    grow out of zero.
    """
    cfg.validate()
    d = cfg.encoder.embed_dim
    p2 = cfg.encoder.patch_size ** 2
    n = cfg.encoder.token_count(cfg.image_size)
    c = cfg.signal.latent_width
    h1, h2, _ = cfg.signal.hidden
    head_dim = d // cfg.dtam.head_count
    half = d // 2
    mq = d // 4
    gate_n = d // 8
    cb = half + mq + gate_n  # first carrier dim
    carrier = d - cb
    pool_half = _group_average_map(p2, half)
    pool_mq = _group_average_map(p2, mq)
    pool_gate = _group_average_map(p2, gate_n)
    pooled = pool_half is not None and pool_mq is not None and pool_gate is not None
    beacon = pooled and carrier >= 4 and head_dim >= 4

    def normal(shape, std):
        return rng.normal(0.0, std, size=shape)

    patch_w = normal((3 * p2, d), 0.02)
    img_w = normal((d, p2), 0.02)
    seg_w = normal((d, p2), 0.02)
    if pooled:
        # dims [0, half): pooled image; [half, half+mq): pooled mask;
        # [half+mq, cb): amplified pooled masked image; [cb, d): carriers
        patch_w[:p2, :half] += pool_half
        patch_w[p2:2 * p2, half:half + mq] += pool_mq
        patch_w[2 * p2:, half + mq:cb] += GATE_GAIN * pool_gate
        img_w[:half, :] += 4.0 * (p2 // half) * pool_half.T
        seg_w[half:half + mq, :] += 8.0 * (p2 // mq) * pool_mq.T
        img_b = np.full(p2, -2.0)
        seg_b = np.full(p2, -2.0)
    else:
        img_b = np.zeros(p2)
        seg_b = np.zeros(p2)

    fuse_w = normal((d + 2, d), 0.1)
    fuse_b = np.zeros(d)
    q_w = normal((d, d), 0.05)
    k_w = normal((d, d), 0.05)
    v_w = normal((d, d), 0.1)
    out_w = np.zeros((d, d))
    if beacon:
        n_phase = min(carrier - 3, head_dim - 3)
        # condition token: time encoding into the first two carrier dims,
        # a constant marker into the third; keep those three columns free
        # of phase-embedding leakage
        fuse_w[:, cb:cb + 3] = 0.0
        fuse_w[d, cb] = 1.0
        fuse_w[d + 1, cb + 1] = 1.0
        fuse_b[cb + 2] = 1.0
        # head 0: queries read the (always-positive) image dims, keys the
        # marker, so every token attends to the conditional token
        q_w[:half, 0] += 3.2 / half
        k_w[cb + 2, 0] += 4.0
        # values pass only carrier content; output seeds a global image
        # offset driven by the attended time/phase content
        v_w[:, :head_dim] = 0.0
        v_w[cb, 1] = 1.0
        v_w[cb + 1, 2] = 1.0
        for i in range(n_phase):
            v_w[cb + 3 + i, 3 + i] = 1.0
        out_w[1, :half] = 0.05
        out_w[2, :half] = 0.05
        out_w[3:3 + n_phase, :half] = 0.02

    arrays = {
        "enc.patch_w": patch_w,
        "enc.patch_b": np.zeros(d),
        "enc.proj_w": np.eye(d) + normal((d, d), 0.02),
        "enc.proj_b": np.zeros(d),
        "enc.phase_table": normal((3, d), 0.5),
        "enc.fuse_w": fuse_w,
        "enc.fuse_b": fuse_b,
        "att.in_w": np.eye(d) + normal((d, d), 0.02),
        "att.in_b": np.zeros(d),
        "att.pos": normal((3 * (n + 1), d), 0.02),
        "att.q_w": q_w,
        "att.k_w": k_w,
        "att.v_w": v_w,
        "att.out_w": out_w,
        "att.out_b": np.zeros(d),
        "dec.img_w": img_w,
        "dec.img_b": img_b,
        "dec.seg_w": seg_w,
        "dec.seg_b": seg_b,
        "cls.fuse_w": np.zeros((4 * d, 2)),
        "cls.fuse_b": np.zeros(2),
        "cls.aux_w": np.zeros((d, 1)),
        "cls.aux_b": np.zeros(1),
        "tcc.latent_w": normal((d, c), 1.0 / math.sqrt(d)),
        "tcc.latent_b": np.zeros(c),
        "tcc.fc1_w": normal((c + 2, h1), 1.0 / math.sqrt(c + 2)),
        "tcc.fc1_b": np.zeros(h1),
        "tcc.fc2_w": normal((h1, h2), 1.0 / math.sqrt(h1)),
        "tcc.fc2_b": np.zeros(h2),
        "tcc.fc3_w": normal((h2, 1), 1.0 / math.sqrt(h2)),
        "tcc.fc3_b": np.zeros(1),
    }
    for s in range(cfg.encoder.depth):
        arrays[f"enc.mix{s}_w"] = normal((d, d), 0.02)
        arrays[f"enc.mix{s}_b"] = np.zeros(d)
    return {name: ad.Tensor(a, requires_grad=True) for name, a in arrays.items()}


def _depatchify(tokens, grid, patch):
    """(N, patch^2) token maps -> (H, W) image, inverse of patch flattening."""
    x = ad.reshape(tokens, (grid, grid, patch, patch))
    x = ad.transpose(x, (0, 2, 1, 3))
    return ad.reshape(x, (grid * patch, grid * patch))


def synthesize_phase(index, cond, prior_blocks, cfg, params, use_decay=True, record=None):
    """One autoregressive step. Returns (PhaseOutput, retained token block)."""
    if len(prior_blocks) != index:
        raise ContractError(f"phase {index} expects {index} prior blocks, got {len(prior_blocks)}")
    state = PhaseTokenState(blocks=[(b, t) for b, t in prior_blocks] + [(cond.tokens, cond.time)])
    state.validate()

    pieces = [cond.tokens] + [b for b, _ in prior_blocks]
    times = np.concatenate(
        [np.full(cond.tokens.shape[0], cond.time)]
        + [np.full(b.shape[0], t) for b, t in prior_blocks])
    tokens = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)

    out = mmhsa_block(tokens, times, cfg.dtam, params, use_decay=use_decay, record=record)
    n_cond = cond.tokens.shape[0]
    block = ad.slice_axis(out, 0, 0, n_cond)

    n_img = cfg.encoder.token_count(cfg.image_size)
    grid = cfg.image_size // cfg.encoder.patch_size
    img_tokens = ad.slice_axis(block, 0, 0, n_img)
    image = ad.sigmoid(_depatchify(
        ad.linear(img_tokens, params["dec.img_w"], params["dec.img_b"]),
        grid, cfg.encoder.patch_size))
    seg = _depatchify(
        ad.linear(img_tokens, params["dec.seg_w"], params["dec.seg_b"]),
        grid, cfg.encoder.patch_size)
    feature = ad.reduce_mean(block, axis=0)
    return PhaseOutput(image=image, seg_logits=seg, feature=feature), block


def aggregate_segmentation(s_art, s_pv, s_delay):
    """Per-pixel majority vote of the three thresholded segmentations."""
    maps = []
    for s in (s_art, s_pv, s_delay):
        arr = s.data if isinstance(s, ad.Tensor) else np.asarray(s)
        maps.append(arr > 0.0)  # sigmoid(logit) > 0.5 iff logit > 0
    if not (maps[0].shape == maps[1].shape == maps[2].shape):
        raise ContractError("segmentation maps differ in shape")
    votes = maps[0].astype(np.int64) + maps[1] + maps[2]
    return (votes >= 2).astype(np.uint8)


def fuse_and_classify(ncmri_feature, phase_outputs, params):
    """Fused classification head plus per-phase auxiliary probabilities."""
    if len(phase_outputs) != 3:
        raise ContractError(f"expected 3 phase outputs, got {len(phase_outputs)}")
    joint = ad.concat([ncmri_feature] + [po.feature for po in phase_outputs], axis=0)
    logits = ad.linear(joint, params["cls.fuse_w"], params["cls.fuse_b"])
    probs = ad.softmax_last_axis(logits)
    per_phase = [
        # detached feature input: the consistency loss trains only the
        # auxiliary head, never pulling on the shared synthesis trunk
        ad.reshape(ad.sigmoid(ad.linear(ad.Tensor(po.feature.data),
                                        params["cls.aux_w"], params["cls.aux_b"])), ())
        for po in phase_outputs
    ]
    return probs, per_phase


def run_autoregressive(ncmri, mask, times, params, cfg, ablation="full", record=None):
    """Full forward pass for one case; see module docstring."""
    if ablation not in ABLATIONS:
        raise ContractError(f"unknown ablation {ablation!r}")
    use_decay, use_phase, use_time, _ = ABLATIONS[ablation]
    times = tuple(times)

    t_ot = encode_features(ncmri, mask, cfg.encoder, params)
    pooled = ad.reduce_mean(t_ot, axis=0)

    phase_outputs = []
    blocks = []
    for i, (name, t) in enumerate(zip(PHASE_NAMES, times)):
        cond = build_conditional_token(
            t_ot, name, t, cfg.encoder, params, omega=cfg.omega,
            use_phase=use_phase, use_time=use_time)
        rec = {} if record is not None else None
        po, block = synthesize_phase(i, cond, blocks, cfg, params,
                                     use_decay=use_decay, record=rec)
        if record is not None:
            record.append({"phase": name, "heads": rec.get("weights", []),
                           "block_sizes": [cond.tokens.shape[0]] + [b.shape[0] for b, _ in blocks],
                           "block_times": [t] + [bt for _, bt in blocks]})
        phase_outputs.append(po)
        blocks.append((block, t))

    aggregated = aggregate_segmentation(*[po.seg_logits for po in phase_outputs])
    class_probs, per_phase = fuse_and_classify(pooled, phase_outputs, params)

    latent = ad.linear(pooled, params["tcc.latent_w"], params["tcc.latent_b"])
    signals = [
        tcc_mod.predict_signal(latent, time_encoding(t, cfg.omega), cfg.signal, params)
        for t in times
    ]
    labels = [tcc_mod.signal_label(s, cfg.signal.tau) for s in signals]

    return PredictionBundle(
        phase_outputs=phase_outputs,
        aggregated_mask=aggregated,
        class_probs=class_probs,
        per_phase_cls=per_phase,
        signals=signals,
        signal_labels=labels,
    )
