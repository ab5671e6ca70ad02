"""Temporal classification consistency.

A small fully connected network predicts the lesion enhancement signal
from the pooled non-contrast latent and the time encoding of each phase.
Thresholding that signal yields a per-phase binary label; the
consistency loss pulls the per-phase image-based classification
probabilities toward those (detached) labels.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import autodiff as ad
from .errors import ConfigError, ContractError


@dataclass
class SignalNetConfig:
    latent_width: int = 256
    hidden: tuple = (128, 64, 1)
    tau: float = 0.5

    def validate(self):
        if not 0.0 < self.tau < 1.0:
            raise ConfigError("tau must lie in (0,1)")
        if self.hidden[-1] != 1:
            raise ConfigError("signal network must end in a scalar output")


def predict_signal(latent, t_enc, cfg, params):
    """Scalar enhancement signal in [0,1] for one phase.

    latent: (C,) pooled non-contrast feature; t_enc: (2,) unit-norm time
    encoding.
    """
    if latent.shape != (cfg.latent_width,):
        raise ContractError(f"latent width {latent.shape} != ({cfg.latent_width},)")
    x = ad.concat([latent, ad.as_tensor(t_enc)], axis=0)
    x = ad.relu(ad.linear(x, params["tcc.fc1_w"], params["tcc.fc1_b"]))
    x = ad.relu(ad.linear(x, params["tcc.fc2_w"], params["tcc.fc2_b"]))
    x = ad.linear(x, params["tcc.fc3_w"], params["tcc.fc3_b"])
    return ad.reshape(ad.sigmoid(x), ())


def signal_label(signal, tau):
    """1 iff the predicted signal strictly exceeds tau. No gradient flows."""
    value = signal.item() if isinstance(signal, ad.Tensor) else float(signal)
    return 1 if value > tau else 0


def tcc_loss(per_phase_cls, signal_labels):
    """Sum of squared gaps between per-phase probabilities and signal labels.

    Labels are plain ints (detached targets); gradients reach only the
    classification probabilities.
    """
    if len(per_phase_cls) != len(signal_labels):
        raise ContractError("per-phase predictions and labels differ in length")
    total = ad.Tensor(0.0)
    for p, lab in zip(per_phase_cls, signal_labels):
        d = ad.sub(p, ad.Tensor(float(lab)))
        total = ad.add(total, ad.mul(d, d))
    return total
