"""Three-model assembly and every loss the training loop needs.

The student classifier carries a softmax head; its EMA teacher shares the
architecture. The latent pair maps the student's last hidden activation to a
physical parameter estimate and back: z = enc(latent), recon = dec(z). The
constraint loss is the Gaussian-KL reconstruction term ||recon - latent||^2 /
(2 sigma^2), batch-averaged, plus the bounded constraint penalty on z; its
gradient reaches the student latent through the encoder input and through the
reconstruction target.

All classification losses return fused gradients w.r.t. logits, ready for
`neural.backward`; teachers are constants (their parameters never receive
gradient through any loss here).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import constraints as cn
from .neural import Network, ParamGrads, backward, build_network, clone_network, forward
from .numkit import Matrix, Rng

PROB_FLOOR = 1e-12  # sole numeric guard before logs

# init-stream tags (children of the training seed)
TAG_INIT_PRIMARY = 11
TAG_INIT_ENCODER = 12
TAG_INIT_DECODER = 13


@dataclass
class HybridModel:
    primary: Network
    secondary: Network
    latent_encoder: Network
    latent_decoder: Network

    def __post_init__(self):
        if self.primary.arch() != self.secondary.arch():
            raise ValueError("primary/secondary architectures must match")
        lw = self.primary.latent_width
        if self.latent_encoder.in_width != lw or self.latent_decoder.out_width != lw:
            raise ValueError("encoder input and decoder output must equal the latent width")
        if self.latent_encoder.out_width != self.latent_decoder.in_width:
            raise ValueError("encoder output width must equal decoder input width")


def build_hybrid(
    input_dim: int,
    class_count: int,
    rng: Rng,
    hidden: tuple = (128, 64, 32),
    enc_hidden: tuple = (64, 32),
    z_dim: int = cn.Z_DIM,
) -> HybridModel:
    """Default shapes: 4-layer relu classifier, 3-layer latent encoder and its
    mirror decoder. The teacher starts as an exact copy of the student."""
    widths = [input_dim, *hidden, class_count]
    acts = ["relu"] * len(hidden) + ["identity"]
    primary = build_network(widths, acts, "softmax", rng.child(TAG_INIT_PRIMARY))
    latent = hidden[-1]
    enc_widths = [latent, *enc_hidden, z_dim]
    enc_acts = ["relu"] * len(enc_hidden) + ["identity"]
    encoder = build_network(enc_widths, enc_acts, "identity", rng.child(TAG_INIT_ENCODER))
    dec_widths = list(reversed(enc_widths))
    decoder = build_network(dec_widths, enc_acts, "identity", rng.child(TAG_INIT_DECODER))
    return HybridModel(
        primary=primary,
        secondary=clone_network(primary),
        latent_encoder=encoder,
        latent_decoder=decoder,
    )


@dataclass
class RampUp:
    alpha_max: float = 1.0
    ramp_epochs: int = 30
    shape: str = "sigmoid_exp"

    def __post_init__(self):
        if self.shape not in ("sigmoid_exp", "linear"):
            raise ValueError(f"unknown ramp shape {self.shape!r}")


def ramp(ramp_up: RampUp, epoch: int) -> float:
    """Unlabeled-loss weight schedule; flat at alpha_max past ramp_epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    if ramp_up.alpha_max == 0.0:
        return 0.0
    t_r = ramp_up.ramp_epochs
    if t_r <= 0 or epoch >= t_r:
        return ramp_up.alpha_max
    frac = epoch / t_r
    if ramp_up.shape == "linear":
        return ramp_up.alpha_max * frac
    return ramp_up.alpha_max * math.exp(-5.0 * (1.0 - frac) ** 2)


@dataclass
class LossBreakdown:
    l1: float = 0.0
    l2: float = 0.0
    l3_kl: float = 0.0
    l3_penalty: float = 0.0
    total: float = 0.0

    @classmethod
    def make(cls, l1=0.0, l2=0.0, l3_kl=0.0, l3_penalty=0.0) -> "LossBreakdown":
        return cls(l1=l1, l2=l2, l3_kl=l3_kl, l3_penalty=l3_penalty, total=l1 + l2 + l3_kl + l3_penalty)


def _one_hot(labels: np.ndarray, class_count: int) -> Matrix:
    if np.any(labels < 0) or np.any(labels >= class_count):
        raise ValueError("label out of range")
    out = np.zeros((len(labels), class_count))
    out[np.arange(len(labels)), labels] = 1.0
    return out


def loss_supervised(probs: Matrix, labels: np.ndarray, mask_labeled: np.ndarray) -> tuple[float, Matrix]:
    """Mean labeled-row cross-entropy; fused gradient w.r.t. logits."""
    grad = np.zeros_like(probs)
    idx = np.nonzero(mask_labeled)[0]
    if len(idx) == 0:
        return 0.0, grad
    y = _one_hot(labels[idx], probs.shape[1])
    p = probs[idx]
    loss = float(-(y * np.log(np.maximum(p, PROB_FLOOR))).sum(axis=1).mean())
    grad[idx] = (p - y) / len(idx)
    return loss, grad


def loss_consistency(student_probs: Matrix, teacher_probs: Matrix, alpha_t: float) -> tuple[float, Matrix]:
    """alpha * mean KL(teacher || student); teacher is a constant."""
    if alpha_t == 0.0:
        return 0.0, np.zeros_like(student_probs)
    t = np.maximum(teacher_probs, PROB_FLOOR)
    s = np.maximum(student_probs, PROB_FLOOR)
    kl = (teacher_probs * (np.log(t) - np.log(s))).sum(axis=1)
    loss = float(alpha_t * kl.mean())
    grad = alpha_t / student_probs.shape[0] * (student_probs - teacher_probs)
    return loss, grad


def loss_constraint(
    latent: Matrix,
    encoder: Network,
    decoder: Network,
    spec: cn.ConstraintSpec,
    traces,
    known: cn.KnownParams,
    sigma: float,
):
    """Constraint loss on a batch of latents and their trace windows.

    Returns (l3_kl, l3_penalty, encoder grads, decoder grads, grad w.r.t. the
    latent). sigma = inf switches the reconstruction term off exactly.
    """
    b = latent.shape[0]
    inv = 0.0 if math.isinf(sigma) else 1.0 / (2.0 * sigma * sigma)
    enc_trace = forward(encoder, latent)
    z_hat = enc_trace.output
    dec_trace = forward(decoder, z_hat)
    recon = dec_trace.output

    diff = recon - latent
    l3_kl = float(inv * (diff**2).sum() / b)
    pen, dpen_dz, _ = cn.penalty_batch(spec, z_hat, traces, known)

    grad_recon = (2.0 * inv / b) * diff
    dec_grads = backward(decoder, dec_trace, grad_recon)
    grad_z = dec_grads.input_grad + dpen_dz
    enc_grads = backward(encoder, enc_trace, grad_z)
    grad_latent = enc_grads.input_grad - grad_recon  # encoder path + recon target path
    return l3_kl, pen, enc_grads, dec_grads, grad_latent


def baseline_loss(
    probs_labeled: Matrix,
    labels: np.ndarray,
    probs_unlabeled: Matrix,
    pseudo_labels: np.ndarray,
    alpha_t: float,
) -> tuple[float, Matrix, Matrix]:
    """Pseudo-label objective: labeled cross-entropy plus alpha-weighted
    cross-entropy against one-hot pseudo labels on the unlabeled rows."""
    grad_lab = np.zeros_like(probs_labeled)
    grad_unl = np.zeros_like(probs_unlabeled)
    total = 0.0
    n = probs_labeled.shape[0]
    if n > 0:
        y = _one_hot(labels, probs_labeled.shape[1])
        total += float(-(y * np.log(np.maximum(probs_labeled, PROB_FLOOR))).sum(axis=1).mean())
        grad_lab = (probs_labeled - y) / n
    n_u = probs_unlabeled.shape[0]
    if n_u > 0 and alpha_t != 0.0:
        y_u = _one_hot(pseudo_labels, probs_unlabeled.shape[1])
        total += float(alpha_t * -(y_u * np.log(np.maximum(probs_unlabeled, PROB_FLOOR))).sum(axis=1).mean())
        grad_unl = alpha_t * (probs_unlabeled - y_u) / n_u
    return total, grad_lab, grad_unl


def merge_logit_grads(*grads: Matrix) -> Matrix:
    out = grads[0].copy()
    for g in grads[1:]:
        out += g
    return out


def scale_grads(grads: ParamGrads, factor: float) -> ParamGrads:
    return ParamGrads(
        weights=[None if g is None else factor * g for g in grads.weights],
        biases=[None if g is None else factor * g for g in grads.biases],
        input_grad=factor * grads.input_grad,
    )
