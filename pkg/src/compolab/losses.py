"""Training objectives: symmetric contrastive loss with text hard negatives
in the image-to-text denominator, token-level reconstruction through a frozen
decoder, one-directional paraphrase alignment, and their weighted sum.

All softmax denominators are evaluated in log space (log-sum-exp over
cosine/tau), and every reduction over batch items or softmax columns sums in
ascending-value order, so loss values are bit-identical under any consistent
permutation of the batch.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .tensor import (
    Tensor,
    concat,
    cosine_matrix,
    cosine_similarity,
    div,
    exp,
    log_softmax,
    mul,
    neg,
    reshape,
    sorted_mean,
    tensor_sum,
)

__all__ = [
    "LossWeights",
    "BatchTensors",
    "SimilarityMatrix",
    "similarity_matrix",
    "phi",
    "LossComponents",
    "contrastive_loss",
    "hard_negative_contrastive_loss",
    "token_reconstruction_loss",
    "sentence_alignment_loss",
    "composite_loss",
]


@dataclass(frozen=True)
class LossWeights:
    """alpha scales token reconstruction, beta scales sentence alignment."""

    alpha: float = 0.1
    beta: float = 0.5

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError(f"LossWeights: weights must be >= 0, got {self}")


@dataclass
class BatchTensors:
    """Embeddings and targets for one training batch.

    u: image embeddings (B, d); v: caption embeddings (B, d);
    v_neg: hard-negative caption embeddings (B*M, d) or None;
    v_para: paraphrase embeddings (B, d) or None;
    h: projected decoder conditioners (B, d_dec) or None;
    targets/target_lengths: (B*K, L) reconstruction targets and lengths.
    """

    u: Tensor
    v: Tensor
    v_neg: Optional[Tensor] = None
    v_para: Optional[Tensor] = None
    h: Optional[Tensor] = None
    targets: Optional[np.ndarray] = None
    target_lengths: Optional[np.ndarray] = None
    k_targets: int = 1


@dataclass(frozen=True)
class SimilarityMatrix:
    """Detached diagnostic view of pairwise similarities phi = exp(cos/tau)."""

    cos: np.ndarray
    tau: float

    @property
    def phi(self) -> np.ndarray:
        return np.exp(self.cos / self.tau)


def similarity_matrix(u, v, tau) -> SimilarityMatrix:
    from .tensor import no_grad

    with no_grad():
        c = cosine_matrix(u, v).data
    return SimilarityMatrix(cos=np.array(c), tau=_tau_value(tau))


def _tau_value(tau) -> float:
    value = float(tau.data) if isinstance(tau, Tensor) else float(tau)
    if value <= 0.0:
        raise ValueError(f"temperature must be positive, got {value}")
    return value


def _as_tau_tensor(tau) -> Tensor:
    _tau_value(tau)
    return tau if isinstance(tau, Tensor) else Tensor(float(tau))


def phi(x: Tensor, y: Tensor, tau) -> Tensor:
    """exp(cos(x, y) / tau) for two embedding vectors."""
    return exp(div(cosine_similarity(x, y), _as_tau_tensor(tau)))


def _diag_nll(logits: Tensor) -> Tensor:
    """-mean_i log_softmax(logits)[i, i] with canonical reduction order."""
    n = logits.shape[0]
    eye = np.zeros(logits.shape)
    eye[np.arange(n), np.arange(n)] = 1.0
    per_row = tensor_sum(mul(log_softmax(logits, axis=1), eye), axis=1)
    return neg(sorted_mean(per_row))


def _flatten_negatives(v_neg: Tensor, d: int) -> Tensor:
    if v_neg.data.ndim == 3:
        return reshape(v_neg, (-1, d))
    return v_neg


def _dual_contrastive(u, v, v_neg, tau, symmetric: bool) -> Tensor:
    tau = _as_tau_tensor(tau)
    d = v.shape[-1]
    if v_neg is not None and v_neg.data.size == 0:
        v_neg = None
    if v_neg is None:
        cols = v
    else:
        cols = concat([v, _flatten_negatives(v_neg, d)], axis=0)
    i2t = _diag_nll(div(cosine_matrix(u, cols), tau))

    t2i_logits = div(cosine_matrix(v, u), tau)
    if symmetric and v_neg is not None:
        b = u.shape[0]
        neg_flat = _flatten_negatives(v_neg, d)
        m = neg_flat.shape[0] // b
        # own-sample negatives scored against the row's image join the denominator
        neg_vs_img = reshape(div(cosine_matrix(neg_flat, u), tau), (b, m, b))
        pick = np.zeros((b, 1, b))
        pick[np.arange(b), 0, np.arange(b)] = 1.0
        extras = tensor_sum(mul(neg_vs_img, pick), axis=2)
        t2i_logits = concat([t2i_logits, extras], axis=1)
    t2i = _diag_nll(t2i_logits)
    return mul(i2t + t2i, 0.5)


def contrastive_loss(u: Tensor, v: Tensor, tau) -> Tensor:
    """Symmetric in-batch contrastive loss, 0.5 * (image-to-text + text-to-image)."""
    return _dual_contrastive(u, v, None, tau, symmetric=False)


def hard_negative_contrastive_loss(u: Tensor, v: Tensor, v_neg, tau,
                                   symmetric: bool = False) -> Tensor:
    """Contrastive loss whose image-to-text denominator carries every hard
    negative in the batch; the text-to-image direction stays untouched unless
    the exploratory ``symmetric`` flag is set. Reduces exactly to
    ``contrastive_loss`` when no negatives are given."""
    return _dual_contrastive(u, v, v_neg, tau, symmetric=symmetric)


def token_reconstruction_loss(h: Tensor, targets: np.ndarray, target_lengths: np.ndarray,
                              decoder, k_targets: int = 1) -> Tensor:
    """-(1/(B*K)) sum of teacher-forced sequence log-likelihoods.

    Sequence log-likelihood is a token sum, not a mean, so longer targets
    weigh more; rows of ``targets`` are ordered sample-major ((i, k) pairs).
    """
    targets = np.asarray(targets)
    if k_targets < 1:
        raise ValueError(f"token_reconstruction_loss: k_targets must be >= 1, got {k_targets}")
    n = targets.shape[0]
    b = n // k_targets
    if b * k_targets != n:
        raise ValueError(
            f"token_reconstruction_loss: {n} targets not divisible by K={k_targets}"
        )
    if k_targets == 1:
        mem = h
    else:
        d = h.shape[-1]
        mem = reshape(mul(reshape(h, (b, 1, d)), np.ones((1, k_targets, 1))), (n, d))
    lp = decoder.sequence_log_prob(mem, targets, np.asarray(target_lengths))
    return neg(sorted_mean(lp))


def sentence_alignment_loss(v: Tensor, v_para: Tensor, tau) -> Tensor:
    """One-directional pull of each caption toward its own paraphrase against
    the batch's other paraphrases."""
    return _diag_nll(div(cosine_matrix(v, v_para), _as_tau_tensor(tau)))


@dataclass
class LossComponents:
    contrastive: Tensor
    reconstruction: Optional[Tensor] = None
    alignment: Optional[Tensor] = None


def composite_loss(components: LossComponents, weights: LossWeights) -> Tensor:
    """contrastive + alpha * reconstruction + beta * alignment."""
    total = components.contrastive
    if weights.alpha != 0.0 or components.reconstruction is not None:
        if components.reconstruction is None:
            raise ValueError("composite_loss: alpha > 0 but no reconstruction component")
        total = total + mul(components.reconstruction, weights.alpha)
    if weights.beta != 0.0 or components.alignment is not None:
        if components.alignment is None:
            raise ValueError("composite_loss: beta > 0 but no alignment component")
        total = total + mul(components.alignment, weights.beta)
    return total
