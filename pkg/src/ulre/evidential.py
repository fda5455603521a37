"""Dirichlet evidence arithmetic for the binary in/out-of-distribution task:
belief parameters, uncertainty, likelihood-ratio scores, training losses and
their analytic gradients, plus the sigmoid/cross-entropy baseline.

Class index 0 is in-distribution, index 1 is out-of-distribution, everywhere
in this package. All functions are vectorized over leading axes; the class
axis is last and always has length 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numkernel import digamma, lgamma, trigamma

__all__ = [
    "LOGIT_CLAMP",
    "PROB_EPS",
    "LossBreakdown",
    "evidence_from_logits",
    "dirichlet_from_evidence",
    "strength",
    "vacuity",
    "expected_prob",
    "lr_score",
    "lr_from_sigmoid",
    "one_hot",
    "lambda_schedule",
    "edl_log_loss",
    "edl_kl_reg",
    "dirichlet_kl_to_uniform",
    "edl_total_loss",
    "edl_loss_grad",
    "sigmoid",
    "bce_loss",
    "bce_loss_from_logit",
    "bce_grad_from_logit",
    "binary_entropy",
]

LOGIT_CLAMP = 30.0  # exp(30) ~ 1.07e13: evidence stays finite, range untouched
PROB_EPS = 1e-12  # probability clamp for the sigmoid/odds path


@dataclass(frozen=True)
class LossBreakdown:
    """Total loss split into its fit and regularization terms.

    total = log_loss + lambda_t * kl_reg, elementwise over whatever leading
    shape the inputs carried.
    """

    log_loss: np.ndarray
    kl_reg: np.ndarray
    lambda_t: float
    total: np.ndarray


def evidence_from_logits(o) -> np.ndarray:
    """Per-class evidence exp(o) with logits clamped to +-LOGIT_CLAMP."""
    o = np.asarray(o, dtype=np.float64)
    if np.isnan(o).any():
        raise ValueError("evidence_from_logits: logits contain NaN")
    return np.exp(np.clip(o, -LOGIT_CLAMP, LOGIT_CLAMP))


def dirichlet_from_evidence(e) -> np.ndarray:
    """Concentration parameters alpha = evidence + 1 (non-degenerate)."""
    return np.asarray(e, dtype=np.float64) + 1.0


def strength(alpha) -> np.ndarray:
    return np.asarray(alpha, dtype=np.float64).sum(axis=-1)


def vacuity(alpha) -> np.ndarray:
    """Uncertainty from lack of evidence: 2/S, in (0, 1]; 1 iff alpha=(1,1)."""
    return 2.0 / strength(alpha)


def expected_prob(alpha) -> np.ndarray:
    """Mean of the Dirichlet: alpha / S. Rows sum to one."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return alpha / alpha.sum(axis=-1, keepdims=True)


def lr_score(alpha) -> np.ndarray:
    """Likelihood-ratio score alpha_1 / alpha_0 (== p1/p0; S cancels)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    return alpha[..., 1] / alpha[..., 0]


def lr_from_sigmoid(p1) -> np.ndarray:
    """Odds p/(1-p) for the sigmoid baseline, with p clamped away from 0/1."""
    p = np.clip(np.asarray(p1, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return p / (1.0 - p)


def one_hot(labels) -> np.ndarray:
    """Integer labels {0,1} -> one-hot rows (..., 2)."""
    y = np.asarray(labels)
    if not np.isin(y, (0, 1)).all():
        raise ValueError("one_hot: labels must be 0 or 1")
    out = np.zeros(y.shape + (2,), dtype=np.float64)
    np.put_along_axis(out, y[..., None].astype(np.intp), 1.0, axis=-1)
    return out


def lambda_schedule(epoch: int) -> float:
    """Annealing coefficient min(1, t/10), 0-based epoch counter."""
    if epoch < 0:
        raise ValueError("lambda_schedule: epoch must be >= 0")
    return min(1.0, epoch / 10.0)


def edl_log_loss(alpha, y) -> np.ndarray:
    """Marginal-likelihood log loss: sum_k y_k (log S - log alpha_k)."""
    alpha = np.asarray(alpha, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    s = alpha.sum(axis=-1, keepdims=True)
    return (y * (np.log(s) - np.log(alpha))).sum(axis=-1)


def dirichlet_kl_to_uniform(alpha_tilde) -> np.ndarray:
    """Closed-form KL(Dir(a) || Dir(1,1)); log Gamma(K) = 0 for K = 2."""
    alpha_tilde = np.asarray(alpha_tilde, dtype=np.float64)
    s = alpha_tilde.sum(axis=-1, keepdims=True)
    term = (alpha_tilde - 1.0) * (digamma(alpha_tilde) - digamma(s))
    head = np.asarray(lgamma(s))[..., 0]
    return head - np.asarray(lgamma(alpha_tilde)).sum(axis=-1) + term.sum(axis=-1)


def edl_kl_reg(alpha, y) -> np.ndarray:
    """Evidence regularizer: KL to uniform after removing correct evidence.

    alpha_tilde = y + (1 - y) * alpha, i.e. the correct-class entry is
    forced to 1 and the incorrect-class entry keeps its concentration.
    Nonnegative; zero exactly when alpha_tilde = (1, 1).
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    alpha_tilde = y + (1.0 - y) * alpha
    return np.maximum(dirichlet_kl_to_uniform(alpha_tilde), 0.0)


def edl_total_loss(alpha, y, epoch: int) -> LossBreakdown:
    """Annealed total loss: log_loss + min(1, epoch/10) * kl_reg."""
    lam = lambda_schedule(epoch)
    log_loss = edl_log_loss(alpha, y)
    kl = edl_kl_reg(alpha, y)
    return LossBreakdown(log_loss, kl, lam, log_loss + lam * kl)


def edl_loss_grad(o, y, epoch: int) -> np.ndarray:
    """d(total loss)/d(logits), elementwise over (..., 2) logit rows.

    Chain rule through e = exp(clamp(o)) and alpha = e + 1; zero outside the
    clamp range. Matches central finite differences away from the clamp.
    """
    o = np.asarray(o, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    lam = lambda_schedule(epoch)
    e = evidence_from_logits(o)
    alpha = e + 1.0
    s = alpha.sum(axis=-1, keepdims=True)
    dlog = 1.0 / s - y / alpha
    alpha_tilde = y + (1.0 - y) * alpha
    s_tilde = alpha_tilde.sum(axis=-1, keepdims=True)
    dkl_datilde = (alpha_tilde - 1.0) * trigamma(alpha_tilde) - trigamma(
        s_tilde
    ) * (s_tilde - 2.0)
    dkl = (1.0 - y) * dkl_datilde
    passthrough = (np.abs(o) <= LOGIT_CLAMP).astype(np.float64)
    return e * (dlog + lam * dkl) * passthrough


def sigmoid(z) -> np.ndarray:
    """Numerically stable logistic function."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_loss(p1, y) -> np.ndarray:
    """Binary cross entropy -[y1 log p + y0 log(1-p)], p clamped."""
    p = np.clip(np.asarray(p1, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    y = np.asarray(y, dtype=np.float64)
    return -(y[..., 1] * np.log(p) + y[..., 0] * np.log1p(-p))


def bce_loss_from_logit(z, y1) -> np.ndarray:
    """BCE evaluated from the raw logit (softplus form, overflow-safe)."""
    z = np.asarray(z, dtype=np.float64)
    y1 = np.asarray(y1, dtype=np.float64)
    return np.maximum(z, 0.0) - z * y1 + np.log1p(np.exp(-np.abs(z)))


def bce_grad_from_logit(z, y1) -> np.ndarray:
    """d BCE / d logit = sigmoid(z) - y1."""
    return sigmoid(z) - np.asarray(y1, dtype=np.float64)


def binary_entropy(p1) -> np.ndarray:
    """Entropy of a Bernoulli(p) in nats, the baseline uncertainty measure."""
    p = np.clip(np.asarray(p1, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
    return -(p * np.log(p) + (1.0 - p) * np.log1p(-p))
