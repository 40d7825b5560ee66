"""Training objectives: supervised cross-entropy on the summed adapter outputs,
Gaussian-noise augmentation, and the within-/cross-adapter contrastive losses.

The contrastive denominators follow the fusion model's definition: only
negatives (k != i) are summed, and for the within-adapter loss they are
taken against the *un-augmented* batch.  Because the positive pair is not
part of the denominator these losses can be negative.  ``standard=True``
switches to ordinary InfoNCE (positive included, negatives drawn from the
augmented view).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as tf
from .encoders import masked_mean
from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor

VARIANTS = ("dual", "time_only", "text_only")


@dataclass
class LossConfig:
    tau: float = 0.1
    noise_sigma: float = 0.1
    standard: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ContractError(f"temperature must be positive, got {self.tau}")
        if self.noise_sigma < 0:
            raise ContractError("noise_sigma must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def pool(H: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Mean over token positions: (n, D) -> (1, D), (B, n, D) -> (B, 1, D)."""
    if H.shape[-2] < 1:
        raise ShapeError("cannot pool an empty sequence")
    return masked_mean(H, mask)


def classifier_logits(h: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return tf.linear(h, W, b)


def supervised_loss(h_s: Tensor | None, h_t: Tensor | None, W: Tensor, b: Tensor, labels) -> Tensor:
    """Cross-entropy of a linear classifier on h_s + h_t (either may be None for single-adapter variants)."""
    parts = [h for h in (h_s, h_t) if h is not None]
    if not parts:
        raise ContractError("supervised_loss needs at least one adapter output")
    h = parts[0] if len(parts) == 1 else parts[0] + parts[1]
    h = h.reshape(-1, h.shape[-1])
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n_classes = W.shape[-1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ContractError(f"label out of range [0, {n_classes})")
    return tf.cross_entropy(classifier_logits(h, W, b), labels)


# -- augmentation -------------------------------------------------------------

def augment(X: np.ndarray, E_s: np.ndarray | None, noise_sigma: float, rng: np.random.Generator,
            mask: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray | None]:
    """Corrupt one sample (or a batch) with Gaussian noise.

    The series gets i.i.d. noise with std ``noise_sigma`` times the per-channel
    std of X.  Text is discrete, so its noise goes onto the token embeddings,
    scaled by ``noise_sigma`` times the std of that sample's embedding entries.
    Padded positions (``mask`` False) are left untouched.
    """
    X = np.asarray(X)
    ch_std = X.std(axis=-2, keepdims=True)
    X_aug = X + rng.standard_normal(X.shape).astype(X.dtype) * (noise_sigma * ch_std).astype(X.dtype)
    if E_s is None:
        return X_aug, None
    E_s = np.asarray(E_s)
    m = np.ones(E_s.shape[:-1], dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    m3 = m[..., None]
    n_real = np.maximum(m3.sum(axis=(-2, -1), keepdims=True) * E_s.shape[-1], 1)
    mu = (E_s * m3).sum(axis=(-2, -1), keepdims=True) / n_real
    std = np.sqrt((((E_s - mu) * m3) ** 2).sum(axis=(-2, -1), keepdims=True) / n_real)
    noise = rng.standard_normal(E_s.shape).astype(E_s.dtype) * (noise_sigma * std).astype(E_s.dtype)
    return X_aug, E_s + noise * m3


# -- contrastive losses ---------------------------------------------------------

def l2_normalize(H: Tensor) -> Tensor:
    norms = np.sqrt((H.data * H.data).sum(axis=-1))
    if np.any(norms == 0):
        raise NumericError("cannot l2-normalise a zero vector")
    return H / tf.sqrt((H * H).sum(axis=-1, keepdims=True))


def _as_batch(H: Tensor) -> Tensor:
    if H.ndim == 3 and H.shape[1] == 1:
        H = H.reshape(H.shape[0], H.shape[2])
    if H.ndim != 2:
        raise ShapeError(f"expected a (B, D) batch of pooled embeddings, got {H.shape}")
    return H


def _check_batch(*Hs: Tensor) -> int:
    B = Hs[0].shape[0]
    if B < 2:
        raise ContractError(f"contrastive losses need a batch of at least 2, got {B}")
    for H in Hs[1:]:
        if H.shape != Hs[0].shape:
            raise ShapeError(f"batch shapes differ: {Hs[0].shape} vs {H.shape}")
    return B


def _log_sum_exp_off_diagonal(S: Tensor) -> Tensor:
    """log sum_{k != i} exp(S[i, k]) for each row i."""
    B = S.shape[0]
    off = np.ones((B, B), dtype=S.dtype) - np.eye(B, dtype=S.dtype)
    shift = (S.data * off + np.where(off > 0, 0.0, -np.inf)).max(axis=1, keepdims=True)
    # diagonal entries are zeroed before exp so they cannot overflow
    return tf.log((tf.exp((S - shift) * off) * off).sum(axis=1)) + shift.reshape(-1)


def _diag(S: Tensor) -> Tensor:
    B = S.shape[0]
    return (S * np.eye(B, dtype=S.dtype)).sum(axis=1)


def within_adapter_loss(H: Tensor, H_aug: Tensor, tau: float, standard: bool = False) -> Tensor:
    H, H_aug = _as_batch(H), _as_batch(H_aug)
    _check_batch(H, H_aug)
    z, z_aug = l2_normalize(H), l2_normalize(H_aug)
    positive = (z * z_aug).sum(axis=1) * (1.0 / tau)
    if standard:
        logits = tf.matmul(z, z_aug.T) * (1.0 / tau)
        return -(positive - _log_sum_exp_rows(logits)).sum()
    S = tf.matmul(z, z.T) * (1.0 / tau)
    return -(positive - _log_sum_exp_off_diagonal(S)).sum()


def _log_sum_exp_rows(S: Tensor) -> Tensor:
    shift = S.data.max(axis=1, keepdims=True)
    return tf.log(tf.exp(S - shift).sum(axis=1)) + shift.reshape(-1)


def cross_adapter_loss(H_s: Tensor, H_t: Tensor, tau: float, standard: bool = False) -> Tensor:
    H_s, H_t = _as_batch(H_s), _as_batch(H_t)
    _check_batch(H_s, H_t)
    S = tf.matmul(l2_normalize(H_s), l2_normalize(H_t).T) * (1.0 / tau)
    St = S.T
    positive = _diag(S)
    lse = _log_sum_exp_rows if standard else _log_sum_exp_off_diagonal
    return -((positive - lse(S)) + (positive - lse(St))).sum()


def unsup_total(H_s, H_s_aug, H_t, H_t_aug, tau: float, variant: str = "dual",
                standard: bool = False) -> Tensor:
    """L_s + L_t + L_cross for the dual model; single-adapter variants use only their within-adapter loss."""
    if variant == "text_only":
        return within_adapter_loss(H_s, H_s_aug, tau, standard)
    if variant == "time_only":
        return within_adapter_loss(H_t, H_t_aug, tau, standard)
    if variant != "dual":
        raise ContractError(f"unknown variant {variant!r}")
    return (within_adapter_loss(H_s, H_s_aug, tau, standard)
            + within_adapter_loss(H_t, H_t_aug, tau, standard)
            + cross_adapter_loss(H_s, H_t, tau, standard))
