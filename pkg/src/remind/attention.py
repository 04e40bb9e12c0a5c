"""Single-head attention over a sequence of SPD states.

Queries, keys and values are congruence images of the states; similarity is a
decreasing function of the Log-Euclidean distance and values are aggregated
with the weighted Log-Euclidean mean.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateMapError, ShapeError
from .spd_geometry import MIN_SINGULAR, congruence, spd_exp, spd_log


@dataclass
class AttentionParams:
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray

    def __post_init__(self):
        for name in ("w_q", "w_k", "w_v"):
            W = np.asarray(getattr(self, name), dtype=np.float64)
            if W.ndim != 2 or W.shape[0] != W.shape[1]:
                raise ShapeError(f"{name} must be square, got {W.shape}")
            if np.min(np.linalg.svd(W, compute_uv=False)) < MIN_SINGULAR:
                raise DegenerateMapError(f"{name} is rank deficient")
            setattr(self, name, W)

    @classmethod
    def near_identity(cls, n_channels, rng, scale=0.01):
        return cls(*(np.eye(n_channels) + scale * rng.standard_normal((n_channels, n_channels))
                     for _ in range(3)))


def qkv(p: AttentionParams, seq):
    """Congruence images ``(W_q G W_q^T, W_k G W_k^T, W_v G W_v^T)`` of each state."""
    seq = np.asarray(seq, dtype=np.float64)
    return congruence(p.w_q, seq), congruence(p.w_k, seq), congruence(p.w_v, seq)


def similarity_from_distance(d):
    return 1.0 / (1.0 + np.log1p(d))


def similarity_distance_grad(d):
    return -1.0 / ((1.0 + np.log1p(d)) ** 2 * (1.0 + d))


def pairwise_log_distance(log_q, log_k):
    """Frobenius distances between every query log and every key log.

    ``log_q`` and ``log_k`` have shape (..., n, C, C); result (..., n, n).
    """
    diff = log_q[..., :, None, :, :] - log_k[..., None, :, :, :]
    return np.sqrt(np.sum(diff * diff, axis=(-2, -1)))


def similarity(qi, kj):
    """``1 / (1 + ln(1 + d_LE(qi, kj)))``, a value in (0, 1]."""
    diff = spd_log(qi) - spd_log(kj)
    return similarity_from_distance(np.sqrt(np.sum(diff * diff, axis=(-2, -1))))


def row_softmax(S):
    z = S - S.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_backward(P, grad_P):
    return P * (grad_P - np.sum(grad_P * P, axis=-1, keepdims=True))


def attention_map(q_seq, k_seq):
    """Row-stochastic ``n x n`` map from Log-Euclidean similarities."""
    q_seq = np.asarray(q_seq, dtype=np.float64)
    k_seq = np.asarray(k_seq, dtype=np.float64)
    if q_seq.shape != k_seq.shape:
        raise ShapeError(f"query and key sequences differ in shape: {q_seq.shape} vs {k_seq.shape}")
    d = pairwise_log_distance(spd_log(q_seq), spd_log(k_seq))
    return row_softmax(similarity_from_distance(d))


def attend(weights, v_seq):
    """Row ``i`` of the output is the weighted Log-Euclidean mean of ``v_seq``
    under row ``i`` of ``weights``."""
    weights = np.asarray(weights, dtype=np.float64)
    v_seq = np.asarray(v_seq, dtype=np.float64)
    if weights.shape[-1] != v_seq.shape[-3]:
        raise ShapeError("attention map and value sequence lengths differ")
    return spd_exp(np.einsum("...ij,...jab->...iab", weights, spd_log(v_seq)))


def manifold_attention(p: AttentionParams, seq):
    """Full layer: returns ``(attended sequence, attention map)``."""
    q, k, v = qkv(p, seq)
    S = attention_map(q, k)
    return attend(S, v), S
