"""State reconstruction head and the self-supervised objective."""

from dataclasses import dataclass

import numpy as np

from .corruption import CorruptionSpec, apply
from .errors import ParameterError, ShapeError
from .frontend import Recording, build_state_sequence
from .spd_geometry import spd_exp, spd_log

SQRT2 = np.sqrt(2.0)


def tangent_dim(n_channels):
    return n_channels * (n_channels + 1) // 2


def n_channels_from_dim(d):
    C = int(round((np.sqrt(8 * d + 1) - 1) / 2))
    if C * (C + 1) // 2 != d:
        raise ShapeError(f"{d} is not a triangular number")
    return C


def _vech_weights(C):
    rows, cols = np.triu_indices(C)
    return rows, cols, np.where(rows == cols, 1.0, SQRT2)


def vech(S):
    """Upper triangle of symmetric ``S`` with off-diagonals scaled by sqrt(2)."""
    S = np.asarray(S, dtype=np.float64)
    rows, cols, w = _vech_weights(S.shape[-1])
    return S[..., rows, cols] * w


def unvech(v):
    v = np.asarray(v, dtype=np.float64)
    C = n_channels_from_dim(v.shape[-1])
    rows, cols, w = _vech_weights(C)
    S = np.zeros(v.shape[:-1] + (C, C))
    S[..., rows, cols] = v / w
    S[..., cols, rows] = v / w
    return S


def vech_backward(grad_v, C):
    """Gradient w.r.t. ``S`` of a scalar through ``vech(S)`` (upper entries only)."""
    rows, cols, w = _vech_weights(C)
    G = np.zeros(grad_v.shape[:-1] + (C, C))
    G[..., rows, cols] = grad_v * w
    return G


def unvech_backward(grad_S):
    """Gradient w.r.t. ``v`` of a scalar through ``unvech(v)``."""
    C = grad_S.shape[-1]
    rows, cols, w = _vech_weights(C)
    sym = grad_S + np.swapaxes(grad_S, -1, -2)
    diag = rows == cols
    g = sym[..., rows, cols] / w
    return np.where(diag, 0.5 * g, g)


def tangent_vectorize(P):
    """Isometric flattening of ``log P``: Euclidean distances between vectors
    equal Log-Euclidean distances between matrices."""
    return vech(spd_log(P))


def tangent_devectorize(v):
    return spd_exp(unvech(v))


@dataclass
class ReconHead:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    @classmethod
    def init(cls, n_channels, rng, width_mult=4):
        d = tangent_dim(n_channels)
        h = width_mult * d
        return cls(
            w1=rng.standard_normal((d, h)) / np.sqrt(d),
            b1=np.zeros(h),
            w2=rng.standard_normal((h, d)) / np.sqrt(h),
            b2=np.zeros(d),
        )

    @classmethod
    def zeros(cls, n_channels, width_mult=4):
        d = tangent_dim(n_channels)
        h = width_mult * d
        return cls(np.zeros((d, h)), np.zeros(h), np.zeros((h, d)), np.zeros(d))

    def tangent_forward(self, v):
        hidden = np.tanh(v @ self.w1 + self.b1)
        return hidden @ self.w2 + self.b2, hidden


def reconstruct(head: ReconHead, attended):
    """Map each attended state to a reconstructed SPD state."""
    out, _ = head.tangent_forward(tangent_vectorize(attended))
    return tangent_devectorize(out)


def recon_loss(recon, target, domain="log"):
    """Mean squared reconstruction error over a state sequence.

    ``domain="log"`` averages squared Log-Euclidean distances; ``"euclid"``
    averages squared Frobenius distances of the matrices themselves.
    """
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ShapeError(f"sequence shapes differ: {recon.shape} vs {target.shape}")
    if domain == "log":
        diff = spd_log(recon) - spd_log(target)
    elif domain == "euclid":
        diff = recon - target
    else:
        raise ParameterError(f"unknown loss domain {domain!r}")
    per_state = np.sum(diff * diff, axis=(-2, -1))
    return float(np.mean(per_state))


def pretrain_target_and_input(x: Recording, spec: CorruptionSpec, frontend, layout, **kwargs):
    """Masked input recording and the intact-signal target state sequence.

    ``kwargs`` are forwarded to :func:`build_state_sequence` for the target.
    """
    masked, _ = apply(spec, x)
    target = build_state_sequence(frontend, layout, x, **kwargs)
    return masked, target

