"""The encoder, its two heads, and exact reverse-mode gradients.

The computation graph is fixed, so each stage caches what its adjoint needs
and :func:`encoder_backward` walks the stages in reverse. Gradients of
spectral functions (eigenvalue floor, log, exp) use divided differences on
the Jacobi eigendecomposition.
"""

from dataclasses import asdict, dataclass, fields
from typing import Optional

import numpy as np

from .attention import (
    AttentionParams,
    pairwise_log_distance,
    row_softmax,
    similarity_distance_grad,
    similarity_from_distance,
    softmax_backward,
)
from .errors import NumericError, ParameterError, ShapeError
from .frontend import (
    ElectrodeLayout,
    FrontendParams,
    add_jitter,
    correlation_backward,
    correlation_state,
    geometric_position_encoding,
    position_encoding_gain_grad,
    segment,
    temporal_conv,
    temporal_conv_kernel_grad,
)
from .recon import ReconHead, tangent_dim, unvech, unvech_backward, vech, vech_backward
from .spd_geometry import (
    DEFAULT_FLOOR,
    DEFAULT_SHRINKAGE,
    eig_apply,
    eigfunc_backward,
    exp_loewner,
    floor_loewner,
    log_loewner,
    sym_eigen,
    symmetrize,
)


@dataclass
class ModelConfig:
    n_channels: int
    n_samples: int
    n_segments: int
    d_enc: int = 8
    k_t: int = 15
    gamma: float = DEFAULT_SHRINKAGE
    eps: float = DEFAULT_FLOOR
    width_mult: int = 4
    n_classes: int = 2
    activation: Optional[str] = "tanh"
    use_filter: bool = True
    use_position: bool = True
    jitter: float = 0.0

    def __post_init__(self):
        if self.k_t < 1 or self.k_t % 2 == 0:
            raise ParameterError("temporal kernel length must be odd")
        if self.d_enc <= 0 or self.d_enc % 2:
            raise ParameterError("position encoding size must be positive and even")
        if self.n_segments < 1:
            raise ParameterError("segment count must be positive")
        L = self.n_samples // self.n_segments
        if L < self.n_channels + 1:
            raise ParameterError(
                f"segment length {L} must be at least C+1={self.n_channels + 1}"
            )
        if not 0.0 <= self.gamma < 1.0 or self.eps <= 0.0:
            raise ParameterError("need 0 <= gamma < 1 and eps > 0")
        if self.activation not in (None, "tanh"):
            raise ParameterError(f"unknown activation {self.activation!r}")
        if self.n_classes < 2:
            raise ParameterError("need at least two classes")

    @property
    def segment_length(self):
        return self.n_samples // self.n_segments

    @property
    def tangent_dim(self):
        return tangent_dim(self.n_channels)

    def to_dict(self):
        return asdict(self)


ENCODER_GROUPS = ("temporal", "spatial", "gpe_gains", "gpe_projection", "w_q", "w_k", "w_v")
RECON_GROUPS = ("rec_w1", "rec_b1", "rec_w2", "rec_b2")
CLASSIFIER_GROUPS = ("cls_w", "cls_b")


@dataclass
class ParamSet:
    """All trainable arrays. Field order is the checkpoint order.

    The same class holds gradients (a ``GradSet`` is a ``ParamSet`` of
    gradients).
    """

    temporal: np.ndarray
    spatial: np.ndarray
    gpe_gains: np.ndarray
    gpe_projection: np.ndarray
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    rec_w1: np.ndarray
    rec_b1: np.ndarray
    rec_w2: np.ndarray
    rec_b2: np.ndarray
    cls_w: np.ndarray
    cls_b: np.ndarray

    @classmethod
    def names(cls):
        return tuple(f.name for f in fields(cls))

    def items(self):
        return [(name, getattr(self, name)) for name in self.names()]

    def copy(self):
        return ParamSet(**{k: np.array(v, dtype=np.float64, copy=True) for k, v in self.items()})

    def zeros_like(self):
        return ParamSet(**{k: np.zeros_like(v) for k, v in self.items()})

    def scaled(self, factor):
        return ParamSet(**{k: factor * v for k, v in self.items()})

    def add(self, other, factor=1.0):
        return ParamSet(**{k: v + factor * getattr(other, k) for k, v in self.items()})

    def flat(self):
        return np.concatenate([v.ravel() for _, v in self.items()])

    def all_finite(self):
        return all(np.all(np.isfinite(v)) for _, v in self.items())

    def frontend(self, cfg):
        return FrontendParams(self.temporal, self.spatial, self.gpe_gains, self.gpe_projection,
                              n_segments=cfg.n_segments, d_enc=cfg.d_enc)

    def attention(self):
        return AttentionParams(self.w_q, self.w_k, self.w_v)

    def recon_head(self):
        return ReconHead(self.rec_w1, self.rec_b1, self.rec_w2, self.rec_b2)

    @classmethod
    def init(cls, cfg: ModelConfig, seed):
        """Seeded initial values.

        Filters start at identity, attention maps at identity plus N(0, 0.01^2)
        noise, the position projection at N(0, 0.01^2) and the classifier at zero.
        """
        rng = np.random.default_rng(seed)
        C, T = cfg.n_channels, cfg.n_samples
        d = cfg.tangent_dim
        front = FrontendParams.identity(C, T, cfg.n_segments, cfg.k_t, cfg.d_enc)
        att = AttentionParams.near_identity(C, rng)
        head = ReconHead.init(C, rng, cfg.width_mult)
        proj = 0.01 * rng.standard_normal((3 * cfg.d_enc, T))
        return cls(
            temporal=front.temporal,
            spatial=front.spatial,
            gpe_gains=front.gpe_gains,
            gpe_projection=proj,
            w_q=att.w_q,
            w_k=att.w_k,
            w_v=att.w_v,
            rec_w1=head.w1,
            rec_b1=head.b1,
            rec_w2=head.w2,
            rec_b2=head.b2,
            cls_w=np.zeros((cfg.n_classes, d)),
            cls_b=np.zeros(cfg.n_classes),
        )

    def fresh_classifier(self, cfg):
        out = self.copy()
        out.cls_w = np.zeros((cfg.n_classes, cfg.tangent_dim))
        out.cls_b = np.zeros(cfg.n_classes)
        return out


GradSet = ParamSet


def _check_finite(value, component):
    if not np.all(np.isfinite(value)):
        raise NumericError("non-finite values", component)


def _as_batch(X, cfg):
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3 or X.shape[1:] != (cfg.n_channels, cfg.n_samples):
        raise ShapeError(
            f"expected batch of {cfg.n_channels} x {cfg.n_samples} recordings, got {X.shape}"
        )
    return X


def encode_states(params, cfg, layout, X, cache=None):
    """Frontend: returns the SPD states ``(B, n, C, C)`` and their logs."""
    X = _as_batch(X, cfg)
    c = {} if cache is None else cache
    feats = X
    if cfg.use_filter:
        conv = temporal_conv(X, params.temporal)
        mixed = params.spatial @ conv
        feats = np.tanh(mixed) if cfg.activation == "tanh" else mixed
        c["conv"] = conv
        c["filtered"] = feats
    _check_finite(feats, "spatiotemporal_filter")
    if cfg.use_position:
        gpe = geometric_position_encoding(layout, cfg.d_enc, params.gpe_gains)
        feats = feats + gpe @ params.gpe_projection
        c["gpe"] = gpe
    if cfg.jitter > 0.0:
        feats = add_jitter(feats, cfg.jitter, 0)
    _check_finite(feats, "inject_position")
    segs = segment(feats, cfg.n_segments)
    G = correlation_state(segs)
    shrunk = (1.0 - cfg.gamma) * G + cfg.gamma * np.eye(cfg.n_channels)
    lam, U = sym_eigen(shrunk)
    floored = np.maximum(lam, cfg.eps)
    states = eig_apply(U, floored)
    logs = eig_apply(U, np.log(floored))
    _check_finite(logs, "to_spd")
    c.update(X=X, segs=segs, spd_eig=(lam, U), states=states)
    return states, logs


def encode(params, cfg, layout, X, cache=None):
    """Full encoder. Returns ``M`` of shape (B, n, C, C) with the attended
    states equal to ``exp(M)``."""
    c = {} if cache is None else cache
    states, _ = encode_states(params, cfg, layout, X, c)
    W = np.stack([params.w_q, params.w_k, params.w_v])
    # (3, B, n, C, C)
    mapped = symmetrize(W[:, None, None] @ states[None] @ np.swapaxes(W, -1, -2)[:, None, None])
    lam, U = sym_eigen(mapped)
    if np.any(lam <= 0.0):
        raise NumericError("query/key/value lost positive definiteness", "qkv")
    logs = eig_apply(U, np.log(lam))
    log_q, log_k, log_v = logs
    D = pairwise_log_distance(log_q, log_k)
    S = similarity_from_distance(D)
    A = row_softmax(S)
    M = np.einsum("bij,bjkl->bikl", A, log_v)
    _check_finite(M, "attention")
    c.update(W=W, qkv=mapped, qkv_eig=(lam, U), qkv_logs=logs, dist=D, attn=A)
    return M


def encoder_backward(params, cfg, cache, grad_M):
    """Gradients of all encoder groups given the gradient w.r.t. ``M``."""
    g = {}
    A = cache["attn"]
    log_q, log_k, log_v = cache["qkv_logs"]
    D = cache["dist"]

    grad_A = np.einsum("bikl,bjkl->bij", grad_M, log_v)
    grad_log_v = np.einsum("bij,bikl->bjkl", A, grad_M)
    grad_S = softmax_backward(A, grad_A)
    grad_D = grad_S * similarity_distance_grad(D)
    coef = np.where(D > 0.0, grad_D / np.where(D > 0.0, D, 1.0), 0.0)
    diff = log_q[:, :, None] - log_k[:, None, :]
    weighted = coef[..., None, None] * diff
    grad_log_q = weighted.sum(axis=2)
    grad_log_k = -weighted.sum(axis=1)
    grad_logs = np.stack([grad_log_q, grad_log_k, grad_log_v])

    lam, U = cache["qkv_eig"]
    grad_mapped = eigfunc_backward(U, log_loewner(lam), grad_logs)
    W = cache["W"]
    states = cache["states"]
    Wt = np.swapaxes(W, -1, -2)
    grad_states = np.sum(Wt[:, None, None] @ grad_mapped @ W[:, None, None], axis=0)
    grad_W = 2.0 * np.einsum("pbnij,pjk,bnkl->pil", grad_mapped, W, states)
    g["w_q"], g["w_k"], g["w_v"] = grad_W

    lam0, U0 = cache["spd_eig"]
    grad_shrunk = eigfunc_backward(U0, floor_loewner(lam0, cfg.eps), grad_states)
    grad_G = (1.0 - cfg.gamma) * grad_shrunk
    grad_segs = correlation_backward(cache["segs"], grad_G)

    B, C, T = cache["X"].shape
    n, L = cfg.n_segments, cfg.segment_length
    grad_feats = np.zeros((B, C, T))
    grad_feats[..., : n * L] = np.moveaxis(grad_segs, -3, -2).reshape(B, C, n * L)

    if cfg.use_position:
        gpe = cache["gpe"]
        total = grad_feats.sum(axis=0)
        g["gpe_projection"] = gpe.T @ total
        grad_gpe = total @ params.gpe_projection.T
        coords = cache["coords"]
        g["gpe_gains"] = position_encoding_gain_grad(coords, cfg.d_enc, params.gpe_gains, grad_gpe)
    else:
        g["gpe_projection"] = np.zeros_like(params.gpe_projection)
        g["gpe_gains"] = np.zeros_like(params.gpe_gains)

    if cfg.use_filter:
        grad_mixed = grad_feats
        if cfg.activation == "tanh":
            grad_mixed = grad_feats * (1.0 - cache["filtered"] ** 2)
        conv = cache["conv"]
        g["spatial"] = np.einsum("bit,bjt->ij", grad_mixed, conv)
        grad_conv = params.spatial.T @ grad_mixed
        g["temporal"] = temporal_conv_kernel_grad(cache["X"], grad_conv, cfg.k_t)
    else:
        g["spatial"] = np.zeros_like(params.spatial)
        g["temporal"] = np.zeros_like(params.temporal)
    return g


def _head_backward(head_in, hidden, w1, w2, grad_out):
    flat_in = head_in.reshape(-1, head_in.shape[-1])
    flat_h = hidden.reshape(-1, hidden.shape[-1])
    flat_g = grad_out.reshape(-1, grad_out.shape[-1])
    grad_w2 = flat_h.T @ flat_g
    grad_b2 = flat_g.sum(axis=0)
    grad_z = (flat_g @ w2.T) * (1.0 - flat_h ** 2)
    grad_w1 = flat_in.T @ grad_z
    grad_b1 = grad_z.sum(axis=0)
    grad_in = (grad_z @ w1.T).reshape(head_in.shape)
    return grad_w1, grad_b1, grad_w2, grad_b2, grad_in


@dataclass
class Targets:
    """Intact-signal reconstruction targets (constants for the gradient)."""

    states: np.ndarray
    logs: np.ndarray


def make_targets(params, cfg, layout, X):
    states, logs = encode_states(params, cfg, layout, X)
    return Targets(states, logs)


def _zero_grads(params, names):
    return {k: np.zeros_like(getattr(params, k)) for k in names}


def _prepare_cache(layout):
    coords = layout.coords if isinstance(layout, ElectrodeLayout) else np.asarray(layout, float)
    return {"coords": coords}


def recon_loss_and_grad(params, cfg, layout, X, targets: Targets, domain="log", scale=1.0):
    """Reconstruction objective on (masked) inputs ``X`` against ``targets``.

    The loss is averaged over recordings and states.
    """
    cache = _prepare_cache(layout)
    M = encode(params, cfg, layout, X, cache)
    B, n = M.shape[:2]
    C = cfg.n_channels
    v = vech(M)
    hidden = np.tanh(v @ params.rec_w1 + params.rec_b1)
    out = hidden @ params.rec_w2 + params.rec_b2
    _check_finite(out, "reconstruct")
    if domain == "log":
        diff = out - vech(targets.logs)
        loss = float(np.sum(diff * diff)) / (B * n)
        grad_out = (2.0 / (B * n)) * diff
    elif domain == "euclid":
        lam, U = sym_eigen(unvech(out))
        recon = eig_apply(U, np.exp(lam))
        diff = recon - targets.states
        loss = float(np.sum(diff * diff)) / (B * n)
        grad_recon = (2.0 / (B * n)) * diff
        grad_out = unvech_backward(eigfunc_backward(U, exp_loewner(lam), grad_recon))
    else:
        raise ParameterError(f"unknown loss domain {domain!r}")
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", "recon_loss")
    loss *= scale
    grad_out = grad_out * scale

    gw1, gb1, gw2, gb2, grad_v = _head_backward(v, hidden, params.rec_w1, params.rec_w2, grad_out)
    grad_M = vech_backward(grad_v, C)
    g = encoder_backward(params, cfg, cache, grad_M)
    g.update(rec_w1=gw1, rec_b1=gb1, rec_w2=gw2, rec_b2=gb2)
    g.update(_zero_grads(params, CLASSIFIER_GROUPS))
    return loss, ParamSet(**g)


def pooled_features(M):
    """Mean over the sequence of the tangent vectors of the attended states."""
    return vech(M).mean(axis=-2)


def classify_loss_and_grad(params, cfg, layout, X, labels, scale=1.0):
    """Mean cross-entropy of the linear classifier on pooled tangent features."""
    labels = np.asarray(labels, dtype=np.int64)
    cache = _prepare_cache(layout)
    M = encode(params, cfg, layout, X, cache)
    B, n = M.shape[:2]
    if labels.shape != (B,):
        raise ShapeError(f"expected {B} labels, got shape {labels.shape}")
    if np.any((labels < 0) | (labels >= cfg.n_classes)):
        raise ParameterError("label out of range")
    feats = pooled_features(M)
    logits = feats @ params.cls_w.T + params.cls_b
    probs = row_softmax(logits)
    picked = probs[np.arange(B), labels]
    loss = -float(np.mean(np.log(picked)))
    if not np.isfinite(loss):
        raise NumericError("non-finite loss", "classifier")
    onehot = np.zeros_like(probs)
    onehot[np.arange(B), labels] = 1.0
    grad_logits = scale * (probs - onehot) / B
    g = {"cls_w": grad_logits.T @ feats, "cls_b": grad_logits.sum(axis=0)}
    grad_feats = grad_logits @ params.cls_w
    grad_v = np.broadcast_to(grad_feats[:, None, :] / n, (B, n, feats.shape[-1]))
    grad_M = vech_backward(grad_v, cfg.n_channels)
    g.update(encoder_backward(params, cfg, cache, grad_M))
    g.update(_zero_grads(params, RECON_GROUPS))
    return scale * loss, ParamSet(**g)


def predict_proba(params, cfg, layout, X):
    M = encode(params, cfg, layout, X, _prepare_cache(layout))
    logits = pooled_features(M) @ params.cls_w.T + params.cls_b
    return row_softmax(logits)


def recon_loss_value(params, cfg, layout, X, targets, domain="log"):
    """Forward-only reconstruction loss (same value as :func:`recon_loss_and_grad`)."""
    M = encode(params, cfg, layout, X, _prepare_cache(layout))
    B, n = M.shape[:2]
    out, _ = params.recon_head().tangent_forward(vech(M))
    if domain == "log":
        diff = out - vech(targets.logs)
    else:
        lam, U = sym_eigen(unvech(out))
        diff = eig_apply(U, np.exp(lam)) - targets.states
    return float(np.sum(diff * diff)) / (B * n)
