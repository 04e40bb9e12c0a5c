"""Optimizer, self-supervised pre-training and limited-label fine-tuning."""

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .corruption import apply, sample_mix
from .errors import DataError, NumericError, ParameterError, StratificationError
from .model import (
    ENCODER_GROUPS,
    RECON_GROUPS,
    ModelConfig,
    ParamSet,
    Targets,
    classify_loss_and_grad,
    encode,
    make_targets,
    predict_proba,
    recon_loss_and_grad,
)
from .spd_geometry import MIN_SINGULAR, spd_exp

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    stage: str = "pretrain"
    epochs: int = 20
    batch_size: int = 8
    step_size: float = 1e-3
    encoder_step_mult: float = 0.1
    seed: int = 0
    loss_domain: str = "log"
    mix_weights: tuple = (1.0, 1.0, 1.0)
    mask_rate: float = 0.5
    label_fraction: float = 0.10
    freeze_encoder: bool = False
    resample_masks: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ParameterError(f"unknown stage {self.stage!r}")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ParameterError("label fraction must lie in (0, 1]")
        if not self.step_size > 0.0:
            raise ParameterError("step size must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch size must be positive")
        if self.loss_domain not in ("log", "euclid"):
            raise ParameterError(f"unknown loss domain {self.loss_domain!r}")
        self.mix_weights = tuple(float(w) for w in self.mix_weights)

    def to_dict(self):
        d = asdict(self)
        d["mix_weights"] = list(self.mix_weights)
        return d


@dataclass
class AdamState:
    m: Optional[ParamSet] = None
    v: Optional[ParamSet] = None
    t: int = 0
    group_scale: dict = field(default_factory=dict)


def optimizer_step(state: AdamState, params: ParamSet, grads: ParamSet, cfg: TrainConfig):
    """One Adam update with per-group step-size multipliers.

    Returns the new ``(state, params)``; inputs are not modified.
    """
    if not grads.all_finite():
        raise NumericError("non-finite gradient", "optimizer_step")
    m = state.m if state.m is not None else params.zeros_like()
    v = state.v if state.v is not None else params.zeros_like()
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_m, new_v, new_p = {}, {}, {}
    for name, p in params.items():
        g = getattr(grads, name)
        mi = b1 * getattr(m, name) + (1.0 - b1) * g
        vi = b2 * getattr(v, name) + (1.0 - b2) * g * g
        mhat = mi / (1.0 - b1 ** t)
        vhat = vi / (1.0 - b2 ** t)
        lr = cfg.step_size * state.group_scale.get(name, 1.0)
        new_p[name] = p - lr * mhat / (np.sqrt(vhat) + cfg.adam_eps)
        new_m[name], new_v[name] = mi, vi
    out = ParamSet(**new_p)
    if not out.all_finite():
        raise NumericError("non-finite parameter after update", "optimizer_step")
    for name in ("w_q", "w_k", "w_v"):
        if np.min(np.linalg.svd(getattr(out, name), compute_uv=False)) < MIN_SINGULAR:
            raise NumericError(f"{name} became rank deficient", "optimizer_step")
    return AdamState(ParamSet(**new_m), ParamSet(**new_v), t, dict(state.group_scale)), out


def _stack(recordings):
    return np.stack([r.data for r in recordings])


def _batches(n_items, batch_size, rng):
    order = rng.permutation(n_items)
    return [order[i:i + batch_size] for i in range(0, n_items, batch_size)]


def masked_batch(recordings, cfg: TrainConfig, rng):
    """Apply one freshly drawn corruption to each recording's samples."""
    out = []
    for rec in recordings:
        spec = sample_mix(cfg.mix_weights, int(rng.integers(0, 2**31 - 1)), rate=cfg.mask_rate)
        masked, _ = apply(spec, rec.data)
        out.append(masked)
    return np.stack(out)


def pretrain(cfg: TrainConfig, model_cfg: ModelConfig, layout, recordings, params=None,
             steps=None):
    """Stage 1: reconstruct intact-signal states from masked inputs.

    Labels are never read. Targets are recomputed from the current frontend at
    every step and treated as constants. Masks are redrawn for every batch
    unless ``cfg.resample_masks`` is false, in which case each recording keeps
    one mask for the whole run.

    Parameters
    ----------
    steps : int, optional
        Stop after this many optimizer steps instead of running whole epochs.

    Returns
    -------
    params : ParamSet
    losses : list of float
        Mean training loss per epoch (per step when ``steps`` is given).
    """
    recordings = list(recordings)
    if not recordings:
        raise DataError("pre-training needs at least one recording")
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = ParamSet.init(model_cfg, int(rng.integers(0, 2**31 - 1)))
    state = AdamState()
    losses = []
    frozen = None
    if not cfg.resample_masks:
        frozen = masked_batch(recordings, cfg, rng)
    done = 0
    epoch = 0
    while (steps is None and epoch < cfg.epochs) or (steps is not None and done < steps):
        epoch_losses = []
        for idx in _batches(len(recordings), cfg.batch_size, rng):
            batch = [recordings[i] for i in idx]
            intact = _stack(batch)
            targets = make_targets(params, model_cfg, layout, intact)
            masked = frozen[idx] if frozen is not None else masked_batch(batch, cfg, rng)
            loss, grads = recon_loss_and_grad(params, model_cfg, layout, masked, targets,
                                              cfg.loss_domain)
            state, params = optimizer_step(state, params, grads, cfg)
            epoch_losses.append(loss)
            done += 1
            if steps is not None:
                losses.append(loss)
                if done >= steps:
                    break
        epoch += 1
        if steps is None:
            losses.append(float(np.mean(epoch_losses)))
            log.info("pretrain epoch %d loss %.6f", epoch, losses[-1])
    return params, losses


def stratified_label_sample(recordings, fraction, seed, n_classes=None):
    """Seeded per-class sample of ``round(fraction * n_class)`` recordings.

    Returns indices into ``recordings`` in ascending order.
    """
    labels = np.array([r.label for r in recordings])
    if np.any(labels == None):  # noqa: E711
        raise StratificationError("every recording in the labeled pool needs a label")
    labels = labels.astype(np.int64)
    classes = range(n_classes) if n_classes is not None else sorted(set(labels.tolist()))
    rng = np.random.default_rng(seed)
    chosen = []
    for cls in classes:
        pool = np.flatnonzero(labels == cls)
        k = math.floor(fraction * len(pool) + 0.5)
        if k == 0:
            raise StratificationError(
                f"class {cls} has {len(pool)} labeled recordings; fraction {fraction} selects none"
            )
        chosen.extend(rng.choice(pool, size=k, replace=False).tolist())
    return sorted(chosen)


def finetune(cfg: TrainConfig, model_cfg: ModelConfig, layout, pretrained: ParamSet, labeled):
    """Stage 2: cross-entropy on the labeled recordings with a fresh classifier.

    Encoder groups use ``step_size * encoder_step_mult`` (or are frozen); the
    reconstruction head is left untouched.

    Returns
    -------
    params : ParamSet
    losses : list of float
    """
    labeled = list(labeled)
    if not labeled:
        raise DataError("fine-tuning needs labeled recordings")
    labels = np.array([r.label for r in labeled], dtype=np.int64)
    X = _stack(labeled)
    params = pretrained.fresh_classifier(model_cfg)
    scale = {name: cfg.encoder_step_mult for name in ENCODER_GROUPS}
    scale.update({name: 0.0 for name in RECON_GROUPS})
    state = AdamState(group_scale=scale)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for epoch in range(cfg.epochs):
        epoch_losses = []
        for idx in _batches(len(labeled), cfg.batch_size, rng):
            loss, grads = classify_loss_and_grad(params, model_cfg, layout, X[idx], labels[idx])
            if cfg.freeze_encoder:
                for name in ENCODER_GROUPS:
                    setattr(grads, name, np.zeros_like(getattr(grads, name)))
            state, params = optimizer_step(state, params, grads, cfg)
            epoch_losses.append(loss)
        losses.append(float(np.mean(epoch_losses)))
        log.debug("finetune epoch %d loss %.6f", epoch + 1, losses[-1])
    return params, losses


def classify(params: ParamSet, model_cfg: ModelConfig, layout, x):
    """Class probabilities for one recording (``C x T``) or a stack."""
    data = x.data if hasattr(x, "data") else np.asarray(x, dtype=np.float64)
    probs = predict_proba(params, model_cfg, layout, data)
    return probs[0] if np.ndim(data) == 2 else probs


def forward_encoder(params: ParamSet, model_cfg: ModelConfig, layout, x):
    """Attended SPD sequence and the cached intermediates of the forward pass."""
    data = x.data if hasattr(x, "data") else np.asarray(x, dtype=np.float64)
    cache = {"coords": np.asarray(getattr(layout, "coords", layout), dtype=np.float64)}
    M = encode(params, model_cfg, layout, data, cache)
    attended = spd_exp(M)
    return (attended[0] if np.ndim(data) == 2 else attended), cache


def grad(params: ParamSet, model_cfg: ModelConfig, layout, batch, objective, targets=None,
         loss_domain="log", scale=1.0):
    """Loss and gradients for a batch of recordings.

    For ``objective="recon"`` the recordings are the model inputs and
    ``targets`` (default: states of the same recordings) are held constant.
    For ``"classify"`` every recording must carry a label.
    """
    recordings = list(batch)
    X = _stack(recordings)
    if objective == "recon":
        if targets is None:
            targets = make_targets(params, model_cfg, layout, X)
        return recon_loss_and_grad(params, model_cfg, layout, X, targets, loss_domain, scale)
    if objective == "classify":
        labels = [r.label for r in recordings]
        if any(lbl is None for lbl in labels):
            raise ParameterError("classification objective needs labeled recordings")
        return classify_loss_and_grad(params, model_cfg, layout, X, labels, scale)
    raise ParameterError(f"unknown objective {objective!r}")


__all__ = [
    "AdamState",
    "Targets",
    "TrainConfig",
    "classify",
    "finetune",
    "forward_encoder",
    "grad",
    "optimizer_step",
    "pretrain",
    "stratified_label_sample",
]
