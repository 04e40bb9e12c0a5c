"""Cross-validated two-stage experiments on a dataset directory."""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .corruption import CorruptionSpec, apply
from .data import FoldPlan, MetricsReport, fold_metrics, make_folds
from .errors import DataError
from .frontend import Recording
from .model import ModelConfig, ParamSet
from .training import TrainConfig, classify, finetune, pretrain, stratified_label_sample

log = logging.getLogger(__name__)


@dataclass
class ExperimentConfig:
    model: ModelConfig
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(stage="pretrain", epochs=10))
    finetune: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage="finetune", epochs=200, batch_size=64)
    )
    folds: int = 3
    seed: int = 0
    use_ssl: bool = True
    test_corruption: CorruptionSpec = field(default_factory=CorruptionSpec)
    compare_scratch: bool = False

    def to_dict(self):
        return {
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "finetune": self.finetune.to_dict(),
            "folds": self.folds,
            "seed": self.seed,
            "use_ssl": self.use_ssl,
            "test_corruption": self.test_corruption.to_dict(),
            "compare_scratch": self.compare_scratch,
        }


def corrupt_recordings(recordings, spec: CorruptionSpec):
    """Corrupt each recording with its own seed derived from ``spec.seed``."""
    if spec.kind == "none":
        return list(recordings)
    seeds = np.random.default_rng(spec.seed).integers(0, 2**31 - 1, size=len(recordings))
    return [apply(replace(spec, seed=int(s)), rec)[0] for rec, s in zip(recordings, seeds)]


def evaluate(params, model_cfg, layout, recordings, corruption=None):
    """Segment predictions on (optionally corrupted) recordings and fold scores."""
    recordings = list(recordings)
    if corruption is not None:
        recordings = corrupt_recordings(recordings, corruption)
    X = np.stack([r.data for r in recordings])
    probs = classify(params, model_cfg, layout, X)
    preds = np.argmax(probs, axis=1)
    labels = [r.label for r in recordings]
    subjects = [r.subject_id for r in recordings]
    return fold_metrics(preds, labels, probs, subjects), probs


def _derive(seed, *tags):
    return int(np.random.default_rng([seed, *tags]).integers(0, 2**31 - 1))


@dataclass
class FoldResult:
    fold: int
    train_subjects: list
    test_subjects: list
    n_labeled: int
    pretrain_losses: list
    metrics: dict
    scratch_metrics: dict = None
    label_reads_during_pretrain: int = 0

    def to_dict(self):
        return {k: v for k, v in self.__dict__.items()}


def run_fold(cfg: ExperimentConfig, layout, recordings, plan: FoldPlan, fold):
    """Pre-train on the training subjects only, fine-tune on a labeled subset,
    score the held-out subjects."""
    train_ids = set(plan.train_subjects(fold))
    test_ids = set(plan.test_subjects(fold))
    if train_ids & test_ids:
        raise DataError(f"fold {fold}: subject leakage between train and test")
    train = [r for r in recordings if r.subject_id in train_ids]
    test = [r for r in recordings if r.subject_id in test_ids]
    if not train or not test:
        raise DataError(f"fold {fold}: empty train or test split")

    init = ParamSet.init(cfg.model, _derive(cfg.seed, fold, 1))
    losses = []
    reads_before = Recording.label_reads
    if cfg.use_ssl:
        pre_cfg = replace(cfg.pretrain, seed=_derive(cfg.seed, fold, 2))
        # pre-training sees unlabeled copies of the training recordings only
        unlabeled = [Recording(r.data, r.sampling_rate, r.subject_id) for r in train]
        encoder, losses = pretrain(pre_cfg, cfg.model, layout, unlabeled, params=init)
    else:
        encoder = init
    reads = Recording.label_reads - reads_before

    chosen = stratified_label_sample(train, cfg.finetune.label_fraction,
                                     _derive(cfg.seed, fold, 3), cfg.model.n_classes)
    labeled = [train[i] for i in chosen]
    ft_cfg = replace(cfg.finetune, seed=_derive(cfg.seed, fold, 4))
    model, _ = finetune(ft_cfg, cfg.model, layout, encoder, labeled)
    corruption = replace(cfg.test_corruption, seed=_derive(cfg.seed, fold, 5))
    metrics, _ = evaluate(model, cfg.model, layout, test, corruption)

    scratch = None
    if cfg.compare_scratch:
        base, _ = finetune(ft_cfg, cfg.model, layout, init, labeled)
        scratch, _ = evaluate(base, cfg.model, layout, test, corruption)
    return FoldResult(fold, sorted(train_ids), sorted(test_ids), len(labeled), losses,
                      metrics, scratch, reads)


def _run_fold_job(args):
    return run_fold(*args)


def cross_validate(cfg: ExperimentConfig, layout, recordings, manifest, workers=1):
    """Full k-fold run. Folds may run in worker processes; results keep fold order."""
    plan = make_folds(manifest, cfg.folds, cfg.seed)
    jobs = [(cfg, layout, recordings, plan, f) for f in range(cfg.folds)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, cfg.folds)) as pool:
            results = list(pool.map(_run_fold_job, jobs))
    else:
        results = [_run_fold_job(j) for j in jobs]
    report = MetricsReport([r.metrics for r in results])
    scratch = None
    if cfg.compare_scratch:
        scratch = MetricsReport([r.scratch_metrics for r in results])
    return plan, results, report, scratch
