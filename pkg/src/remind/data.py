"""Dataset files, synthetic recordings, subject-level folds and metrics.

Recording files are raw little-endian float64, channel-major (C rows of T
samples), each with a JSON sidecar. A dataset directory holds the recordings,
``manifest.json`` and ``layout.csv``.
"""

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ArityError, DataError, ParameterError, ShapeError
from .frontend import ElectrodeLayout, Recording


def dump_json(obj, path):
    """Deterministic JSON (sorted keys, fixed indent, trailing newline)."""
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    with open(path, "w") as fh:
        fh.write(text)


@dataclass
class ManifestEntry:
    file: str
    subject_id: str
    label: object
    n_channels: int
    n_samples: int
    sampling_rate: float

    def to_dict(self):
        return {
            "file": self.file,
            "subject_id": self.subject_id,
            "label": self.label,
            "C": self.n_channels,
            "T": self.n_samples,
            "sampling_rate": self.sampling_rate,
        }


@dataclass
class DatasetManifest:
    root: Path
    entries: list = field(default_factory=list)

    def __post_init__(self):
        self.root = Path(self.root)
        if self.entries:
            chans = {e.n_channels for e in self.entries}
            rates = {e.sampling_rate for e in self.entries}
            if len(chans) != 1 or len(rates) != 1:
                raise DataError("all recordings must share channel count and sampling rate")
        if any(not e.subject_id for e in self.entries):
            raise DataError("subject ids must be non-empty")

    @property
    def n_channels(self):
        return self.entries[0].n_channels

    @property
    def n_samples(self):
        return self.entries[0].n_samples

    def subjects(self):
        """Subject ids in first-appearance order."""
        return list(dict.fromkeys(e.subject_id for e in self.entries))

    def subject_labels(self):
        out = {}
        for e in self.entries:
            out.setdefault(e.subject_id, e.label)
        return out

    def save(self, path=None):
        path = Path(path) if path is not None else self.root / "manifest.json"
        dump_json({"entries": [e.to_dict() for e in self.entries]}, path)

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        with open(path) as fh:
            doc = json.load(fh)
        entries = [
            ManifestEntry(e["file"], str(e["subject_id"]), e.get("label"), int(e["C"]),
                          int(e["T"]), float(e["sampling_rate"]))
            for e in doc["entries"]
        ]
        return cls(path.parent, entries)


def write_recording(path, rec: Recording):
    path = Path(path)
    rec.data.astype("<f8").tofile(path)
    dump_json({
        "C": rec.n_channels,
        "T": rec.n_samples,
        "sampling_rate": rec.sampling_rate,
        "subject_id": rec.subject_id,
        "label": rec._label,
    }, path.with_suffix(".json"))


def read_recording(path):
    path = Path(path)
    with open(path.with_suffix(".json")) as fh:
        meta = json.load(fh)
    raw = np.fromfile(path, dtype="<f8")
    C, T = int(meta["C"]), int(meta["T"])
    if raw.size != C * T:
        raise ShapeError(f"{path}: expected {C * T} samples, found {raw.size}")
    return Recording(raw.reshape(C, T), meta["sampling_rate"], meta["subject_id"], meta["label"])


def load_recordings(manifest: DatasetManifest):
    return [read_recording(manifest.root / e.file) for e in manifest.entries]


def _ar1(rng, n, length, phi):
    """Unit-variance AR(1) sequences, shape (n, length)."""
    out = np.empty((n, length))
    out[:, 0] = rng.standard_normal(n)
    innov = rng.standard_normal((n, length)) * np.sqrt(1.0 - phi * phi)
    for t in range(1, length):
        out[:, t] = phi * out[:, t - 1] + innov[:, t]
    return out


def block_boundary(n_channels, shifted):
    """First channel of the second block, one later when ``shifted``."""
    return n_channels // 2 + (1 if shifted else 0)


def synth_recording(rng, n_channels, n_samples, rho, shifted, gains, phi=0.7, noise=0.1):
    """Two latent sources drive two channel blocks with in-block correlation ``rho``."""
    C, T = n_channels, n_samples
    sources = _ar1(rng, 2, T, phi)
    private = _ar1(rng, C, T, phi)
    block = (np.arange(C) >= block_boundary(C, shifted)).astype(int)
    x = np.sqrt(rho) * sources[block] + np.sqrt(1.0 - rho) * private
    x = x + noise * rng.standard_normal((C, T))
    return gains[:, None] * x


def generate_synthetic(out_dir, seed, subjects_per_class=20, n_channels=8, n_samples=512,
                       n_recordings=4, delta=0.4, rho=0.3, sampling_rate=250.0,
                       subject_jitter=0.05):
    """Write a two-class synthetic dataset and return its manifest.

    Class 0 has in-block correlation ``rho``; class 1 has ``rho + delta`` and
    its block boundary moved one channel later. With ``delta == 0`` the
    boundary is not moved either, so the classes are identically distributed.
    Each subject draws its own correlation offset (std ``subject_jitter``) and
    positive channel gains.
    """
    if not 0.0 <= delta <= 1.0:
        raise ParameterError("class gap must lie in [0, 1]")
    if n_channels < 4 or n_samples < 4 or subjects_per_class < 1 or n_recordings < 1:
        raise ParameterError("need C >= 4, T >= 4, and at least one subject and recording")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    entries = []
    subj = 0
    for label in (0, 1):
        base = min(rho + delta * label, 0.95)
        for _ in range(subjects_per_class):
            sid = f"S{subj:03d}"
            subj += 1
            srho = float(np.clip(base + subject_jitter * rng.standard_normal(), 0.0, 0.95))
            gains = np.exp(0.3 * rng.standard_normal(n_channels))
            for r in range(n_recordings):
                shifted = label == 1 and delta > 0.0
                data = synth_recording(rng, n_channels, n_samples, srho, shifted, gains)
                name = f"{sid}_r{r:02d}.bin"
                write_recording(out_dir / name, Recording(data, sampling_rate, sid, label))
                entries.append(ManifestEntry(name, sid, label, n_channels, n_samples,
                                             sampling_rate))
    manifest = DatasetManifest(out_dir, entries)
    manifest.save()
    ElectrodeLayout.ring(n_channels).write_csv(out_dir / "layout.csv")
    return manifest


@dataclass
class FoldPlan:
    k: int
    assignment: dict

    def test_subjects(self, fold):
        return sorted(s for s, f in self.assignment.items() if f == fold)

    def train_subjects(self, fold):
        return sorted(s for s, f in self.assignment.items() if f != fold)

    def to_dict(self):
        return {"k": self.k, "assignment": dict(sorted(self.assignment.items()))}


def make_folds(manifest, k, seed):
    """Seeded, class-stratified partition of subjects into ``k`` folds.

    ``manifest`` is a :class:`DatasetManifest` or a ``{subject: label}`` map.
    Subjects of each class are shuffled and dealt round-robin, continuing the
    fold counter across classes.
    """
    labels = manifest.subject_labels() if isinstance(manifest, DatasetManifest) else dict(manifest)
    if k < 2 or k > len(labels):
        raise ParameterError(f"fold count {k} must lie in [2, {len(labels)}]")
    rng = np.random.default_rng(seed)
    by_class = {}
    for sid in sorted(labels):
        by_class.setdefault(-1 if labels[sid] is None else labels[sid], []).append(sid)
    assignment = {}
    slot = 0
    for cls in sorted(by_class):
        members = by_class[cls]
        for i in rng.permutation(len(members)):
            assignment[members[i]] = slot % k
            slot += 1
    return FoldPlan(k, assignment)


def subject_aggregate(preds, probs=None):
    """Majority vote over segment predictions.

    Ties go to the tied class with the highest mean predicted probability
    across the subject's segments, then to the lowest class index.
    """
    preds = np.asarray(preds, dtype=np.int64)
    if preds.size == 0:
        raise ArityError("need at least one segment prediction")
    counts = np.bincount(preds)
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1 or probs is None:
        return int(tied[0])
    mean_prob = np.asarray(probs, dtype=np.float64).mean(axis=0)
    return int(tied[np.argmax(mean_prob[tied])])


def confusion_matrix(preds, labels, n_classes=None):
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if n_classes is None:
        n_classes = int(max(preds.max(), labels.max())) + 1
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def accuracy(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeError("predictions and labels differ in length")
    if preds.size == 0:
        raise ArityError("need at least one prediction")
    return float(np.mean(preds == labels))


def macro_f1(preds, labels):
    """Unweighted mean F1 over the classes that occur in ``preds`` or ``labels``."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ShapeError("predictions and labels differ in length")
    if preds.size == 0:
        raise ArityError("need at least one prediction")
    scores = []
    for cls in np.union1d(preds, labels):
        tp = int(np.sum((preds == cls) & (labels == cls)))
        fp = int(np.sum((preds == cls) & (labels != cls)))
        fn = int(np.sum((preds != cls) & (labels == cls)))
        scores.append(0.0 if tp == 0 else 2.0 * tp / (2.0 * tp + fp + fn))
    return float(np.mean(scores))


@dataclass
class MetricsReport:
    """Per-fold values with population mean and standard deviation."""

    folds: list

    KEYS = ("segment_accuracy", "subject_accuracy", "macro_f1")

    def summary(self):
        out = {}
        for key in self.KEYS:
            vals = np.array([f[key] for f in self.folds], dtype=np.float64)
            out[key] = {"mean": float(vals.mean()), "std": float(vals.std())}
        return out

    def to_dict(self):
        return {"folds": self.folds, "summary": self.summary()}

    def render(self, title=None):
        lines = []
        if title:
            lines.append(title)
        lines.append(f"{'fold':<8}" + "".join(f"{h:>18}" for h in ("seg acc", "subj acc", "F1")))
        for i, f in enumerate(self.folds):
            lines.append(f"{i + 1:<8}" + "".join(f"{100 * f[k]:>18.2f}" for k in self.KEYS))
        s = self.summary()
        cells = "".join(
            f"{100 * s[k]['mean']:.2f} ({100 * s[k]['std']:.2f})".rjust(18) for k in self.KEYS
        )
        lines.append(f"{'mean':<8}{cells}")
        return "\n".join(lines)


def fold_metrics(segment_preds, segment_labels, segment_probs, subject_ids):
    """Segment and subject-level scores for one test fold."""
    segment_preds = np.asarray(segment_preds)
    segment_labels = np.asarray(segment_labels)
    segment_probs = np.asarray(segment_probs)
    subject_ids = np.asarray(subject_ids)
    subj_pred, subj_true = [], []
    for sid in sorted(set(subject_ids.tolist())):
        sel = subject_ids == sid
        subj_pred.append(subject_aggregate(segment_preds[sel], segment_probs[sel]))
        subj_true.append(int(segment_labels[sel][0]))
    return {
        "segment_accuracy": accuracy(segment_preds, segment_labels),
        "subject_accuracy": accuracy(subj_pred, subj_true),
        "macro_f1": macro_f1(subj_pred, subj_true),
        "n_subjects": len(subj_true),
        "n_segments": int(segment_preds.size),
    }


def compute_metrics(preds, labels):
    """Accuracy and macro F1 of a single prediction vector."""
    return MetricsReport([{
        "segment_accuracy": accuracy(preds, labels),
        "subject_accuracy": accuracy(preds, labels),
        "macro_f1": macro_f1(preds, labels),
    }])


def threads_from_env(default=1):
    try:
        return max(1, int(os.environ.get("REMIND_THREADS", default)))
    except ValueError:
        raise ParameterError("REMIND_THREADS must be an integer")
