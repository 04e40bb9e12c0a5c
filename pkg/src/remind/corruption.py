"""Test-time corruption protocols and the masking schedule used in pre-training.

Corrupted samples are set to zero. Three kinds are supported: scattered random
points, one contiguous block of ``ceil(T/2)`` columns, and whole channels.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ParameterError
from .frontend import Recording

KINDS = ("none", "random", "segment", "channel")
MIX_KINDS = ("random", "segment", "channel")


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str = "none"
    rate: float = 0.5
    channels: tuple = field(default=(0, 1))
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown corruption kind {self.kind!r}")
        if not 0.0 <= self.rate <= 1.0:
            raise ParameterError(f"corruption rate must lie in [0, 1], got {self.rate}")
        chans = tuple(int(c) for c in self.channels)
        if any(c < 0 for c in chans):
            raise ParameterError("channel indices must be non-negative")
        object.__setattr__(self, "channels", chans)

    @classmethod
    def parse(cls, text, seed=0):
        """Parse the command-line form, e.g. ``kind=channel,channels=0+1``."""
        kwargs = {}
        for part in filter(None, (p.strip() for p in text.split(","))):
            if "=" not in part:
                raise ParameterError(f"malformed corruption option {part!r}")
            key, value = (s.strip() for s in part.split("=", 1))
            if key == "kind":
                kwargs["kind"] = value
            elif key == "rate":
                kwargs["rate"] = float(value)
            elif key == "channels":
                kwargs["channels"] = tuple(int(c) for c in value.split("+") if c)
            elif key == "seed":
                kwargs["seed"] = int(value)
            else:
                raise ParameterError(f"unknown corruption option {key!r}")
        kwargs.setdefault("seed", seed)
        return cls(**kwargs)

    def describe(self):
        if self.kind == "random":
            return f"kind=random,rate={self.rate}"
        if self.kind == "channel":
            return "kind=channel,channels=" + "+".join(str(c) for c in self.channels)
        return f"kind={self.kind}"

    def to_dict(self):
        return {"kind": self.kind, "rate": self.rate, "channels": list(self.channels),
                "seed": self.seed}


def corruption_mask(spec: CorruptionSpec, n_channels, n_samples):
    """Boolean ``C x T`` mask of the points ``spec`` corrupts."""
    C, T = n_channels, n_samples
    mask = np.zeros((C, T), dtype=bool)
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "random":
        count = math.floor(spec.rate * C * T)
        flat = rng.choice(C * T, size=count, replace=False)
        mask.reshape(-1)[flat] = True
    elif spec.kind == "segment":
        width = math.ceil(T / 2)
        start = int(rng.integers(0, T - width + 1))
        mask[:, start:start + width] = True
    elif spec.kind == "channel":
        bad = [c for c in spec.channels if c >= C]
        if bad:
            raise ParameterError(f"channel indices {bad} out of range for {C} channels")
        mask[list(spec.channels), :] = True
    return mask


def apply(spec: CorruptionSpec, x):
    """Zero the points selected by ``spec``.

    ``x`` is a :class:`Recording` or a ``C x T`` array; the result has the same
    type. Returns ``(corrupted, mask)``.
    """
    data = x.data if isinstance(x, Recording) else np.asarray(x, dtype=np.float64)
    mask = corruption_mask(spec, *data.shape)
    out = np.where(mask, 0.0, data)
    if isinstance(x, Recording):
        return x.with_data(out), mask
    return out, mask


def sample_mix(weights, seed, rate=0.5, channels=(0, 1)):
    """Draw one corruption kind with probability proportional to ``weights``.

    ``weights`` are for (random, segment, channel); all zeros yields kind none.
    The returned spec carries a seed derived from ``seed`` for its own draws.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (3,):
        raise ParameterError("mix weights must have three entries (random, segment, channel)")
    if np.any(weights < 0.0):
        raise ParameterError("mix weights must be non-negative")
    rng = np.random.default_rng(seed)
    child_seed = int(rng.integers(0, 2**31 - 1))
    total = float(weights.sum())
    if total == 0.0:
        return CorruptionSpec("none", seed=child_seed)
    kind = MIX_KINDS[int(rng.choice(3, p=weights / total))]
    return CorruptionSpec(kind, rate=rate, channels=tuple(channels), seed=child_seed)
