"""From raw multichannel recordings to sequences of SPD correlation states.

Pipeline: depthwise temporal convolution -> 1x1 spatial mix -> optional
activation -> additive electrode-position bias -> segmentation -> Pearson
correlation per segment -> SPD projection.
"""

import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DegenerateChannelError, ParameterError, SegmentationError, ShapeError
from .spd_geometry import DEFAULT_FLOOR, DEFAULT_SHRINKAGE, to_spd

POSITION_BASE = 10000.0


class Recording:
    """One ``C x T`` multichannel recording.

    Reads of :attr:`label` are counted on the class (``Recording.label_reads``)
    so that label-free stages can be audited.
    """

    label_reads = 0

    def __init__(self, data, sampling_rate=1.0, subject_id="", label=None):
        data = np.asarray(data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeError(f"recording data must be C x T, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ParameterError("recording contains non-finite samples")
        self.data = data
        self.sampling_rate = float(sampling_rate)
        self.subject_id = str(subject_id)
        self._label = None if label is None else int(label)

    @property
    def label(self):
        Recording.label_reads += 1
        return self._label

    @property
    def has_label(self):
        return self._label is not None

    @property
    def n_channels(self):
        return self.data.shape[0]

    @property
    def n_samples(self):
        return self.data.shape[1]

    def with_data(self, data):
        """Copy with replaced samples; metadata (including the label) is kept."""
        out = Recording.__new__(Recording)
        out.data = np.asarray(data, dtype=np.float64)
        out.sampling_rate = self.sampling_rate
        out.subject_id = self.subject_id
        out._label = self._label
        return out

    def __repr__(self):
        return (
            f"Recording(C={self.n_channels}, T={self.n_samples}, "
            f"subject={self.subject_id!r}, fs={self.sampling_rate})"
        )


@dataclass(frozen=True)
class ElectrodeLayout:
    names: tuple
    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=np.float64)
        if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] != len(self.names):
            raise ShapeError(f"layout needs one (x, y, z) row per name, got {coords.shape}")
        if len(set(self.names)) != len(self.names):
            raise ParameterError("electrode names must be unique")
        norms = np.linalg.norm(coords, axis=1)
        if np.any((norms < 0.5) | (norms > 1.5)):
            raise ParameterError("electrode coordinates must have norm in [0.5, 1.5]")
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "coords", coords)

    @property
    def n_channels(self):
        return len(self.names)

    @classmethod
    def read_csv(cls, path):
        """Parse a ``name,x,y,z`` file; row order defines channel order."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if header != ["name", "x", "y", "z"]:
                raise ParameterError(f"{path}: expected header name,x,y,z, got {header}")
            names, coords = [], []
            for row in reader:
                if not row:
                    continue
                names.append(row[0].strip())
                coords.append([float(v) for v in row[1:4]])
        return cls(tuple(names), np.array(coords))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write("name,x,y,z\n")
            for name, (x, y, z) in zip(self.names, self.coords):
                fh.write(f"{name},{float(x)!r},{float(y)!r},{float(z)!r}\n")

    @classmethod
    def ring(cls, n_channels):
        """Evenly spaced electrodes on a tilted circle of the unit head sphere."""
        angle = 2.0 * np.pi * np.arange(n_channels) / n_channels
        elev = 0.35 * np.sin(3.0 * angle)
        coords = np.stack(
            [np.cos(angle) * np.cos(elev), np.sin(angle) * np.cos(elev), np.sin(elev)], axis=1
        )
        return cls(tuple(f"E{i + 1}" for i in range(n_channels)), coords)


@dataclass
class FrontendParams:
    temporal: np.ndarray
    spatial: np.ndarray
    gpe_gains: np.ndarray
    gpe_projection: np.ndarray
    n_segments: int = 1
    d_enc: int = 8

    @classmethod
    def identity(cls, n_channels, n_samples, n_segments=1, k_t=15, d_enc=8):
        """Identity filters, unit gains and a zero position projection."""
        if k_t % 2 == 0:
            raise ParameterError("temporal kernel length must be odd")
        temporal = np.zeros(k_t)
        temporal[k_t // 2] = 1.0
        return cls(
            temporal=temporal,
            spatial=np.eye(n_channels),
            gpe_gains=np.ones(3),
            gpe_projection=np.zeros((3 * d_enc, n_samples)),
            n_segments=n_segments,
            d_enc=d_enc,
        )


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ShapeError(f"expected C x T or B x C x T data, got shape {x.shape}")


def temporal_conv(x, kernel):
    """Same-padded depthwise cross-correlation along the last axis."""
    k = kernel.shape[0]
    half = k // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(half, half)]
    windows = sliding_window_view(np.pad(x, pad), k, axis=-1)
    return windows @ kernel


def temporal_conv_kernel_grad(x, grad_out, k):
    half = k // 2
    pad = [(0, 0)] * (x.ndim - 1) + [(half, half)]
    windows = sliding_window_view(np.pad(x, pad), k, axis=-1)
    return np.tensordot(grad_out, windows, axes=(tuple(range(grad_out.ndim)),) * 2)


def spatiotemporal_filter(p: FrontendParams, x, activation: Optional[str] = None):
    """Temporal convolution followed by a 1x1 cross-channel mix.

    ``x`` may be a :class:`Recording`, a ``C x T`` array or a ``B x C x T``
    stack. Without ``activation`` the map is linear in ``x``.
    """
    data = x.data if isinstance(x, Recording) else x
    data, single = _batched(data)
    C = data.shape[1]
    if p.spatial.shape != (C, C):
        raise ShapeError(f"spatial kernel {p.spatial.shape} does not match {C} channels")
    if p.temporal.ndim != 1 or p.temporal.shape[0] % 2 == 0:
        raise ShapeError("temporal kernel must be a 1-D vector of odd length")
    out = p.spatial @ temporal_conv(data, p.temporal)
    if activation == "tanh":
        out = np.tanh(out)
    elif activation is not None:
        raise ParameterError(f"unknown activation {activation!r}")
    return out[0] if single else out


def position_frequencies(d_enc):
    i = np.arange(d_enc)
    return POSITION_BASE ** (2.0 * (i // 2) / d_enc)


def geometric_position_encoding(layout, d_enc, gains=(1.0, 1.0, 1.0)):
    """Sinusoidal encoding of 3-D electrode coordinates.

    Row ``s`` holds, for each axis in x, y, z order, ``d_enc`` values
    alternating ``sin`` (even index) and ``cos`` (odd index) of
    ``gain_axis * coord / base**(2*(i//2)/d_enc)``.

    Returns
    -------
    ndarray, shape (C, 3 * d_enc)
    """
    if d_enc <= 0 or d_enc % 2:
        raise ParameterError(f"encoding size must be a positive even integer, got {d_enc}")
    coords = layout.coords if isinstance(layout, ElectrodeLayout) else np.asarray(layout, float)
    gains = np.asarray(gains, dtype=np.float64)
    arg = (gains[None, :, None] * coords[:, :, None]) / position_frequencies(d_enc)
    even = (np.arange(d_enc) % 2 == 0)
    enc = np.where(even, np.sin(arg), np.cos(arg))
    return enc.reshape(coords.shape[0], 3 * d_enc)


def position_encoding_gain_grad(coords, d_enc, gains, grad_enc):
    """Gradient of a scalar through :func:`geometric_position_encoding` w.r.t. gains."""
    freqs = position_frequencies(d_enc)
    unit = coords[:, :, None] / freqs
    arg = gains[None, :, None] * unit
    even = (np.arange(d_enc) % 2 == 0)
    dargs = np.where(even, np.cos(arg), -np.sin(arg)) * unit
    return np.sum(dargs * grad_enc.reshape(coords.shape[0], 3, d_enc), axis=(0, 2))


def inject_position(f, gpe, proj):
    """Add the per-channel time profile ``gpe @ proj`` to features ``f``."""
    f = np.asarray(f, dtype=np.float64)
    gpe = np.asarray(gpe, dtype=np.float64)
    proj = np.asarray(proj, dtype=np.float64)
    if gpe.shape[0] != f.shape[-2] or proj.shape != (gpe.shape[1], f.shape[-1]):
        raise ShapeError(
            f"cannot add position bias {gpe.shape} x {proj.shape} to features {f.shape}"
        )
    return f + gpe @ proj


def segment(f, n):
    """Split the time axis into ``n`` consecutive windows of ``L = T // n``.

    Trailing samples are dropped. Returns an array of shape ``(..., n, C, L)``.
    """
    f = np.asarray(f, dtype=np.float64)
    if n < 1:
        raise SegmentationError("segment count must be positive")
    T = f.shape[-1]
    L = T // n
    if L < 2:
        raise SegmentationError(f"T={T} cannot be split into {n} segments of at least 2 samples")
    cut = f[..., : n * L]
    cut = cut.reshape(*f.shape[:-1], n, L)
    return np.moveaxis(cut, -2, -3)


def _normalize_channels(seg):
    centered = seg - seg.mean(axis=-1, keepdims=True)
    norms = np.sqrt(np.sum(centered * centered, axis=-1, keepdims=True))
    if np.any(norms == 0.0):
        raise DegenerateChannelError("segment contains a zero-variance channel")
    return centered / norms, norms


def correlation_state(seg):
    """Pearson correlation matrix of the channels of a ``C x L`` segment (or stack)."""
    z, _ = _normalize_channels(np.asarray(seg, dtype=np.float64))
    G = z @ np.swapaxes(z, -1, -2)
    G = 0.5 * (G + np.swapaxes(G, -1, -2))
    idx = np.arange(G.shape[-1])
    G[..., idx, idx] = 1.0
    return G


def correlation_backward(seg, grad_G):
    """Gradient through :func:`correlation_state` w.r.t. the raw segment."""
    z, norms = _normalize_channels(seg)
    dz = (grad_G + np.swapaxes(grad_G, -1, -2)) @ z
    du = (dz - z * np.sum(z * dz, axis=-1, keepdims=True)) / norms
    return du - du.mean(axis=-1, keepdims=True)


def add_jitter(data, scale, seed):
    rng = np.random.default_rng(seed)
    return data + scale * rng.standard_normal(np.shape(data))


def build_state_sequence(p, layout, x, gamma=DEFAULT_SHRINKAGE, eps=DEFAULT_FLOOR,
                         activation="tanh", use_filter=True, use_position=True,
                         jitter=0.0, jitter_seed=0):
    """Riemannian state sequence of one recording (or a ``B x C x T`` stack).

    Returns
    -------
    ndarray, shape (n, C, C) or (B, n, C, C)
    """
    data = x.data if isinstance(x, Recording) else np.asarray(x, dtype=np.float64)
    feats = spatiotemporal_filter(p, data, activation) if use_filter else data
    if use_position:
        gpe = geometric_position_encoding(layout, p.d_enc, p.gpe_gains)
        feats = inject_position(feats, gpe, p.gpe_projection)
    if jitter > 0.0:
        feats = add_jitter(feats, jitter, jitter_seed)
    G = correlation_state(segment(feats, p.n_segments))
    return to_spd(G, gamma, eps)
