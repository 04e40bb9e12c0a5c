"""Binary parameter checkpoints.

Layout (all little-endian): 4 magic bytes ``RMND``, a u32 format version,
seven u32 dims (C, T, n_segments, d_enc, k_t, width_mult, n_classes), two
f8 values (gamma, eps), then every parameter group as raw f8 in
:class:`~remind.model.ParamSet` field order. Group shapes follow from the
dims, so no per-array headers are stored.
"""

import struct

import numpy as np

from .errors import DataError
from .model import ModelConfig, ParamSet

MAGIC = b"RMND"
VERSION = 1
_HEADER = struct.Struct("<4sI7I2d")


def group_shapes(cfg: ModelConfig):
    C, T, d = cfg.n_channels, cfg.n_samples, cfg.tangent_dim
    h = cfg.width_mult * d
    return {
        "temporal": (cfg.k_t,),
        "spatial": (C, C),
        "gpe_gains": (3,),
        "gpe_projection": (3 * cfg.d_enc, T),
        "w_q": (C, C),
        "w_k": (C, C),
        "w_v": (C, C),
        "rec_w1": (d, h),
        "rec_b1": (h,),
        "rec_w2": (h, d),
        "rec_b2": (d,),
        "cls_w": (cfg.n_classes, d),
        "cls_b": (cfg.n_classes,),
    }


def save_checkpoint(path, params: ParamSet, cfg: ModelConfig):
    shapes = group_shapes(cfg)
    header = _HEADER.pack(MAGIC, VERSION, cfg.n_channels, cfg.n_samples, cfg.n_segments,
                          cfg.d_enc, cfg.k_t, cfg.width_mult, cfg.n_classes, cfg.gamma, cfg.eps)
    with open(path, "wb") as fh:
        fh.write(header)
        for name, value in params.items():
            value = np.asarray(value, dtype="<f8")
            if value.shape != shapes[name]:
                raise DataError(f"{name} has shape {value.shape}, expected {shapes[name]}")
            fh.write(value.tobytes(order="C"))


def read_header(buf):
    if len(buf) < _HEADER.size:
        raise DataError("checkpoint truncated in header")
    magic, version, C, T, n, d_enc, k_t, width, n_classes, gamma, eps = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DataError("not a checkpoint file (bad magic)")
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    return dict(n_channels=C, n_samples=T, n_segments=n, d_enc=d_enc, k_t=k_t,
                width_mult=width, n_classes=n_classes, gamma=gamma, eps=eps)


def load_checkpoint(path, **overrides):
    """Read ``(params, cfg)``. ``overrides`` set config fields not stored in
    the file (activation and ablation switches)."""
    with open(path, "rb") as fh:
        buf = fh.read()
    cfg = ModelConfig(**read_header(buf), **overrides)
    offset = _HEADER.size
    arrays = {}
    for name, shape in group_shapes(cfg).items():
        count = int(np.prod(shape))
        end = offset + 8 * count
        if end > len(buf):
            raise DataError(f"checkpoint truncated in group {name}")
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset = end
    if offset != len(buf):
        raise DataError("trailing bytes after last parameter group")
    return ParamSet(**arrays), cfg
