"""Tensor fusion: pack many per-layer tensors into few contiguous buffers.

Buffers record each tensor's boundaries so the Adasum allreduce still
computes dot products per layer. Packing is by ascending tensor id, so every
rank that fuses the same set of tensors builds identical buffers.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Hashable, Iterable

import numpy as np

from ..combiner import LayerLayout
from ..errors import ConfigError
from ..tensor import as_tensor
from .ops import adasum_rvh, hierarchical_adasum, sum_rvh
from .transport import RankContext

DEFAULT_FUSION_THRESHOLD = 4 * 1024 * 1024


def fusion_threshold() -> int:
    """Buffer cap in bytes from ``ADASUM_FUSION_THRESHOLD`` (default 4 MiB)."""
    raw = os.environ.get("ADASUM_FUSION_THRESHOLD")
    if raw is None:
        return DEFAULT_FUSION_THRESHOLD
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"ADASUM_FUSION_THRESHOLD={raw!r} is not an integer") from None
    if value <= 0:
        raise ConfigError("ADASUM_FUSION_THRESHOLD must be positive")
    return value


@dataclass
class FusedBuffer:
    data: np.ndarray
    layout: LayerLayout
    source_ids: tuple
    # Zero-length tensors occupy no segment but must survive a round trip.
    empty_ids: tuple = field(default=())

    @property
    def nbytes(self) -> int:
        return self.data.nbytes


def _pack(items, dtype) -> FusedBuffer:
    nonempty = [(k, t) for k, t in items if t.shape[0]]
    data = (np.concatenate([t for _, t in nonempty]) if nonempty
            else np.zeros(0, dtype=dtype))
    return FusedBuffer(
        data=data,
        layout=LayerLayout.from_sizes([t.shape[0] for _, t in nonempty]),
        source_ids=tuple(k for k, _ in nonempty),
        empty_ids=tuple(k for k, t in items if not t.shape[0]),
    )


def fuse(tensors: Iterable[tuple[Hashable, np.ndarray]], threshold: int | None = None) -> list[FusedBuffer]:
    """Pack ``(id, tensor)`` pairs into buffers of at most ``threshold`` bytes.

    A single tensor larger than the threshold gets a buffer of its own. A new
    buffer also starts whenever the dtype changes.
    """
    threshold = fusion_threshold() if threshold is None else threshold
    items = [(k, as_tensor(t)) for k, t in tensors]
    ids = [k for k, _ in items]
    if len(set(ids)) != len(ids):
        raise ValueError("tensor ids must be unique")
    items.sort(key=lambda kv: kv[0])

    buffers, current, used = [], [], 0
    for key, t in items:
        fits = used + t.nbytes <= threshold
        same = not current or current[0][1].dtype == t.dtype
        if current and not (fits and same):
            buffers.append(_pack(current, current[0][1].dtype))
            current, used = [], 0
        current.append((key, t))
        used += t.nbytes
    if current:
        buffers.append(_pack(current, current[0][1].dtype))
    return buffers


def unfuse(buf: FusedBuffer) -> list[tuple[Hashable, np.ndarray]]:
    """Inverse of :func:`fuse` for one buffer, in ascending id order."""
    out = [(k, seg.copy()) for k, seg in zip(buf.source_ids, buf.layout.split(buf.data))]
    out += [(k, np.zeros(0, dtype=buf.data.dtype)) for k in buf.empty_ids]
    out.sort(key=lambda kv: kv[0])
    return out


def fused_allreduce(ctx: RankContext, tensors: Iterable[tuple[Hashable, np.ndarray]], op: str = "adasum",
                    threshold: int | None = None, node_size: int = 1) -> dict:
    """Fuse, allreduce each buffer with ``op`` ("adasum" or "sum"), and unfuse."""
    result = {}
    for buf in fuse(tensors, threshold):
        if op == "adasum":
            if node_size > 1:
                buf.data = hierarchical_adasum(ctx, buf.data, buf.layout, node_size)
            else:
                buf.data = adasum_rvh(ctx, buf.data, buf.layout)
        elif op == "sum":
            buf.data = sum_rvh(ctx, buf.data)
        else:
            raise ValueError(f"unknown reduction {op!r}")
        result.update(unfuse(buf))
    return result
