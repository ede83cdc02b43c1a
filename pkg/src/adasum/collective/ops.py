"""Collective reductions over a :class:`RankContext`.

All collectives are bulk-synchronous: every rank of the world (or of the
named group) must call the same collective in the same order.

The Adasum allreduce follows recursive vector halving. At each level a rank
swaps half of its slice with the neighbour at distance ``d`` so that it holds
matching slices ``a`` (from the left subgroup) and ``b`` (from the right
subgroup), computes per-layer partial dot products on those slices, sums the
partials across the ``2d`` ranks that jointly hold the two logical vectors,
applies the adaptive-sum coefficients locally and recurses with ``2d``. The
halves are then gathered back in reverse order.
"""

from __future__ import annotations

import os
import zlib
from typing import Callable, Sequence

import numpy as np

from ..combiner import LayerLayout, _resolve_layout, adasum_coefficients
from ..errors import ConfigError, ProtocolError
from ..tensor import F16, as_tensor, quantize_f16, segment_axpby, segment_dot_triples, widen
from .transport import RankContext

PHASE_EXCHANGE = 1
PHASE_DOT = 2
PHASE_GATHER = 3
PHASE_SUM_SCATTER = 4
PHASE_SUM_GATHER = 5
PHASE_ALLREDUCE = 6
PHASE_CHECK = 7

ExpandFn = Callable[[Sequence[int]], list[int]]


def is_power_of_two(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def _require_world(ctx: RankContext) -> None:
    if not is_power_of_two(ctx.size):
        raise ConfigError(f"world size {ctx.size} is not a power of two")


def group_id(group: Sequence[int]) -> int:
    """16-bit fingerprint of a member list, carried in every message tag."""
    return zlib.crc32(np.asarray(group, dtype="<i8").tobytes()) & 0xFFFF


def sum_allreduce(ctx: RankContext, v, group: Sequence[int] | None = None, *,
                  phase: int = PHASE_ALLREDUCE, depth: int = 0) -> np.ndarray:
    """Elementwise sum of ``v`` over ``group``, returned on every member.

    Power-of-two groups use recursive doubling; other sizes reduce at the first
    member in list order and broadcast. Accumulation is in double, and every
    member ends with bitwise-identical values.
    """
    v = np.array(widen(as_tensor(v)), dtype=np.float64)
    group = list(range(ctx.size)) if group is None else [int(r) for r in group]
    if ctx.rank not in group:
        raise ProtocolError(f"rank {ctx.rank} is not a member of group {group}")
    n = len(group)
    if n == 1:
        return v
    pos = group.index(ctx.rank)
    gid = group_id(group)

    def checked(other):
        if other.shape != v.shape:
            raise ProtocolError(f"allreduce length mismatch: {other.shape[0]} vs {v.shape[0]}")
        return other

    if is_power_of_two(n):
        dist, step = 1, 0
        while dist < n:
            partner = group[pos ^ dist]
            tag = (phase, (depth << 5) | step, gid)
            ctx.send(partner, v, tag)
            # IEEE addition is commutative, so both partners get the same bits.
            v = v + checked(ctx.recv(partner, tag))
            dist <<= 1
            step += 1
        return v

    root = group[0]
    tag_up = (phase, (depth << 5) | 30, gid)
    tag_down = (phase, (depth << 5) | 31, gid)
    if ctx.rank == root:
        for r in group[1:]:
            v = v + checked(ctx.recv(r, tag_up))
        for r in group[1:]:
            ctx.send(r, v, tag_down)
        return v
    ctx.send(root, v, tag_up)
    return checked(ctx.recv(root, tag_down))


def _combine(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    out = widen(a) + widen(b)
    return quantize_f16(out) if a.dtype == F16 and b.dtype == F16 else out


def _exchange(ctx, x, members, vr, d, phase, level, gid):
    """Swap halves with the neighbour at distance ``d``.

    Returns ``(left, nghr, a, b, local_offset_of_kept_half)``.
    """
    mid = x.shape[0] // 2
    tag = (phase, level, gid)
    if (vr // d) % 2 == 0:
        nghr = members[vr + d]
        ctx.send(nghr, x[mid:], tag)
        a, b = x[:mid], ctx.recv(nghr, tag)
        keep = 0
        left = True
    else:
        nghr = members[vr - d]
        ctx.send(nghr, x[:mid], tag)
        a, b = ctx.recv(nghr, tag), x[mid:]
        keep = mid
        left = False
    if a.shape != b.shape:
        raise ProtocolError(f"halves differ in length: {a.shape[0]} vs {b.shape[0]}")
    return left, nghr, a, b, keep


def _gather(ctx, xr, nghr, left, phase, level, gid):
    tag = (phase, level, gid)
    ctx.send(nghr, xr, tag)
    y = ctx.recv(nghr, tag)
    return np.concatenate([xr, y]) if left else np.concatenate([y, xr])


def _adasum_level(ctx: RankContext, x: np.ndarray, offset: int, layout: LayerLayout,
                  members: list[int], d: int, expand: ExpandFn) -> np.ndarray:
    vr = members.index(ctx.rank)
    level = d.bit_length() - 1
    d2 = 2 * d
    base = (vr // d2) * d2
    group = members[base:base + d2]
    gid = group_id(group)

    left, nghr, a, b, keep = _exchange(ctx, x, members, vr, d, PHASE_EXCHANGE, level, gid)
    lo = offset + keep

    # Partial dot products for every layer fragment in the kept slice; the
    # group sum turns fragments into whole-layer products.
    idx, s, e = layout.fragments(lo, lo + a.shape[0])
    partial = np.zeros((layout.n_layers, 3))
    if idx.size:
        partial[idx] = segment_dot_triples(a, b, s, e)
    dot_group = expand(group)
    full = sum_allreduce(ctx, partial.ravel(), dot_group, phase=PHASE_DOT, depth=level)
    ca, cb = adasum_coefficients(full.reshape(-1, 3)[idx])
    xr = segment_axpby(ca, a, cb, b, e - s)

    if d2 < len(members):
        xr = _adasum_level(ctx, xr, lo, layout, members, d2, expand)
    return _gather(ctx, xr, nghr, left, PHASE_GATHER, level, gid)


def _sum_level(ctx: RankContext, x: np.ndarray, offset: int, members: list[int], d: int,
               inner: Callable[[np.ndarray, int], np.ndarray] | None) -> np.ndarray:
    vr = members.index(ctx.rank)
    level = d.bit_length() - 1
    d2 = 2 * d
    base = (vr // d2) * d2
    gid = group_id(members[base:base + d2])

    left, nghr, a, b, keep = _exchange(ctx, x, members, vr, d, PHASE_SUM_SCATTER, level, gid)
    lo = offset + keep
    xr = _combine(a, b)
    if d2 < len(members):
        xr = _sum_level(ctx, xr, lo, members, d2, inner)
    elif inner is not None:
        xr = inner(xr, lo)
    return _gather(ctx, xr, nghr, left, PHASE_SUM_GATHER, level, gid)


def adasum_rvh(ctx: RankContext, x, layout: LayerLayout | None = None) -> np.ndarray:
    """Adasum allreduce by recursive vector halving.

    Every rank returns the same vector, equal (up to rounding) to
    ``adasum_tree`` over the per-rank inputs with per-layer coefficients.
    """
    _require_world(ctx)
    x = as_tensor(x)
    layout = _resolve_layout(layout, x.shape[0])
    if ctx.size == 1:
        return x.copy()
    return _adasum_level(ctx, x, 0, layout, list(range(ctx.size)), 1, list)


def sum_rvh(ctx: RankContext, x) -> np.ndarray:
    """Elementwise-sum allreduce: recursive-halving reduce-scatter, then allgather."""
    _require_world(ctx)
    x = as_tensor(x)
    if ctx.size == 1:
        return x.copy()
    return _sum_level(ctx, x, 0, list(range(ctx.size)), 1, None)


def default_node_size() -> int:
    """Ranks per node from ``ADASUM_NODE_SIZE`` (default 1, flat)."""
    raw = os.environ.get("ADASUM_NODE_SIZE", "1")
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"ADASUM_NODE_SIZE={raw!r} is not an integer") from None


def hierarchical_adasum(ctx: RankContext, x, layout: LayerLayout | None = None,
                        node_size: int | None = None) -> np.ndarray:
    """Sum within nodes of ``node_size`` consecutive ranks, Adasum across nodes.

    Each node reduce-scatters its members' vectors by summation, owners of the
    same slice on different nodes run the Adasum allreduce on that slice
    (with dot products completed across every rank holding a fragment), and
    the node allgathers the result.
    """
    _require_world(ctx)
    node_size = default_node_size() if node_size is None else int(node_size)
    if node_size < 1 or ctx.size % node_size or not is_power_of_two(node_size):
        raise ConfigError(f"node size {node_size} must be a power of two dividing {ctx.size}")
    n_nodes = ctx.size // node_size
    x = as_tensor(x)
    layout = _resolve_layout(layout, x.shape[0])
    node, local = divmod(ctx.rank, node_size)
    local_members = [node * node_size + i for i in range(node_size)]
    cross_members = [k * node_size + local for k in range(n_nodes)]

    def expand(group):
        return sorted((m // node_size) * node_size + i for m in group for i in range(node_size))

    def inner(chunk, lo):
        if n_nodes == 1:
            return chunk
        return _adasum_level(ctx, chunk, lo, layout, cross_members, 1, expand)

    if node_size == 1:
        return inner(x.copy(), 0)
    return _sum_level(ctx, x, 0, local_members, 1, inner)


def check_consistent(ctx: RankContext, fingerprint: int) -> bool:
    """True when every rank passed the same 32-bit fingerprint."""
    v = np.zeros(ctx.size)
    v[ctx.rank] = float(fingerprint & 0xFFFFFFFF)
    everyone = sum_allreduce(ctx, v, phase=PHASE_CHECK)
    return bool(np.all(everyone == everyone[0]))
