"""Adaptive summation of gradients.

The pairwise operator scales each operand by ``1 - a.b / (2 |x|^2)`` and
adds. Orthogonal inputs are summed, parallel equal-norm inputs are averaged,
and everything in between is interpolated. Coefficients are computed per
layer when a :class:`LayerLayout` is supplied.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import DegenerateDistributionError, ShapeError, UndefinedMetricError
from .tensor import as_tensor, axpby, segment_axpby, segment_dot_triples, widen


class NonFiniteWarning(RuntimeWarning):
    pass


@dataclass(frozen=True)
class LayerLayout:
    """Partition of a flat vector into contiguous layer segments."""

    boundaries: tuple[tuple[int, int], ...]

    def __post_init__(self):
        bounds = tuple((int(o), int(n)) for o, n in self.boundaries)
        object.__setattr__(self, "boundaries", bounds)
        pos = 0
        for off, length in bounds:
            if off != pos or length <= 0:
                raise ShapeError(f"layout segments must tile [0, total) contiguously: {bounds}")
            pos += length
        object.__setattr__(self, "_starts", np.array([o for o, _ in bounds], dtype=np.int64))
        object.__setattr__(self, "_ends", np.array([o + n for o, n in bounds], dtype=np.int64))

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> "LayerLayout":
        bounds, off = [], 0
        for n in sizes:
            bounds.append((off, int(n)))
            off += int(n)
        return cls(tuple(bounds))

    @classmethod
    def whole(cls, n: int) -> "LayerLayout":
        return cls(((0, n),) if n > 0 else ())

    @property
    def total(self) -> int:
        return int(self._ends[-1]) if len(self.boundaries) else 0

    @property
    def n_layers(self) -> int:
        return len(self.boundaries)

    @property
    def starts(self) -> np.ndarray:
        return self._starts

    @property
    def ends(self) -> np.ndarray:
        return self._ends

    @property
    def lengths(self) -> np.ndarray:
        return self._ends - self._starts

    def fragments(self, lo: int, hi: int):
        """Layers intersecting ``[lo, hi)``.

        Returns ``(layer_index, local_start, local_end)`` arrays with local
        offsets relative to ``lo``.
        """
        if hi <= lo:
            empty = np.zeros(0, dtype=np.int64)
            return empty, empty, empty
        first = int(np.searchsorted(self._ends, lo, side="right"))
        last = int(np.searchsorted(self._starts, hi, side="left"))
        idx = np.arange(first, last, dtype=np.int64)
        s = np.maximum(self._starts[first:last], lo) - lo
        e = np.minimum(self._ends[first:last], hi) - lo
        return idx, s, e

    def split(self, t: np.ndarray) -> list[np.ndarray]:
        return [t[o : o + n] for o, n in self.boundaries]


def _resolve_layout(layout: LayerLayout | None, n: int) -> LayerLayout:
    if layout is None:
        return LayerLayout.whole(n)
    if layout.total != n:
        raise ShapeError(f"layout covers {layout.total} elements, vector has {n}")
    return layout


def adasum_coefficients(triples: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Coefficient pair for each ``(ab, aa, bb)`` row.

    A zero-norm operand gets coefficient 1 on the other operand, so
    ``adasum(0, g) == g``.
    """
    triples = np.asarray(triples, dtype=np.float64).reshape(-1, 3)
    ab, aa, bb = triples[:, 0], triples[:, 1], triples[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        ca = np.where(aa == 0.0, 1.0, 1.0 - ab / (2.0 * aa))
        cb = np.where(bb == 0.0, 1.0, 1.0 - ab / (2.0 * bb))
    return ca, cb


def adasum_pair(g1, g2, layout: LayerLayout | None = None) -> np.ndarray:
    """Combine two gradients with the adaptive-sum operator.

    >>> adasum_pair([1.0, 0.0], [1.0, 1.0])
    array([1.25, 0.75])
    """
    g1 = as_tensor(g1)
    g2 = as_tensor(g2)
    if g1.shape != g2.shape:
        raise ShapeError(f"length mismatch: {g1.shape[0]} vs {g2.shape[0]}")
    layout = _resolve_layout(layout, g1.shape[0])
    if layout.n_layers == 0:
        return axpby(1.0, g1, 1.0, g2)
    triples = segment_dot_triples(g1, g2, layout.starts, layout.ends)
    if not np.isfinite(triples).all():
        warnings.warn("non-finite values in adasum operands", NonFiniteWarning, stacklevel=2)
    ca, cb = adasum_coefficients(triples)
    return segment_axpby(ca, g1, cb, g2, layout.lengths)


def _check_list(gs) -> list[np.ndarray]:
    gs = [as_tensor(g) for g in gs]
    if not gs:
        raise ValueError("need at least one gradient")
    n = gs[0].shape[0]
    for g in gs:
        if g.shape[0] != n:
            raise ShapeError("all gradients must have the same length")
    return gs


def adasum_linear(gs, layout: LayerLayout | None = None) -> np.ndarray:
    """Left fold: ``adasum(adasum(adasum(g0, g1), g2), ...)``."""
    gs = _check_list(gs)
    acc = gs[0].copy()
    for g in gs[1:]:
        acc = adasum_pair(acc, g, layout)
    return acc


def adasum_tree(gs, layout: LayerLayout | None = None) -> np.ndarray:
    """Balanced recursion, splitting at ``floor(n/2)``.

    For power-of-two counts this is the reduction order of the
    recursive-halving allreduce and serves as its in-memory reference.
    """
    gs = _check_list(gs)

    def rec(lo, hi):
        if hi - lo == 1:
            return gs[lo].copy()
        mid = lo + (hi - lo) // 2
        return adasum_pair(rec(lo, mid), rec(mid, hi), layout)

    return rec(0, len(gs))


def orthogonality(gs, layout: LayerLayout | None = None, per_layer: bool = False):
    """``|adasum_tree(gs)|^2 / sum_i |g_i|^2``.

    Equals 1 for mutually orthogonal gradients and ``1/n`` for ``n``
    identical ones. With ``per_layer=True`` an array with one value per
    layout segment is returned instead of the whole-vector figure.
    """
    gs = _check_list(gs)
    layout = _resolve_layout(layout, gs[0].shape[0])
    combined = widen(adasum_tree(gs, layout))
    if not per_layer:
        denom = sum(float(np.dot(widen(g), widen(g))) for g in gs)
        if denom == 0.0:
            raise UndefinedMetricError("orthogonality of all-zero gradients is undefined")
        return float(np.dot(combined, combined)) / denom
    num = np.array([float(np.dot(s, s)) for s in layout.split(combined)])
    denom = np.zeros(layout.n_layers)
    for g in gs:
        denom += [float(np.dot(s, s)) for s in layout.split(widen(g))]
    if np.any(denom == 0.0):
        raise UndefinedMetricError("orthogonality undefined for a layer with all-zero gradients")
    return num / denom


# --- finite-distribution analysis -------------------------------------------


@dataclass(frozen=True)
class FiniteDistribution:
    """Uniform distribution over ``N`` atoms (rows of ``atoms``)."""

    atoms: np.ndarray

    def __post_init__(self):
        atoms = np.atleast_2d(np.asarray(self.atoms, dtype=np.float64))
        if atoms.shape[0] < 1 or atoms.ndim != 2:
            raise ShapeError("need at least one atom")
        object.__setattr__(self, "atoms", atoms)

    @property
    def mean(self) -> np.ndarray:
        return self.atoms.mean(axis=0)

    def projector_mean(self) -> np.ndarray:
        """``M = (1/N) sum x x^T / |x|^2``."""
        norms = np.einsum("ij,ij->i", self.atoms, self.atoms)
        if np.any(norms == 0.0):
            raise DegenerateDistributionError("distribution contains a zero-norm atom")
        unit = self.atoms / np.sqrt(norms)[:, None]
        return unit.T @ unit / self.atoms.shape[0]


def expected_combined(X: FiniteDistribution) -> np.ndarray:
    """Mean of ``adasum(a, b)`` for independent ``a, b ~ X``: ``(2I - M) E[X]``."""
    M = X.projector_mean()
    return 2.0 * X.mean - M @ X.mean


def ordered_pair_average(X: FiniteDistribution) -> np.ndarray:
    """Brute-force mean of ``adasum_pair`` over all ``N^2`` ordered pairs."""
    atoms = X.atoms
    total = np.zeros(atoms.shape[1])
    for a in atoms:
        for b in atoms:
            total += adasum_pair(a, b)
    return total / atoms.shape[0] ** 2


def jacobi_eigenvalues(A, tol: float = 1e-12, max_sweeps: int = 100) -> np.ndarray:
    """Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending."""
    A = np.array(A, dtype=np.float64)
    n = A.shape[0]
    if A.shape != (n, n):
        raise ShapeError("matrix must be square")
    A = 0.5 * (A + A.T)
    scale = max(np.abs(A).max(), 1.0) if n else 1.0
    for _ in range(max_sweeps):
        off = np.abs(A - np.diag(np.diag(A))).max() if n > 1 else 0.0
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = A[p, q]
                if abs(apq) <= 1e-300:
                    continue
                theta = (A[q, q] - A[p, p]) / (2.0 * apq)
                if abs(theta) > 1e150:
                    t = 0.5 / theta
                else:
                    t = math.copysign(1.0, theta) / (abs(theta) + math.sqrt(theta * theta + 1.0))
                c = 1.0 / math.sqrt(t * t + 1.0)
                s = t * c
                rp = A[p, :].copy()
                rq = A[q, :].copy()
                A[p, :] = c * rp - s * rq
                A[q, :] = s * rp + c * rq
                cp = A[:, p].copy()
                cq = A[:, q].copy()
                A[:, p] = c * cp - s * cq
                A[:, q] = s * cp + c * cq
    return np.sort(np.diag(A))


class LemmaReport(NamedTuple):
    cos_angle: float
    norm_ratio: float
    eig_min: float
    eig_max: float


# Worst-case cosine between E[X] and (2I - M) E[X] when the spectrum of
# 2I - M lies in [1, 2]: 2*sqrt(2)/3.
MIN_COS_ANGLE = 2.0 * math.sqrt(2.0) / 3.0


def lemma_checks(X: FiniteDistribution) -> LemmaReport:
    """Angle, norm ratio, and spectrum of the expected one-level combination."""
    ex = X.mean
    nx = float(np.linalg.norm(ex))
    if nx == 0.0:
        raise DegenerateDistributionError("E[X] is zero; angle undefined")
    ey = expected_combined(X)
    ny = float(np.linalg.norm(ey))
    eig = jacobi_eigenvalues(2.0 * np.eye(ex.shape[0]) - X.projector_mean())
    return LemmaReport(
        cos_angle=float(ex @ ey) / (nx * ny),
        norm_ratio=ny / nx,
        eig_min=float(eig[0]),
        eig_max=float(eig[-1]),
    )


def random_distribution(rng: np.random.Generator, dim: int, n_atoms: int) -> FiniteDistribution:
    """Draw a test distribution: gaussian cloud, near-parallel cluster, or a mixture."""
    kind = rng.integers(3)
    if kind == 0:
        atoms = rng.standard_normal((n_atoms, dim))
    elif kind == 1:
        direction = rng.standard_normal(dim)
        spread = 10.0 ** rng.uniform(-4, -1)
        atoms = direction * rng.uniform(0.1, 3.0, (n_atoms, 1)) + spread * rng.standard_normal((n_atoms, dim))
    else:
        k = int(rng.integers(1, 4))
        centers = rng.standard_normal((k, dim)) * rng.uniform(0.5, 5.0)
        labels = rng.integers(k, size=n_atoms)
        atoms = centers[labels] + 0.2 * rng.standard_normal((n_atoms, dim))
    norms = np.linalg.norm(atoms, axis=1)
    atoms[norms == 0.0] = 1.0
    if np.linalg.norm(atoms.mean(axis=0)) < 1e-8:
        atoms[0] += 1.0
    return FiniteDistribution(atoms)
