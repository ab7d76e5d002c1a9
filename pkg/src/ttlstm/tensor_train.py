"""Tensor-train containers and kernels.

Dense tensors are plain ``numpy.ndarray`` values in row-major (C) order;
mixed-radix linearization of multi-indices is big-endian in mode order
(mode 1 slowest), which is exactly what ``ndarray.reshape`` gives. All
indices are zero-based.

A TT tensor stores a chain of 3-way cores G_k of shape
(r_{k-1}, l_k, r_k) with boundary ranks r_0 = r_d = 1; an element is the
product of the matrix slices selected by the index tuple. A TT matrix
uses 4-way cores G_k of shape (n_k, m_k, r_{k-1}, r_k) obtained by fusing
a (row, column) factor pair into each mode. Within fused mode k the row
index j_k is the slower-varying (outer) index: fused = j_k * m_k + i_k.
This ordering is frozen because serialization depends on it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

__all__ = [
    "ShapeError",
    "CapacityError",
    "TTTensor",
    "TTMatrix",
    "ComplexityStats",
    "MacCounter",
    "reshape",
    "tt_decompose",
    "tt_element",
    "tt_reconstruct",
    "to_tt_matrix",
    "tt_matrix_to_dense",
    "tt_matvec",
    "complexity_stats",
]

DEFAULT_RECONSTRUCT_CAP = 10_000_000


class ShapeError(ValueError):
    """Mode sizes or factorizations do not fit together."""


class CapacityError(RuntimeError):
    """Refusing to materialize a dense tensor above the element cap."""


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) < 1 or any(s < 1 for s in shape):
        raise ShapeError(f"invalid shape {shape}: need d >= 1 and every mode size >= 1")
    return shape


def reshape(t: np.ndarray, new_shape: Sequence[int]) -> np.ndarray:
    """Relabel a tensor's modes without touching the row-major data order."""
    t = np.asarray(t)
    new_shape = _check_shape(new_shape)
    if math.prod(new_shape) != t.size:
        raise ShapeError(
            f"cannot reshape {t.size} elements into {new_shape} "
            f"(product {math.prod(new_shape)})"
        )
    return t.reshape(new_shape)


@dataclass
class TTTensor:
    """Tensor-train: cores[k] has shape (r_{k-1}, l_k, r_k), r_0 = r_d = 1."""

    cores: list[np.ndarray]

    def __post_init__(self):
        if not self.cores:
            raise ShapeError("TTTensor needs at least one core")
        self.cores = [np.asarray(c) for c in self.cores]
        for k, c in enumerate(self.cores):
            if c.ndim != 3:
                raise ShapeError(f"core {k} must be 3-way, got shape {c.shape}")
        if self.cores[0].shape[0] != 1 or self.cores[-1].shape[2] != 1:
            raise ShapeError("boundary ranks must be 1")
        for k in range(len(self.cores) - 1):
            if self.cores[k].shape[2] != self.cores[k + 1].shape[0]:
                raise ShapeError(
                    f"rank mismatch between cores {k} and {k + 1}: "
                    f"{self.cores[k].shape[2]} vs {self.cores[k + 1].shape[0]}"
                )

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def shape(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[2] for c in self.cores)


@dataclass
class TTMatrix:
    """TT matrix: cores[k] has shape (n_k, m_k, r_{k-1}, r_k)."""

    cores: list[np.ndarray]

    def __post_init__(self):
        if not self.cores:
            raise ShapeError("TTMatrix needs at least one core")
        self.cores = [np.asarray(c) for c in self.cores]
        for k, c in enumerate(self.cores):
            if c.ndim != 4:
                raise ShapeError(f"core {k} must be 4-way, got shape {c.shape}")
        if self.cores[0].shape[2] != 1 or self.cores[-1].shape[3] != 1:
            raise ShapeError("boundary ranks must be 1")
        for k in range(len(self.cores) - 1):
            if self.cores[k].shape[3] != self.cores[k + 1].shape[2]:
                raise ShapeError(
                    f"rank mismatch between cores {k} and {k + 1}: "
                    f"{self.cores[k].shape[3]} vs {self.cores[k + 1].shape[2]}"
                )

    @property
    def d(self) -> int:
        return len(self.cores)

    @property
    def row_factors(self) -> tuple[int, ...]:
        return tuple(c.shape[0] for c in self.cores)

    @property
    def col_factors(self) -> tuple[int, ...]:
        return tuple(c.shape[1] for c in self.cores)

    @property
    def ranks(self) -> tuple[int, ...]:
        return (1,) + tuple(c.shape[3] for c in self.cores)

    @property
    def n_rows(self) -> int:
        return math.prod(self.row_factors)

    @property
    def n_cols(self) -> int:
        return math.prod(self.col_factors)


@dataclass
class ComplexityStats:
    """Parameter and multiply-accumulate counts for a TT matrix vs its dense form.

    tt_mac_count is the exact multiply count of the left-to-right core-chain
    contraction performed by :func:`tt_matvec`; an instrumented run must
    match it integer-exactly.
    """

    d: int
    r_max: int
    n_m: int
    tt_param_count: int
    dense_param_count: int
    tt_mac_count: int
    dense_mac_count: int


class MacCounter:
    """Accumulates scalar multiply-accumulate counts across contractions."""

    def __init__(self):
        self.count = 0

    def add(self, n: int) -> None:
        self.count += int(n)


def _interior_caps(max_ranks, d: int) -> list[int] | None:
    """Normalize a rank cap spec into d-1 interior bond caps."""
    if max_ranks is None:
        return None
    if np.isscalar(max_ranks):
        cap = int(max_ranks)
        if cap < 1:
            raise ShapeError(f"max rank must be >= 1, got {cap}")
        return [cap] * (d - 1)
    caps = [int(r) for r in max_ranks]
    if len(caps) == d + 1:
        if caps[0] != 1 or caps[-1] != 1:
            raise ShapeError("boundary ranks in a full rank vector must be 1")
        caps = caps[1:-1]
    if len(caps) != d - 1:
        raise ShapeError(
            f"rank cap list must have length {d - 1} (interior) or {d + 1} (full), "
            f"got {len(caps)}"
        )
    if any(c < 1 for c in caps):
        raise ShapeError("rank caps must be >= 1")
    return caps


def tt_decompose(t: np.ndarray, max_ranks=None, tol: float | None = None) -> TTTensor:
    """TT-SVD: left-to-right sweep of truncated SVDs on successive unfoldings.

    ``max_ranks`` hard-caps the interior bond ranks (scalar, interior list,
    or full rank vector). ``tol`` is a relative Frobenius-error target,
    split evenly across the d-1 truncations as tol/sqrt(d-1) (the standard
    error-splitting rule). With neither given, ranks are full and the
    decomposition is exact to rounding. Ties in singular values keep the
    lower index (SVD order).
    """
    t = np.asarray(t, dtype=np.float64)
    shape = t.shape
    if t.ndim < 2:
        raise ShapeError(f"tt_decompose needs d >= 2 modes, got shape {shape}")
    if any(s == 0 for s in shape):
        raise ShapeError(f"degenerate shape {shape}")
    d = t.ndim
    caps = _interior_caps(max_ranks, d)
    if tol is not None and not (0.0 < tol < 1.0):
        raise ShapeError(f"tolerance must lie in (0, 1), got {tol}")
    delta = None
    if tol is not None:
        delta = tol * np.linalg.norm(t) / math.sqrt(d - 1)

    cores: list[np.ndarray] = []
    c = t
    r_prev = 1
    for k in range(d - 1):
        mat = c.reshape(r_prev * shape[k], -1)
        u, s, vt = np.linalg.svd(mat, full_matrices=False)
        r = len(s)
        if delta is not None:
            # smallest r with tail energy sum_{i>=r} s_i^2 <= delta^2
            tail = np.cumsum(s[::-1] ** 2)[::-1]
            keep = np.nonzero(tail > delta**2)[0]
            r = int(keep[-1]) + 1 if keep.size else 1
        if caps is not None:
            r = min(r, caps[k])
        r = max(r, 1)
        cores.append(u[:, :r].reshape(r_prev, shape[k], r))
        c = s[:r, None] * vt[:r, :]
        r_prev = r
    cores.append(c.reshape(r_prev, shape[-1], 1))
    return TTTensor(cores)


def tt_element(tt: TTTensor, indices: Sequence[int]) -> float:
    """Evaluate one element: the product of the cores' selected matrix slices."""
    if len(indices) != tt.d:
        raise IndexError(f"expected {tt.d} indices, got {len(indices)}")
    for k, (h, l) in enumerate(zip(indices, tt.shape)):
        if not 0 <= h < l:
            raise IndexError(f"index {h} out of bounds for mode {k} of size {l}")
    v = tt.cores[0][:, indices[0], :]
    for k in range(1, tt.d):
        v = v @ tt.cores[k][:, indices[k], :]
    return float(v[0, 0])


def tt_reconstruct(tt: TTTensor, max_elements: int = DEFAULT_RECONSTRUCT_CAP) -> np.ndarray:
    """Materialize the dense tensor; refuses above ``max_elements``."""
    total = math.prod(tt.shape)
    if total > max_elements:
        raise CapacityError(
            f"reconstruction would produce {total} elements (cap {max_elements})"
        )
    m = tt.cores[0].reshape(tt.shape[0], -1)  # (l_1, r_1)
    for k in range(1, tt.d):
        core = tt.cores[k]
        m = np.tensordot(m, core, axes=(1, 0))  # (prod l_<k, l_k, r_k)
        m = m.reshape(-1, core.shape[2])
    return m.reshape(tt.shape)


def _fused_permutation(d: int) -> list[int]:
    """Axis order turning (n_1..n_d, m_1..m_d) into (n_1, m_1, n_2, m_2, ...)."""
    order = []
    for k in range(d):
        order.extend([k, d + k])
    return order


def to_tt_matrix(
    w: np.ndarray,
    row_factors: Sequence[int],
    col_factors: Sequence[int],
    max_ranks=None,
    tol: float | None = None,
) -> TTMatrix:
    """Decompose a dense (N, M) matrix into TT-matrix form.

    Row and column factorizations are interleaved into d fused modes of
    size n_k*m_k (row index outer), decomposed with :func:`tt_decompose`,
    and each core's fused mode is split back into (n_k, m_k).
    """
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2:
        raise ShapeError(f"expected a matrix, got shape {w.shape}")
    row_factors = _check_shape(row_factors)
    col_factors = _check_shape(col_factors)
    if len(row_factors) != len(col_factors):
        raise ShapeError(
            f"row/col factor counts differ: {len(row_factors)} vs {len(col_factors)}"
        )
    n, m = w.shape
    if math.prod(row_factors) != n or math.prod(col_factors) != m:
        raise ShapeError(
            f"factorizations {row_factors} x {col_factors} do not match shape {w.shape}"
        )
    d = len(row_factors)
    if d == 1:
        return TTMatrix([w.reshape(n, m, 1, 1)])

    fused = w.reshape(row_factors + col_factors)
    fused = fused.transpose(_fused_permutation(d))
    fused = fused.reshape([nk * mk for nk, mk in zip(row_factors, col_factors)])
    tt = tt_decompose(fused, max_ranks=max_ranks, tol=tol)
    cores = []
    for core, nk, mk in zip(tt.cores, row_factors, col_factors):
        rp, _, rn = core.shape
        cores.append(core.reshape(rp, nk, mk, rn).transpose(1, 2, 0, 3))
    return TTMatrix(cores)


def tt_matrix_to_dense(
    w: TTMatrix, max_elements: int = DEFAULT_RECONSTRUCT_CAP
) -> np.ndarray:
    """Materialize the dense (N, M) matrix a TT matrix represents."""
    n, m = w.n_rows, w.n_cols
    if n * m > max_elements:
        raise CapacityError(
            f"dense matrix would have {n * m} elements (cap {max_elements})"
        )
    fused_cores = [c.transpose(2, 0, 1, 3).reshape(c.shape[2], -1, c.shape[3]) for c in w.cores]
    fused = tt_reconstruct(TTTensor(fused_cores), max_elements=max_elements)
    d = w.d
    split = []
    for nk, mk in zip(w.row_factors, w.col_factors):
        split.extend([nk, mk])
    fused = fused.reshape(split)
    rows_first = list(range(0, 2 * d, 2)) + list(range(1, 2 * d, 2))
    return fused.transpose(rows_first).reshape(n, m)


def _matvec_batch(
    cores: list[np.ndarray],
    x: np.ndarray,
    counter: MacCounter | None = None,
    keep_caches: bool = False,
):
    """Contract a batch of vectors through the core chain, core by core.

    ``x`` has shape (B, M). Returns (B, N) plus, if requested, the cached
    per-step operands needed for reverse-mode differentiation. The running
    operand is (B, rows_done, r_k, cols_left); step k contracts the pair
    (r_{k-1}, m_k) against core k. The dense matrix is never materialized.
    """
    b = x.shape[0]
    a = x.reshape(b, 1, 1, -1)
    caches = [] if keep_caches else None
    for core in cores:
        nk, mk, rp, rn = core.shape
        p = a.shape[1]
        q = a.shape[3] // mk
        a4 = a.reshape(b, p, rp, mk, q)
        if keep_caches:
            caches.append(a4)
        if counter is not None:
            counter.add(b * p * nk * rn * q * rp * mk)
        a = np.einsum("bpriq,nirs->bpnsq", a4, core, optimize=True)
        a = a.reshape(b, p * nk, rn, q)
    y = a.reshape(b, -1)
    return (y, caches) if keep_caches else (y, None)


def _matvec_batch_backward(
    cores: list[np.ndarray], caches: list[np.ndarray], dy: np.ndarray
):
    """Reverse-mode of :func:`_matvec_batch`: gradients for x and every core."""
    b = dy.shape[0]
    da = dy.reshape(b, -1, 1, 1)
    dcores: list[np.ndarray] = [None] * len(cores)
    for k in range(len(cores) - 1, -1, -1):
        core = cores[k]
        nk, mk, rp, rn = core.shape
        a4 = caches[k]
        _, p, _, _, q = a4.shape
        da5 = da.reshape(b, p, nk, rn, q)
        dcores[k] = np.einsum("bpnsq,bpriq->nirs", da5, a4, optimize=True)
        da = np.einsum("bpnsq,nirs->bpriq", da5, core, optimize=True)
        da = da.reshape(b, p, rp, mk * q)
    dx = da.reshape(b, -1)
    return dx, dcores


def tt_matvec(
    w: TTMatrix,
    x: np.ndarray,
    b: np.ndarray | None = None,
    counter: MacCounter | None = None,
    dtype=None,
) -> np.ndarray:
    """y = W x + b through the core chain, returned as an n_1 x ... x n_d tensor.

    ``x`` may be flat of length M or shaped like the column factors; ``b``
    likewise against the row factors (None means zero). ``dtype`` selects
    the contraction precision (float32 fast path permitted; tolerances
    relax accordingly).
    """
    x = np.asarray(x)
    if x.size != w.n_cols:
        raise ShapeError(f"x has {x.size} entries, expected {w.n_cols}")
    if x.ndim > 1 and x.shape != w.col_factors:
        raise ShapeError(f"x shape {x.shape} does not match col factors {w.col_factors}")
    dtype = np.dtype(dtype) if dtype is not None else np.float64
    cores = [c.astype(dtype, copy=False) for c in w.cores]
    y, _ = _matvec_batch(cores, x.reshape(1, -1).astype(dtype, copy=False), counter)
    y = y.reshape(w.row_factors)
    if b is not None:
        b = np.asarray(b)
        if b.size != w.n_rows:
            raise ShapeError(f"b has {b.size} entries, expected {w.n_rows}")
        if b.ndim > 1 and b.shape != w.row_factors:
            raise ShapeError(
                f"b shape {b.shape} does not match row factors {w.row_factors}"
            )
        y = y + b.reshape(w.row_factors).astype(dtype, copy=False)
    return y


def _tt_mac_formula(row_factors, col_factors, ranks) -> int:
    """Exact multiply count of the left-to-right chain contraction."""
    total = 0
    rows_done = 1
    cols_left = math.prod(col_factors)
    d = len(row_factors)
    for k in range(d):
        nk, mk = row_factors[k], col_factors[k]
        cols_left //= mk
        total += rows_done * nk * ranks[k + 1] * cols_left * ranks[k] * mk
        rows_done *= nk
    return total


def complexity_stats(w: TTMatrix) -> ComplexityStats:
    """Parameter and MAC counts for a TT matrix against its dense equivalent."""
    ranks = w.ranks
    tt_params = sum(
        ranks[k] * w.row_factors[k] * w.col_factors[k] * ranks[k + 1]
        for k in range(w.d)
    )
    dense = w.n_rows * w.n_cols
    return ComplexityStats(
        d=w.d,
        r_max=max(ranks),
        n_m=max(nk * mk for nk, mk in zip(w.row_factors, w.col_factors)),
        tt_param_count=int(tt_params),
        dense_param_count=int(dense),
        tt_mac_count=_tt_mac_formula(w.row_factors, w.col_factors, ranks),
        dense_mac_count=int(dense),
    )
