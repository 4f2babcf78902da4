"""Numerical kernels: CSR/dense/low-rank products, truncated SVD, fixed-point and tridiagonal solvers."""

from __future__ import annotations

from dataclasses import dataclass

import numba as nb
import numpy as np

INDPTR_DTYPE = np.uint64
INDEX_DTYPE = np.uint32
VALUE_DTYPE = np.float32


class ConvergenceError(RuntimeError):
    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


# ---------------------------------------------------------------------------
# kernels (64-bit accumulation over float32 storage)

@nb.njit(cache=True)
def _csr_matmat(indptr, indices, data, x, y):
    m = indptr.shape[0] - 1
    k = x.shape[1]
    for i in range(m):
        for p in range(np.int64(indptr[i]), np.int64(indptr[i + 1])):
            a = np.float64(data[p])
            j = np.int64(indices[p])
            for c in range(k):
                y[i, c] += a * x[j, c]


@nb.njit(cache=True)
def _csr_rmatmat(indptr, indices, data, x, y):
    m = indptr.shape[0] - 1
    k = x.shape[1]
    for i in range(m):
        for p in range(np.int64(indptr[i]), np.int64(indptr[i + 1])):
            a = np.float64(data[p])
            j = np.int64(indices[p])
            for c in range(k):
                y[j, c] += a * x[i, c]


@nb.njit(cache=True)
def _dense_matmat(a, x, y):
    m, n = a.shape
    k = x.shape[1]
    for i in range(m):
        for c in range(k):
            s = 0.0
            for j in range(n):
                s += np.float64(a[i, j]) * x[j, c]
            y[i, c] += s


@nb.njit(cache=True)
def _csr_slice(indptr, indices, data, r0, r1, c0, c1):
    m = r1 - r0
    out_ptr = np.zeros(m + 1, np.uint64)
    lo = np.empty(m, np.int64)
    hi = np.empty(m, np.int64)
    for r in range(m):
        a = np.int64(indptr[r0 + r])
        b = np.int64(indptr[r0 + r + 1])
        row = indices[a:b]
        lo[r] = a + np.searchsorted(row, np.uint32(c0))
        hi[r] = a + np.searchsorted(row, np.uint32(c1))
        out_ptr[r + 1] = out_ptr[r] + np.uint64(hi[r] - lo[r])
    nnz = np.int64(out_ptr[m])
    out_idx = np.empty(nnz, np.uint32)
    out_val = np.empty(nnz, np.float32)
    q = 0
    for r in range(m):
        for p in range(lo[r], hi[r]):
            out_idx[q] = indices[p] - np.uint32(c0)
            out_val[q] = data[p]
            q += 1
    return out_ptr, out_idx, out_val


def _as_columns(x, n):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != n or x.ndim not in (1, 2):
        raise ValueError(f"dimension mismatch: operand has {x.shape[0]} rows, expected {n}")
    return np.ascontiguousarray(x.reshape(n, -1)), x.ndim == 1


# ---------------------------------------------------------------------------
# block types

@dataclass(frozen=True, eq=False)
class SparseCsr:
    """CSR matrix: u64 row pointers, u32 column indices, f32 values."""

    nrows: int
    ncols: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indptr", np.ascontiguousarray(self.indptr, dtype=INDPTR_DTYPE))
        object.__setattr__(self, "indices", np.ascontiguousarray(self.indices, dtype=INDEX_DTYPE))
        object.__setattr__(self, "data", np.ascontiguousarray(self.data, dtype=VALUE_DTYPE))
        if self.indptr.shape != (self.nrows + 1,):
            raise ValueError("row pointer array must have nrows + 1 entries")
        if int(self.indptr[-1]) != len(self.indices) or len(self.indices) != len(self.data):
            raise ValueError("nnz mismatch between row pointers, indices and values")

    @property
    def shape(self):
        return (self.nrows, self.ncols)

    @property
    def nnz(self) -> int:
        return int(self.indptr[-1])

    @property
    def nbytes(self) -> int:
        return 8 * (self.nrows + 1) + 8 * self.nnz

    @classmethod
    def empty(cls, nrows, ncols):
        return cls(nrows, ncols, np.zeros(nrows + 1), np.zeros(0), np.zeros(0))

    @classmethod
    def identity(cls, n):
        return cls(n, n, np.arange(n + 1), np.arange(n), np.ones(n))

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=VALUE_DTYPE)
        rows, cols = np.nonzero(a)
        indptr = np.zeros(a.shape[0] + 1, INDPTR_DTYPE)
        np.cumsum(np.bincount(rows, minlength=a.shape[0]), out=indptr[1:])
        return cls(a.shape[0], a.shape[1], indptr, cols, a[rows, cols])

    def to_dense(self) -> np.ndarray:
        out = np.zeros(self.shape, VALUE_DTYPE)
        rows = np.repeat(np.arange(self.nrows), np.diff(self.indptr.astype(np.int64)))
        out[rows, self.indices.astype(np.int64)] = self.data
        return out

    def to_scipy(self):
        import scipy.sparse as sp
        return sp.csr_matrix((self.data, self.indices.astype(np.int64), self.indptr.astype(np.int64)),
                             shape=self.shape)

    def row_sums(self) -> np.ndarray:
        return self.matvec(np.ones(self.ncols))

    def matvec(self, x, out=None):
        """A @ x for a vector or an (n, k) block; 64-bit accumulation."""
        cols, flat = _as_columns(x, self.ncols)
        y = np.zeros((self.nrows, cols.shape[1])) if out is None else out
        _csr_matmat(self.indptr, self.indices, self.data, cols, y)
        return y[:, 0] if flat and out is None else y

    def rmatvec(self, x):
        """A.T @ x."""
        cols, flat = _as_columns(x, self.nrows)
        y = np.zeros((self.ncols, cols.shape[1]))
        _csr_rmatmat(self.indptr, self.indices, self.data, cols, y)
        return y[:, 0] if flat else y

    def slice(self, r0, r1, c0, c1) -> "SparseCsr":
        """Submatrix rows [r0, r1), cols [c0, c1); reuses stored entries only."""
        ptr, idx, val = _csr_slice(self.indptr, self.indices, self.data, r0, r1, c0, c1)
        return SparseCsr(r1 - r0, c1 - c0, ptr, idx, val)

    def check(self):
        ptr = self.indptr.astype(np.int64)
        assert (np.diff(ptr) >= 0).all(), "row pointers decrease"
        for i in range(self.nrows):
            row = self.indices[ptr[i]:ptr[i + 1]].astype(np.int64)
            assert (np.diff(row) > 0).all(), f"row {i}: column indices not strictly increasing"
            assert row.size == 0 or row[-1] < self.ncols, f"row {i}: column index out of range"


@dataclass(frozen=True, eq=False)
class DenseBlock:
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", np.ascontiguousarray(self.values, dtype=VALUE_DTYPE))
        if not np.isfinite(self.values).all():
            raise ValueError("dense block has non-finite values")

    @property
    def nrows(self):
        return self.values.shape[0]

    @property
    def ncols(self):
        return self.values.shape[1]

    @property
    def shape(self):
        return self.values.shape

    @property
    def nbytes(self) -> int:
        return 4 * self.nrows * self.ncols

    def matvec(self, x, out=None):
        cols, flat = _as_columns(x, self.ncols)
        y = np.zeros((self.nrows, cols.shape[1])) if out is None else out
        _dense_matmat(self.values, cols, y)
        return y[:, 0] if flat and out is None else y

    def to_dense(self):
        return self.values.copy()


@dataclass(frozen=True, eq=False)
class TruncatedSvd:
    """Low-rank factors U diag(sigma) V^T with CSR-stored singular vectors."""

    U: SparseCsr
    sigma: np.ndarray
    V: SparseCsr

    def __post_init__(self):
        object.__setattr__(self, "sigma", np.ascontiguousarray(self.sigma, dtype=VALUE_DTYPE))

    @property
    def rank(self) -> int:
        return len(self.sigma)

    @property
    def shape(self):
        return (self.U.nrows, self.V.nrows)

    @property
    def nbytes(self) -> int:
        return self.U.nbytes + 4 * self.rank + self.V.nbytes

    def matvec(self, x, out=None):
        cols, flat = _as_columns(x, self.V.nrows)
        t = self.V.rmatvec(cols) * self.sigma.astype(np.float64)[:, None]
        y = np.zeros((self.U.nrows, cols.shape[1])) if out is None else out
        self.U.matvec(t, out=y)
        return y[:, 0] if flat and out is None else y

    def to_dense(self):
        U = self.U.to_dense().astype(np.float64)
        V = self.V.to_dense().astype(np.float64)
        return (U * self.sigma.astype(np.float64)) @ V.T


def csr_matvec(A: SparseCsr, x):
    return A.matvec(x)


def dense_matvec(A: DenseBlock, x):
    return A.matvec(x)


def svd_matvec(A: TruncatedSvd, x):
    return A.matvec(x)


# ---------------------------------------------------------------------------
# Golub-Kahan-Lanczos bidiagonalization with full reorthogonalization

class GolubKahan:
    """Incremental Lanczos bidiagonalization A V_p = U_p B_p (B upper bidiagonal).

    The start vector is A^T g for a seeded Gaussian g, so every right
    Lanczos vector lies in range(A^T): rows of U and V belonging to empty
    rows/columns of A stay exactly zero. Extending the process is identical
    to restarting it with more steps, so callers may grow k cheaply.
    """

    def __init__(self, A: SparseCsr, seed: int = 0):
        self.A = A
        m, n = A.shape
        self.rng = np.random.default_rng(seed)
        self.dim = min(m, n)
        cap = min(self.dim, 32) + 1
        self.U = np.zeros((m, cap))
        self.V = np.zeros((n, cap))
        self.alpha: list[float] = []
        self.beta: list[float] = []
        self.matvecs = 0
        self.exhausted = False
        self._next_v = self._fresh_right(None)
        if self._next_v is None:
            raise ValueError("matrix is all zero")
        self.extend(1)

    def _fresh_right(self, basis):
        w = self.A.rmatvec(self.rng.standard_normal(self.A.nrows))
        self.matvecs += 1
        scale = np.linalg.norm(w)
        if basis is not None and basis.shape[1]:
            for _ in range(2):
                w -= basis @ (basis.T @ w)
        nrm = np.linalg.norm(w)
        if scale == 0.0 or nrm <= 1e-10 * scale:
            return None
        return w / nrm

    @property
    def steps(self) -> int:
        return len(self.alpha)

    def extend(self, p: int) -> None:
        """Run until B is p x p; beta_p (the residual coupling) is always kept current."""
        p = min(p, self.dim)
        while self.steps < p and not self.exhausted:
            j = self.steps
            if j >= self.U.shape[1]:
                self.U = np.concatenate([self.U, np.zeros_like(self.U)], axis=1)
                self.V = np.concatenate([self.V, np.zeros_like(self.V)], axis=1)
            self.V[:, j] = self._next_v
            # left vector
            q = self.A.matvec(self.V[:, j])
            self.matvecs += 1
            if j:
                q -= self.beta[j - 1] * self.U[:, j - 1]
                Uj = self.U[:, :j]
                for _ in range(2):
                    q -= Uj @ (Uj.T @ q)
            a = float(np.linalg.norm(q))
            self.alpha.append(a)
            if a <= 1e-13 * max(self.alpha):
                self.beta.append(0.0)
                self.exhausted = True
                break
            self.U[:, j] = q / a
            # pending right vector
            r = self.A.rmatvec(self.U[:, j]) - a * self.V[:, j]
            self.matvecs += 1
            Vj = self.V[:, :j + 1]
            for _ in range(2):
                r -= Vj @ (Vj.T @ r)
            b = float(np.linalg.norm(r))
            if b > 1e-12 * max(self.alpha):
                self.beta.append(b)
                self._next_v = r / b
            else:
                self.beta.append(0.0)
                self._next_v = None if j + 1 >= self.dim else self._fresh_right(Vj)
                if self._next_v is None:
                    self.exhausted = True

    def ritz(self):
        """Singular triplets of B_p and residual bounds ||A^T u_i - s_i v_i||."""
        p = self.steps
        B = np.diag(self.alpha[:p])
        if p > 1:
            B += np.diag(self.beta[:p - 1], 1)
        X, s, Yt = np.linalg.svd(B)
        resid = abs(self.beta[p - 1]) * np.abs(X[p - 1, :])
        return X, s, Yt.T, resid

    def triplets(self, k: int, tol: float = 1e-4):
        """Leading k triplets if converged, else None."""
        X, s, Y, resid = self.ritz()
        k = min(k, len(s))
        if s[0] == 0.0 or (resid[:k] > tol * s[0]).any():
            return None
        p = self.steps
        U = self.U[:, :p] @ X[:, :k]
        V = self.V[:, :p] @ Y[:, :k]
        return U, s[:k], V


def _to_svd(U, s, V, floor=1e-9):
    keep = s > floor * s[0]
    U, s, V = U[:, keep], s[keep], V[:, keep]
    return TruncatedSvd(SparseCsr.from_dense(U), s, SparseCsr.from_dense(V))


def run_lanczos(gk: GolubKahan, k: int, tol: float = 1e-4):
    """Extend ``gk`` until its leading k Ritz triplets converge (cap: 50 k products)."""
    budget = 50 * k
    p = min(2 * k + 10, gk.dim)
    while True:
        gk.extend(p)
        out = gk.triplets(k, tol)
        if out is not None:
            return out
        if gk.exhausted or gk.steps >= gk.dim or gk.matvecs >= budget:
            raise ConvergenceError(f"truncated SVD: {k} triplets did not converge "
                                   f"after {gk.matvecs} products")
        p = min(gk.steps + max(k, 10), gk.dim, gk.steps + max(1, (budget - gk.matvecs) // 2))


def truncated_svd(A: SparseCsr, k: int, seed: int = 0, tol: float = 1e-4) -> TruncatedSvd:
    """Leading-k singular triplets of a CSR matrix (fewer if the rank is below k)."""
    if not 1 <= k < min(A.shape):
        raise ValueError(f"k={k} out of range for a {A.nrows}x{A.ncols} matrix")
    U, s, V = run_lanczos(GolubKahan(A, seed), k, tol)
    return _to_svd(U, s, V)


# ---------------------------------------------------------------------------
# solvers

@dataclass
class FixedPointResult:
    x: np.ndarray
    iterations: int
    increments: list


def fixed_point_solve(apply_K, rhs, tol: float = 1e-7, max_iter: int = 50) -> FixedPointResult:
    """Solve (I - K) x = rhs by x <- rhs + K x starting from x = rhs."""
    rhs = np.asarray(rhs, dtype=np.float64)
    scale = np.linalg.norm(rhs)
    x = rhs.copy()
    increments = []
    if scale == 0.0:
        return FixedPointResult(x, 0, increments)
    for it in range(1, max_iter + 1):
        x_new = rhs + apply_K(x)
        inc = float(np.linalg.norm(x_new - x))
        increments.append(inc)
        x = x_new
        if inc <= tol * scale:
            return FixedPointResult(x, it, increments)
    raise ConvergenceError(f"fixed-point iteration stalled after {max_iter} iterations "
                           f"(last increment {increments[-1] / scale:.3e} relative)",
                           residual=increments[-1] / scale)


@nb.njit(cache=True)
def _thomas(a, b, c, d, x):
    nb_, M = b.shape
    cp = np.empty(M)
    dp = np.empty(M)
    for r in range(nb_):
        piv = b[r, 0]
        if piv == 0.0:
            return r, 0
        cp[0] = c[r, 0] / piv if M > 1 else 0.0
        dp[0] = d[r, 0] / piv
        for i in range(1, M):
            piv = b[r, i] - a[r, i - 1] * cp[i - 1]
            if piv == 0.0:
                return r, i
            if i < M - 1:
                cp[i] = c[r, i] / piv
            dp[i] = (d[r, i] - a[r, i - 1] * dp[i - 1]) / piv
        x[r, M - 1] = dp[M - 1]
        for i in range(M - 2, -1, -1):
            x[r, i] = dp[i] - cp[i] * x[r, i + 1]
    return -1, -1


def tridiag_solve(lower, diag, upper, rhs):
    """Thomas algorithm; batched over leading axes.

    ``lower``/``upper`` hold the M-1 sub/super-diagonal entries, ``diag``
    and ``rhs`` the M diagonal and right-hand-side entries.
    """
    d = np.asarray(rhs, float)
    shape = d.shape
    M = shape[-1]
    lead = shape[:-1]
    n = int(np.prod(lead, dtype=np.int64))

    def flat(v, m):
        return np.ascontiguousarray(np.broadcast_to(np.asarray(v, float), lead + (m,))).reshape(n, m)

    a, c = flat(lower, M - 1), flat(upper, M - 1)
    b, d2 = flat(diag, M), flat(d, M)
    x = np.empty_like(d2)
    r, i = _thomas(a, b, c, d2, x)
    if r >= 0:
        raise ZeroDivisionError(f"zero pivot in tridiagonal solve (system {r}, row {i})")
    return x.reshape(shape)
