"""Dense kernels in single or double precision.

Everything here is a pure function of its inputs. The working precision is
the dtype of the input array (``float32`` or ``float64``); use
:func:`as_precision` to convert. Cross-precision comparisons are done in
double by the callers.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

PRECISIONS = {"single": np.float32, "double": np.float64}

DEFAULT_ZERO_TOL_FACTOR = 256.0


class NonFiniteError(ValueError):
    """Raised when an input matrix contains NaN or Inf."""


class DefinitenessWarning(RuntimeWarning):
    """A symmetric matrix expected to be PSD had clearly negative pivots."""


def resolve_dtype(precision):
    if isinstance(precision, str):
        try:
            return np.dtype(PRECISIONS[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dt}")
    return dt


def as_precision(a, precision):
    return np.asarray(a, dtype=resolve_dtype(precision))


def _check_matrix(a, name="a"):
    a = np.asarray(a)
    if a.dtype.kind != "f":
        a = a.astype(np.float64)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{name} contains non-finite entries")
    return a


def default_zero_tol(a, factor=DEFAULT_ZERO_TOL_FACTOR):
    """Relative rank tolerance ``factor * eps * ||a||_F`` in a's precision."""
    a = np.asarray(a)
    eps = np.finfo(a.dtype if a.dtype.kind == "f" else np.float64).eps
    return float(factor * eps * np.linalg.norm(a))


def _house(x):
    """Reflector ``P = I - beta v v^T`` with ``v[0] = 1`` and ``P x = ||x|| e1``.

    Computed without cancellation for ``x[0] > 0`` (Golub & Van Loan, Alg. 5.1.1).
    """
    sigma = float(x[1:] @ x[1:])
    v = x.copy()
    v[0] = 1.0
    x0 = float(x[0])
    if sigma == 0.0:
        beta = 0.0 if x0 >= 0.0 else 2.0
        return v, beta, abs(x0)
    mu = np.sqrt(x0 * x0 + sigma)
    v0 = x0 - mu if x0 <= 0.0 else -sigma / (x0 + mu)
    beta = 2.0 * v0 * v0 / (sigma + v0 * v0)
    v[1:] = v[1:] / v0
    return v, beta, mu


@dataclass(frozen=True)
class Reflector:
    row: int
    col: int
    v: np.ndarray
    beta: float

    def apply(self, b):
        """Apply in place to the rows of ``b`` (vector or matrix)."""
        if self.beta == 0.0:
            return
        seg = b[self.row:]
        if seg.ndim == 1:
            seg -= self.beta * (self.v @ seg) * self.v
        else:
            seg -= np.outer(self.beta * self.v, self.v @ seg)


@dataclass(frozen=True)
class FlatQrResult:
    """Outcome of a Householder factorization.

    ``r_factor`` has one row per reflector that was applied (for the flat
    variant exactly ``total_rank`` rows, every row stepping one column to the
    right of the previous one). ``transformed`` holds the full ``Q^T a``
    including the rows below the rank, and ``qt_extra`` the right-hand
    columns that were carried along.
    """

    r_factor: np.ndarray
    reflectors: tuple
    total_rank: int
    mu_rank: int
    zero_tolerance_used: float
    transformed: np.ndarray
    qt_extra: np.ndarray = field(default=None)
    pivot_cols: tuple = ()

    def apply_qt(self, b):
        """Return ``Q^T b`` for a vector or matrix ``b`` with matching rows."""
        out = np.array(b, dtype=self.transformed.dtype, copy=True)
        for refl in self.reflectors:
            refl.apply(out)
        return out

    def apply_q(self, b):
        out = np.array(b, dtype=self.transformed.dtype, copy=True)
        for refl in reversed(self.reflectors):
            refl.apply(out)
        return out


def _factorize(a, extra, zero_tol, flat, n_mu):
    a = _check_matrix(a)
    m, n = a.shape
    if m < 1 or n < 1:
        raise ValueError("matrix must have at least one row and one column")
    if zero_tol is None:
        zero_tol = default_zero_tol(a)
    if zero_tol < 0:
        raise ValueError("zero_tol must be non-negative")
    if not 0 <= n_mu <= n:
        raise ValueError(f"n_mu={n_mu} outside [0, {n}]")

    ncols_extra = 0
    extra_is_vector = False
    if extra is not None:
        extra = np.asarray(extra, dtype=a.dtype)
        extra_is_vector = extra.ndim == 1
        if extra_is_vector:
            extra = extra[:, None]
        if extra.shape[0] != m:
            raise ValueError("extra columns must have as many rows as a")
        if not np.all(np.isfinite(extra)):
            raise NonFiniteError("extra columns contain non-finite entries")
        ncols_extra = extra.shape[1]
        work = np.concatenate([a, extra], axis=1)
    else:
        work = a.copy()

    reflectors = []
    pivots = []
    row = 0
    for k in range(n):
        if row >= m:
            break
        x = work[row:, k]
        norm = float(np.sqrt(x @ x))
        if flat and norm <= zero_tol:
            # Dependent column: keep the row index, Householder element stays put.
            work[row:, k] = 0.0
            continue
        v, beta, alpha = _house(x)
        if beta != 0.0:
            seg = work[row:, k + 1:]
            seg -= np.outer(beta * v, v @ seg)
        work[row, k] = alpha
        work[row + 1:, k] = 0.0
        reflectors.append(Reflector(row, k, v, beta))
        if norm > zero_tol:
            pivots.append(k)
        row += 1
        if not flat and row >= min(m, n):
            break

    if flat:
        total_rank = row
        r_factor = work[:row, :n].copy()
    else:
        r_factor = work[:min(m, n), :n].copy()
        total_rank = len(pivots)
    mu_rank = sum(1 for k in pivots if k < n_mu)
    qt_extra = work[:, n:].copy() if ncols_extra else None
    if extra_is_vector:
        qt_extra = qt_extra[:, 0]
    return FlatQrResult(
        r_factor=r_factor,
        reflectors=tuple(reflectors),
        total_rank=total_rank,
        mu_rank=mu_rank,
        zero_tolerance_used=float(zero_tol),
        transformed=work[:, :n].copy(),
        qt_extra=qt_extra,
        pivot_cols=tuple(pivots),
    )


def householder_qr(a, n_mu=0, zero_tol=None, extra=None):
    """Standard column-by-column Householder QR.

    Column ``k`` is always reduced below row ``k``. When a column is dependent
    on the previous ones its diagonal entry ends up (numerically) zero and
    ``R`` shows a step taller than one row. ``total_rank`` counts diagonal
    entries whose pre-reflection column norm exceeds ``zero_tol``.
    """
    return _factorize(a, extra, zero_tol, flat=False, n_mu=n_mu)


def flat_qr(a, n_mu=0, zero_tol=None, extra=None):
    """Rank-revealing Householder QR without pivoting.

    When the remaining part of column ``k`` (from the current Householder row
    down) has norm ``<= zero_tol`` the column is skipped and the next column
    is reduced in the *same* row, so ``R`` never steps down by more than one
    row. The rank of ``a`` is the number of rows of ``r_factor`` and the rank
    of the leading ``n_mu`` columns is the number of reflectors placed in
    those columns.

    Parameters
    ----------
    a : (m, n) array
        Float32 or float64 matrix; the computation runs in that precision.
    n_mu : int
        Number of leading columns whose rank is reported as ``mu_rank``.
    zero_tol : float, optional
        Absolute threshold. Defaults to ``256 * eps * ||a||_F``.
    extra : (m,) or (m, p) array, optional
        Right-hand columns transformed by the same reflectors.
    """
    return _factorize(a, extra, zero_tol, flat=True, n_mu=n_mu)


def ldlt_sqrt(h, tol=None, sym_tol=None):
    """Square root ``R = D^{1/2} L^T`` of a symmetric PSD matrix, ``R^T R = h``.

    No pivoting. Pivots ``<= tol`` are treated as zero and their rows dropped,
    so the result has ``rank(h)`` rows. Pivots below ``-tol`` raise a
    :class:`DefinitenessWarning` and are clamped to zero.
    """
    h = _check_matrix(h, "h")
    n = h.shape[0]
    if h.shape[1] != n:
        raise ValueError("h must be square")
    eps = np.finfo(h.dtype).eps
    scale = float(np.max(np.abs(h))) if h.size else 0.0
    if sym_tol is None:
        sym_tol = 64 * eps * max(scale, 1.0)
    if h.size and float(np.max(np.abs(h - h.T))) > sym_tol:
        raise ValueError("ldlt_sqrt: input is not symmetric")
    if tol is None:
        tol = DEFAULT_ZERO_TOL_FACTOR * eps * scale * max(n, 1)

    work = 0.5 * (h + h.T)
    L = np.zeros_like(work)
    d = np.zeros(n, dtype=h.dtype)
    n_neg = 0
    for j in range(n):
        dj = work[j, j] - (L[j, :j] * L[j, :j]) @ d[:j]
        if dj <= tol:
            if dj < -tol:
                n_neg += 1
            d[j] = 0.0
            continue
        d[j] = dj
        L[j, j] = 1.0
        if j + 1 < n:
            L[j + 1:, j] = (work[j + 1:, j] - (L[j + 1:, :j] * L[j, :j]) @ d[:j]) / dj
    if n_neg:
        warnings.warn(
            f"ldlt_sqrt: {n_neg} negative pivot(s) below -{tol:.3g} clamped to zero",
            DefinitenessWarning,
            stacklevel=2,
        )
    keep = d > 0
    return (np.sqrt(d[keep])[:, None] * L.T[keep]).astype(h.dtype, copy=False)


def svd_pseudo_inverse(a, rank_tol=None):
    """Moore-Penrose inverse ``V1 D1^{-1} U1^T`` from the compact SVD.

    Singular values ``<= rank_tol * sigma_max`` are treated as zero.
    """
    a = _check_matrix(a)
    m, n = a.shape
    if a.size == 0:
        return np.zeros((n, m), dtype=a.dtype)
    U, s, Vt = np.linalg.svd(a, full_matrices=False)
    if rank_tol is None:
        rank_tol = max(m, n) * np.finfo(a.dtype).eps
    smax = s[0] if s.size else 0.0
    r = int(np.sum(s > rank_tol * smax)) if smax > 0 else 0
    if r == 0:
        return np.zeros((n, m), dtype=a.dtype)
    return (Vt[:r].T / s[:r]) @ U[:, :r].T


def numerical_rank(a, rank_tol=None):
    a = _check_matrix(a)
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if rank_tol is None:
        rank_tol = max(a.shape) * np.finfo(a.dtype).eps
    return int(np.sum(s > rank_tol * s[0])) if s[0] > 0 else 0


def compact_svd(a, rank_tol=None):
    """``(U1, d1, V1)`` with ``a = U1 diag(d1) V1^T`` and positive ``d1``."""
    a = _check_matrix(a)
    U, s, Vt = np.linalg.svd(a, full_matrices=False)
    if rank_tol is None:
        rank_tol = max(a.shape) * np.finfo(a.dtype).eps
    r = int(np.sum(s > rank_tol * s[0])) if s.size and s[0] > 0 else 0
    return U[:, :r], s[:r], Vt[:r].T


def min_eigenvalue(h):
    """Smallest eigenvalue of the symmetrized matrix, evaluated in double."""
    h = _check_matrix(h, "h").astype(np.float64)
    if h.shape[0] != h.shape[1]:
        raise ValueError("h must be square")
    if h.shape[0] == 0:
        raise ValueError("min_eigenvalue of an empty matrix is undefined")
    return float(np.linalg.eigvalsh(0.5 * (h + h.T))[0])
