"""Marginalization priors: storage forms, expansion-point shifts, and the two
ways of producing a new prior (Schur complement on the Hessian, flat QR on
the stacked Jacobian).
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .linalg import (
    DEFAULT_ZERO_TOL_FACTOR,
    _check_matrix,
    flat_qr,
    ldlt_sqrt,
    numerical_rank,
    svd_pseudo_inverse,
)
from .state import FrameState

log = logging.getLogger(__name__)

SQUARED = "squared"
SQRT = "sqrt"


class SingularBlockError(np.linalg.LinAlgError):
    """The marginalized block of the Hessian is singular."""


@dataclass(frozen=True)
class MarginalizationPrior:
    """Quadratic prior over a subset of frame variables.

    ``form == "squared"`` stores ``(H, b)`` with energy
    ``0.5 d^T H d + b^T d``; ``form == "sqrt"`` stores ``(J, r)`` with energy
    ``0.5 ||r + J d||^2``. Here ``d`` is the stacked local-chart difference
    between the current frame states and ``lin_point``.
    """

    form: str
    variable_index: tuple
    lin_point: dict = field(default_factory=dict)
    H: np.ndarray = None
    b: np.ndarray = None
    J: np.ndarray = None
    r: np.ndarray = None

    def __post_init__(self):
        object.__setattr__(self, "variable_index", tuple((int(f), int(d)) for f, d in self.variable_index))
        n = self.dim
        if self.form == SQUARED:
            if self.H is None or self.b is None:
                raise ValueError("squared prior needs H and b")
            if self.H.shape != (n, n) or self.b.shape != (n,):
                raise ValueError(f"squared prior shapes {self.H.shape}, {self.b.shape} do not match dim {n}")
            if n:
                scale = max(float(np.max(np.abs(self.H))), 1.0)
                tol = 1e3 * np.finfo(self.H.dtype).eps * scale
                if float(np.max(np.abs(self.H - self.H.T))) > tol:
                    raise ValueError("squared prior H is not symmetric")
        elif self.form == SQRT:
            if self.J is None or self.r is None:
                raise ValueError("sqrt prior needs J and r")
            if self.J.ndim != 2 or self.J.shape[1] != n or self.r.shape != (self.J.shape[0],):
                raise ValueError(f"sqrt prior shapes {self.J.shape}, {self.r.shape} do not match dim {n}")
            if self.J.shape[0] > n:
                raise ValueError("sqrt prior has more rows than columns")
        else:
            raise ValueError(f"unknown prior form {self.form!r}")
        missing = [f for f, _ in self.variable_index if self.lin_point and f not in self.lin_point]
        if missing:
            raise ValueError(f"lin_point lacks frames {missing}")

    @property
    def dim(self):
        return sum(d for _, d in self.variable_index)

    @property
    def frame_ids(self):
        return [f for f, _ in self.variable_index]

    @property
    def dtype(self):
        return (self.H if self.form == SQUARED else self.J).dtype

    @property
    def is_empty(self):
        return self.dim == 0

    @property
    def rank(self):
        if self.form == SQRT:
            return int(self.J.shape[0])
        if self.dim == 0:
            return 0
        rtol = max(1e-12, 1e2 * float(np.finfo(self.H.dtype).eps))
        return numerical_rank(self.H.astype(np.float64), rank_tol=rtol)

    def offsets(self):
        out, off = {}, 0
        for f, d in self.variable_index:
            out[f] = (off, d)
            off += d
        return out

    def hessian(self):
        """``(H, b)`` in double precision; computes the Gram for sqrt form."""
        if self.form == SQUARED:
            return self.H.astype(np.float64), self.b.astype(np.float64)
        J = self.J.astype(np.float64)
        r = self.r.astype(np.float64)
        return J.T @ J, J.T @ r

    def with_arrays(self, **kw):
        fields = dict(form=self.form, variable_index=self.variable_index, lin_point=self.lin_point,
                      H=self.H, b=self.b, J=self.J, r=self.r)
        fields.update(kw)
        return MarginalizationPrior(**fields)


def empty_prior(form=SQRT, dtype=np.float64):
    if form == SQUARED:
        return MarginalizationPrior(SQUARED, (), {}, H=np.zeros((0, 0), dtype), b=np.zeros(0, dtype))
    return MarginalizationPrior(SQRT, (), {}, J=np.zeros((0, 0), dtype), r=np.zeros(0, dtype))


def prior_delta(prior, x):
    """Stacked chart difference ``x [-] x0`` over the prior's variables (double)."""
    parts = []
    for fid, dim in prior.variable_index:
        if fid not in x:
            raise KeyError(f"state for frame {fid} missing")
        d = x[fid].boxminus(prior.lin_point[fid])
        if d.shape != (dim,):
            raise ValueError(f"frame {fid} has dim {d.shape[0]}, prior expects {dim}")
        parts.append(d)
    return np.concatenate(parts) if parts else np.zeros(0)


def prior_energy(prior, x):
    """Energy of the prior at state map ``x`` (frame id -> FrameState), in double."""
    if prior is None or prior.is_empty:
        return 0.0
    d = prior_delta(prior, x)
    if prior.form == SQUARED:
        H = prior.H.astype(np.float64)
        return float(0.5 * d @ H @ d + prior.b.astype(np.float64) @ d)
    e = prior.r.astype(np.float64) + prior.J.astype(np.float64) @ d
    return float(0.5 * e @ e)


def shift_prior(prior, delta, new_lin_point=None):
    """Move the expansion point by ``delta`` (linear in the prior's chart).

    sqrt: ``r <- r + J delta``; squared: ``b <- b + H delta``. The matrix part
    is unchanged. ``lin_point`` is retracted by ``delta`` unless the caller
    passes the exact new linearization point (used to restore frozen
    first-estimate states bit-for-bit).
    """
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != (prior.dim,):
        raise ValueError(f"delta has shape {delta.shape}, prior dim is {prior.dim}")
    if new_lin_point is None:
        new_lin_point = {}
        for fid, (off, dim) in prior.offsets().items():
            new_lin_point[fid] = prior.lin_point[fid].retracted(delta[off:off + dim])
    else:
        new_lin_point = {fid: new_lin_point[fid] for fid in prior.frame_ids}
    if prior.form == SQRT:
        dt = prior.J.dtype
        r = (prior.r + prior.J @ delta.astype(dt)).astype(dt)
        return prior.with_arrays(r=r, lin_point=new_lin_point)
    dt = prior.H.dtype
    b = (prior.b + prior.H @ delta.astype(dt)).astype(dt)
    return prior.with_arrays(b=b, lin_point=new_lin_point)


def squared_from_sqrt(prior):
    if prior.form == SQUARED:
        return prior
    J, r = prior.J, prior.r
    H = J.T @ J
    return MarginalizationPrior(SQUARED, prior.variable_index, prior.lin_point,
                                H=0.5 * (H + H.T), b=J.T @ r)


def sqrt_from_squared(prior, tol=None):
    """Factor a squared prior with LDLT: ``J = D^{1/2} L^T`` and
    ``J^T r = b`` solved in the minimum-norm least-squares sense."""
    if prior.form == SQRT:
        return prior
    J = ldlt_sqrt(prior.H, tol=tol)
    if J.shape[0] == 0:
        r = np.zeros(0, dtype=prior.H.dtype)
    else:
        r = np.linalg.lstsq(J.T, prior.b, rcond=None)[0].astype(prior.H.dtype)
    return MarginalizationPrior(SQRT, prior.variable_index, prior.lin_point, J=J, r=r)


@dataclass(frozen=True)
class MarginalizationInput:
    """Stacked linear system over ``[mu | kappa]`` columns.

    ``jac`` already has landmarks eliminated; the first ``n_mu`` columns
    belong to the variables being removed. ``lin_point`` holds the states the
    rows were linearized at (the new prior's expansion point before any
    first-estimate shift).
    """

    jac: np.ndarray
    res: np.ndarray
    n_mu: int
    kappa_index: tuple
    lin_point: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.jac.ndim != 2 or self.res.shape != (self.jac.shape[0],):
            raise ValueError(f"jac {self.jac.shape} and res {self.res.shape} do not match")
        n_kappa = sum(d for _, d in self.kappa_index)
        if not 0 <= self.n_mu <= self.jac.shape[1] or self.n_mu + n_kappa != self.jac.shape[1]:
            raise ValueError(
                f"column split n_mu={self.n_mu} + n_kappa={n_kappa} != {self.jac.shape[1]} columns")

    @property
    def n_kappa(self):
        return self.jac.shape[1] - self.n_mu


def schur_complement(H, b, n_mu, use_pseudo=False, rank_tol=None):
    """Eliminate the leading ``n_mu`` variables from ``H dx = -b``.

    Returns ``(H_kk - H_km M H_mk, b_k - H_km M b_m)`` where ``M`` is the
    inverse of ``H_mm`` (Cholesky) or, with ``use_pseudo``, its Moore-Penrose
    inverse.
    """
    H = np.asarray(H)
    b = np.asarray(b)
    Hmm, Hmk, Hkk = H[:n_mu, :n_mu], H[:n_mu, n_mu:], H[n_mu:, n_mu:]
    bm, bk = b[:n_mu], b[n_mu:]
    if n_mu == 0:
        return Hkk.copy(), bk.copy()
    if use_pseudo:
        M = svd_pseudo_inverse(0.5 * (Hmm + Hmm.T), rank_tol=rank_tol)
        X = M @ Hmk
        y = M @ bm
    else:
        try:
            c = scipy.linalg.cho_factor(Hmm, check_finite=True)
        except np.linalg.LinAlgError as exc:
            raise SingularBlockError(
                "H_mu_mu is singular or indefinite; use use_pseudo=True for the pseudo Schur complement"
            ) from exc
        X = scipy.linalg.cho_solve(c, Hmk)
        y = scipy.linalg.cho_solve(c, bm)
    Ht = Hkk - Hmk.T @ X
    bt = bk - Hmk.T @ y
    return (0.5 * (Ht + Ht.T)).astype(H.dtype, copy=False), bt.astype(H.dtype, copy=False)


def marginalize_sc(inp, use_pseudo=False, rank_tol=None):
    """Schur-complement marginalization on ``H = J^T J``, ``b = J^T r``."""
    J, r = inp.jac, inp.res
    H = J.T @ J
    b = J.T @ r
    Ht, bt = schur_complement(H, b, inp.n_mu, use_pseudo=use_pseudo, rank_tol=rank_tol)
    return MarginalizationPrior(SQUARED, inp.kappa_index, dict(inp.lin_point), H=Ht, b=bt)


@dataclass(frozen=True)
class QrMarginalization:
    prior: MarginalizationPrior
    mu_rank: int
    total_rank: int
    zero_tol: float


def marginalize_qr_detailed(inp, zero_tol=None, zero_tol_factor=DEFAULT_ZERO_TOL_FACTOR):
    J = _check_matrix(inp.jac, "jac")
    dt = J.dtype
    n_mu, n_k = inp.n_mu, inp.n_kappa
    if n_k == 0 or J.shape[0] == 0:
        prior = MarginalizationPrior(SQRT, inp.kappa_index, dict(inp.lin_point),
                                     J=np.zeros((0, n_k), dt), r=np.zeros(0, dt))
        return QrMarginalization(prior, 0, 0, 0.0)
    if zero_tol is None:
        zero_tol = float(zero_tol_factor * np.finfo(dt).eps * np.linalg.norm(J))
    qr = flat_qr(J, n_mu=n_mu, zero_tol=zero_tol, extra=inp.res)
    Rt = qr.r_factor[qr.mu_rank:, n_mu:]
    rt = qr.qt_extra[qr.mu_rank:qr.total_rank]
    if Rt.shape[0]:
        keep = np.linalg.norm(Rt, axis=1) > zero_tol
        Rt, rt = Rt[keep], rt[keep]
    prior = MarginalizationPrior(SQRT, inp.kappa_index, dict(inp.lin_point),
                                 J=np.ascontiguousarray(Rt), r=np.ascontiguousarray(rt))
    return QrMarginalization(prior, qr.mu_rank, qr.total_rank, zero_tol)


def marginalize_qr(inp, zero_tol=None, zero_tol_factor=DEFAULT_ZERO_TOL_FACTOR):
    """Square-root marginalization with flat QR.

    Factor ``[J_mu J_kappa]`` with the reflectors also applied to the
    residual, then drop the first ``rank(J_mu)`` rows, the ``mu`` columns and
    the zero rows at the bottom. The surviving block is the new ``J_m`` with
    ``rank(H~)`` rows.
    """
    return marginalize_qr_detailed(inp, zero_tol, zero_tol_factor).prior


def kappa_u_sqrt_system(R_tilde, r_tilde, new_jac=None, new_res=None, n_u=0):
    """Square root of the reduced system over ``[kappa | u]``.

    Stacks the residual rows that do not involve the marginalized variables
    (columns ``[kappa | u]``) on top of ``[R~ 0]``.
    """
    R_tilde = np.asarray(R_tilde)
    r_tilde = np.asarray(r_tilde)
    n_k = R_tilde.shape[1]
    if r_tilde.shape != (R_tilde.shape[0],):
        raise ValueError("r_tilde does not match R_tilde rows")
    bottom = np.hstack([R_tilde, np.zeros((R_tilde.shape[0], n_u), R_tilde.dtype)])
    if new_jac is None:
        return bottom, r_tilde.copy()
    new_jac = np.asarray(new_jac)
    new_res = np.asarray(new_res)
    if new_jac.ndim != 2 or new_jac.shape[1] != n_k + n_u:
        raise ValueError(f"new rows have {new_jac.shape[1]} columns, expected {n_k + n_u}")
    if new_res.shape != (new_jac.shape[0],):
        raise ValueError("new_res does not match new_jac rows")
    return np.vstack([new_jac, bottom]), np.concatenate([new_res, r_tilde])


def prior_to_dict(prior):
    if prior is None:
        return None
    precision = "single" if prior.dtype == np.float32 else "double"
    d = {
        "form": prior.form,
        "precision": precision,
        "variable_index": [[f, dim] for f, dim in prior.variable_index],
        "lin_point": {str(f): s.to_dict() for f, s in prior.lin_point.items()},
    }
    if prior.form == SQUARED:
        d["H"] = {"rows": prior.H.shape[0], "cols": prior.H.shape[1], "entries": prior.H.reshape(-1).tolist()}
        d["b"] = prior.b.tolist()
    else:
        d["J"] = {"rows": prior.J.shape[0], "cols": prior.J.shape[1], "entries": prior.J.reshape(-1).tolist()}
        d["r"] = prior.r.tolist()
    return d


def prior_from_dict(d):
    if d is None:
        return None
    dt = np.float32 if d.get("precision") == "single" else np.float64
    lin = {int(k): FrameState.from_dict(v) for k, v in d.get("lin_point", {}).items()}

    def mat(m):
        return np.array(m["entries"], dtype=dt).reshape(m["rows"], m["cols"])

    if d["form"] == SQUARED:
        return MarginalizationPrior(SQUARED, d["variable_index"], lin, H=mat(d["H"]), b=np.array(d["b"], dt))
    return MarginalizationPrior(SQRT, d["variable_index"], lin, J=mat(d["J"]), r=np.array(d["r"], dt))
