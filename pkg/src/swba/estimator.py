"""Levenberg-Marquardt sliding-window estimator.

Each keyframe event adds a frame, its observations and an odometry factor,
runs a few LM iterations on the reduced camera system (landmarks eliminated
either by nullspace projection or by the Schur complement), and, once the
window is over capacity, marginalizes the oldest frame into the prior
(flat QR on the stacked square-root system, or Schur complement on the
Hessian).

States and residuals are always evaluated in double. The configured
precision applies to every linear-algebra step after linearization: the
landmark storage, the reduced system and its factorization, and the stored
prior.
"""

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np
import scipy.linalg

from .evaluation import DiagnosticsRecord, probe_nullspace, track_sigma_min
from .linalg import DEFAULT_ZERO_TOL_FACTOR, flat_qr, numerical_rank, resolve_dtype
from .marginalizer import (
    SQRT,
    SQUARED,
    MarginalizationInput,
    MarginalizationPrior,
    SingularBlockError,
    marginalize_qr_detailed,
    prior_delta,
    schur_complement,
    shift_prior,
)
from .lie import so3_exp, so3_log
from .problem import (
    GRAVITY,
    LandmarkBlock,
    ResidualBlock,
    StereoRig,
    WindowProblem,
    evaluate_residual,
    landmark_tensor,
    total_energy,
)
from .state import FrameState, Landmark

log = logging.getLogger(__name__)

OPT_BACKENDS = ("ns_ldlt", "sc_ldlt")
MARG_BACKENDS = ("ns_qr", "sc_sc")
DAMPING_FLOOR = 1e-6

__all__ = [
    "LandmarkBlock", "LMSettings", "SolverConfig", "ReducedSystem", "StepReport",
    "NumericalFailure", "ns_project_landmark", "build_reduced_system", "solve_rcs",
    "back_substitute", "lm_iterate", "optimize", "marginalize_frame", "SlidingWindowEstimator",
]


class NumericalFailure(RuntimeError):
    """The run cannot continue: non-finite energy or a reduced system that
    cannot be factorized even at maximum damping."""


@dataclass
class LMSettings:
    initial_damping: float = 1e-4
    up: float = 2.0
    down: float = 3.0
    max_damping: float = 1e2
    min_damping: float = 1e-6
    max_iterations: int = 10
    function_tolerance: float = 1e-8
    # Decreases below this are rounding noise (noise-free problems sit at E ~ 1e-25).
    absolute_tolerance: float = 1e-18


@dataclass
class SolverConfig:
    window_size: int = 7
    precision: str = "double"
    opt_backend: str = "ns_ldlt"
    marg_backend: str = "ns_qr"
    lm: LMSettings = field(default_factory=LMSettings)
    zero_tol_factor: float = DEFAULT_ZERO_TOL_FACTOR
    gauge_mode: str = "vo_like"
    anchor_weight: float = 100.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.lm, dict):
            self.lm = LMSettings(**self.lm)
        self.validate()

    def validate(self):
        if self.window_size < 2:
            raise ValueError("window_size must be at least 2")
        resolve_dtype(self.precision)
        if self.opt_backend not in OPT_BACKENDS:
            raise ValueError(f"opt_backend must be one of {OPT_BACKENDS}")
        if self.marg_backend not in MARG_BACKENDS:
            raise ValueError(f"marg_backend must be one of {MARG_BACKENDS}")
        if self.gauge_mode not in ("vo_like", "vio_like"):
            raise ValueError("gauge_mode must be vo_like or vio_like")
        lm = self.lm
        if not (0 < lm.min_damping <= lm.initial_damping <= lm.max_damping):
            raise ValueError("damping must be positive with min <= initial <= max")
        if lm.up <= 1 or lm.down <= 1 or lm.max_iterations < 1:
            raise ValueError("LM factors must exceed 1 and max_iterations must be >= 1")

    @property
    def dtype(self):
        return resolve_dtype(self.precision)

    @property
    def prior_form(self):
        return SQUARED if self.marg_backend == "sc_sc" else SQRT

    def to_dict(self):
        return asdict(self)


# ---------------------------------------------------------------------------
# Landmark elimination


def ns_project_landmark(block, zero_tol=None, zero_tol_factor=DEFAULT_ZERO_TOL_FACTOR):
    """Apply the landmark columns' flat-QR ``Q^T`` to the whole block.

    Returns a new :class:`LandmarkBlock` in state ``ns_projected``. The top
    ``rank`` rows keep the triangular landmark factor; the rows below have
    zero landmark columns. A landmark whose columns have rank < 3 keeps
    fewer back-substitution rows and is flagged.
    """
    if block.state != "linearized":
        raise ValueError("block is already projected")
    S = np.asarray(block.storage)
    nf = block.n_frame_cols
    lm_cols = S[:, nf:nf + 3]
    if zero_tol is None:
        zero_tol = float(zero_tol_factor * np.finfo(S.dtype).eps * np.linalg.norm(lm_cols))
    rest = np.concatenate([S[:, :nf], S[:, nf + 3:]], axis=1)
    qr = flat_qr(lm_cols, zero_tol=zero_tol, extra=rest)
    out = np.empty_like(S)
    out[:, :nf] = qr.qt_extra[:, :nf]
    out[:, nf:nf + 3] = qr.transformed
    out[:, nf + 3] = qr.qt_extra[:, nf]
    out[qr.total_rank:, nf:nf + 3] = 0.0
    rank = qr.total_rank
    return LandmarkBlock(block.landmark_id, out, nf, block.frame_order, "ns_projected", rank, rank < 3)


def _project_batch(S, counts, zero_tol_factor):
    """Nullspace projection of every landmark in the padded tensor, in place.

    Three Householder steps are applied to all landmarks at once. Landmarks
    whose landmark columns turn out rank deficient are redone one by one
    with flat-QR semantics. Returns the per-landmark rank.
    """
    L, m, w = S.shape
    nf = w - 4
    ranks = np.full(L, 3, dtype=int)
    if L == 0 or m == 0:
        return np.zeros(L, dtype=int)
    original = S.copy()
    eps = np.finfo(S.dtype).eps
    tol = zero_tol_factor * eps * np.linalg.norm(S[:, :, nf:nf + 3], axis=(1, 2))
    degenerate = counts < 3
    for k in range(3):
        if k >= m:
            degenerate[:] = True
            break
        x = S[:, k:, nf + k]
        norm = np.sqrt(np.einsum("li,li->l", x, x))
        degenerate |= norm <= tol
        x0 = x[:, 0]
        sigma = np.einsum("li,li->l", x[:, 1:], x[:, 1:])
        # Same reflector as linalg._house, one per landmark.
        identity = (sigma == 0) & (x0 >= 0)
        safe = np.where(x0 > 0, x0 + norm, 1.0)
        v0 = np.where(x0 <= 0, x0 - norm, -sigma / safe)
        v0 = np.where(identity | (v0 == 0), 1.0, v0)
        beta = np.where(identity, 0.0, 2.0 * v0 * v0 / (sigma + v0 * v0))
        with np.errstate(over="ignore", invalid="ignore"):
            v = x / v0[:, None]
        v[:, 0] = 1.0
        # Degenerate landmarks are redone below; keep their garbage finite.
        bad = ~np.isfinite(v).all(axis=1)
        v[bad] = 0.0
        v[bad, 0] = 1.0
        beta[bad] = 0.0
        degenerate |= bad
        seg = S[:, k:, :]
        proj = np.einsum("li,lic->lc", v, seg)
        seg -= (beta[:, None] * v)[:, :, None] * proj[:, None, :]
        S[:, k + 1:, nf + k] = 0.0
    for i in np.flatnonzero(degenerate):
        c = int(counts[i])
        S[i] = 0.0
        if c == 0:
            ranks[i] = 0
            continue
        blk = LandmarkBlock(-1, original[i, :c], nf, ())
        proj = ns_project_landmark(blk, zero_tol_factor=zero_tol_factor)
        S[i, :c] = proj.storage
        ranks[i] = proj.rank
    return ranks


def _sc_batch(S, rank_tol):
    """Per-landmark Schur complement of the padded tensor.

    Returns ``(H_pp_reduced, b_p_reduced, Hll_pinv, Hlp, bl)``.
    """
    L, m, w = S.shape
    nf = w - 4
    Jf = S[:, :, :nf]
    Jl = S[:, :, nf:nf + 3]
    r = S[:, :, nf + 3]
    flatJ = Jf.reshape(-1, nf)
    H = flatJ.T @ flatJ
    b = flatJ.T @ r.reshape(-1)
    Hll = np.einsum("lmi,lmj->lij", Jl, Jl)
    Hlp = np.einsum("lmi,lmj->lij", Jl, Jf)
    bl = np.einsum("lmi,lm->li", Jl, r)
    if L == 0:
        return H, b, Hll, Hlp, bl
    Hinv = np.linalg.pinv(Hll, rcond=rank_tol, hermitian=True).astype(S.dtype, copy=False)
    X = Hinv @ Hlp
    y = np.einsum("lij,lj->li", Hinv, bl)
    H -= Hlp.reshape(-1, nf).T @ X.reshape(-1, nf)
    b -= Hlp.reshape(-1, nf).T @ y.reshape(-1)
    return 0.5 * (H + H.T), b, Hinv, Hlp, bl


def _sc_rank_tol(dtype):
    return 256.0 * float(np.finfo(dtype).eps)


# ---------------------------------------------------------------------------
# Reduced camera system


@dataclass
class ReducedSystem:
    """Undamped reduced system over all window frames plus back-substitution data."""

    H: np.ndarray
    b: np.ndarray
    order: list
    offsets: dict
    landmark_ids: list
    backend: str
    energy: float
    back: dict


def _dense_rows(problem, blocks, offsets, nf, use_fej=True):
    rows, res = [], []
    for blk in blocks:
        lin = evaluate_residual(blk, problem, use_fej=use_fej)
        if not lin.valid:
            continue
        J = np.zeros((lin.residual.shape[0], nf))
        for (kind, ident), Jb in lin.jacobians.items():
            if kind != "frame":
                continue
            off = offsets[ident]
            J[:, off:off + Jb.shape[1]] += Jb
        rows.append(J)
        res.append(lin.residual)
    if not rows:
        return np.zeros((0, nf)), np.zeros(0)
    return np.vstack(rows), np.concatenate(res)


def _prior_terms(prior, problem, offsets, nf, dtype):
    """Prior contribution mapped to window columns, expanded at the current state.

    sqrt form returns rows ``(J, r + J d)``; squared form returns
    ``(H, b + H d)`` with ``d = x [-] x0``.
    """
    if prior is None or prior.is_empty:
        return None
    d = prior_delta(prior, problem.state_map())
    cols = np.concatenate([np.arange(offsets[f], offsets[f] + dim) for f, dim in prior.variable_index])
    if prior.form == SQRT:
        J = np.zeros((prior.J.shape[0], nf), dtype=dtype)
        J[:, cols] = prior.J
        r = (prior.r + prior.J @ d.astype(prior.J.dtype)).astype(dtype)
        return SQRT, J, r
    H = np.zeros((nf, nf), dtype=dtype)
    H[np.ix_(cols, cols)] = prior.H
    b = np.zeros(nf, dtype=dtype)
    b[cols] = prior.b + prior.H @ d.astype(prior.H.dtype)
    return SQUARED, H, b


def build_reduced_system(problem, config, energy=None):
    """Linearize the window and eliminate all landmarks with the configured backend."""
    dtype = config.dtype
    order = problem.frame_ids()
    offsets, nf = problem.column_offsets(order)
    lids = list(problem.landmarks)
    S, counts, lids, _ = landmark_tensor(problem, lids, order, use_fej=True, dtype=dtype)
    others = [b for b in problem.residuals if b.kind != "reprojection"]
    A_o, r_o = _dense_rows(problem, others, offsets, nf)
    A_o, r_o = A_o.astype(dtype), r_o.astype(dtype)
    prior = _prior_terms(problem.prior, problem, offsets, nf, dtype)

    back = {"counts": counts}
    if config.opt_backend == "ns_ldlt":
        ranks = _project_batch(S, counts, config.zero_tol_factor)
        rows = np.arange(S.shape[1])
        keep = (rows[None, :] >= ranks[:, None]) & (rows[None, :] < counts[:, None])
        P = S[keep]
        blocks = [P[:, :nf], A_o]
        res = [P[:, nf + 3], r_o]
        if prior is not None and prior[0] == SQRT:
            blocks.append(prior[1])
            res.append(prior[2])
        A = np.vstack(blocks)
        r = np.concatenate(res)
        H = A.T @ A
        b = A.T @ r
        back.update(ranks=ranks, top=S[:, :3].copy() if S.shape[1] else S[:, :0].copy())
    else:
        H, b, Hinv, Hlp, bl = _sc_batch(S, _sc_rank_tol(dtype))
        H = H + A_o.T @ A_o
        b = b + A_o.T @ r_o
        if prior is not None and prior[0] == SQRT:
            H = H + prior[1].T @ prior[1]
            b = b + prior[1].T @ prior[2]
        back.update(Hinv=Hinv, Hlp=Hlp, bl=bl)
    if prior is not None and prior[0] == SQUARED:
        H = H + prior[1]
        b = b + prior[2]
    H = 0.5 * (H + H.T)
    if energy is None:
        energy = total_energy(problem)
    return ReducedSystem(H.astype(dtype, copy=False), b.astype(dtype, copy=False), order, offsets,
                         lids, config.opt_backend, energy, back)


def solve_rcs(system, damping):
    """Solve ``(H + damping * D) dx = -b`` with ``D = diag(max(diag(H), floor))``.

    Returns ``None`` when the Cholesky factorization fails.
    """
    H, b = system.H, system.b
    if H.shape[0] == 0:
        return np.zeros(0, dtype=H.dtype)
    d = np.maximum(np.diag(H), DAMPING_FLOOR)
    A = H + np.diag((damping * d).astype(H.dtype))
    try:
        c = scipy.linalg.cho_factor(A, lower=False, check_finite=True)
    except (np.linalg.LinAlgError, ValueError):
        return None
    dx = scipy.linalg.cho_solve(c, -b)
    if not np.all(np.isfinite(dx)):
        return None
    return dx


def back_substitute(system, dx):
    """Landmark increments ``(L, 3)`` for a frame increment ``dx``."""
    L = len(system.landmark_ids)
    counts = system.back["counts"]
    out = np.zeros((L, 3))
    if L == 0:
        return out
    if system.backend == "ns_ldlt":
        top = system.back["top"]
        ranks = system.back["ranks"]
        if top.shape[1] == 0:
            return out
        nf = top.shape[2] - 4
        rhs = -(top[:, :, nf + 3] + top[:, :, :nf] @ dx.astype(top.dtype))
        full = ranks == 3
        if np.any(full):
            Rl = top[full][:, :, nf:nf + 3].astype(np.float64)
            out[full] = np.linalg.solve(Rl, rhs[full].astype(np.float64)[:, :, None])[:, :, 0]
        for i in np.flatnonzero((ranks < 3) & (counts > 0)):
            k = int(ranks[i])
            if k == 0:
                continue
            Rl = top[i, :k, nf:nf + 3].astype(np.float64)
            out[i] = np.linalg.lstsq(Rl, rhs[i, :k].astype(np.float64), rcond=None)[0]
        return out
    Hinv, Hlp, bl = system.back["Hinv"], system.back["Hlp"], system.back["bl"]
    t = bl + Hlp @ dx.astype(Hlp.dtype)
    out[:] = -np.einsum("lij,lj->li", Hinv, t).astype(np.float64)
    out[counts == 0] = 0.0
    return out


# ---------------------------------------------------------------------------
# LM loop


@dataclass
class StepReport:
    accepted: bool
    energy_before: float
    energy_after: float
    damping: float
    step_norm: float = 0.0
    factorization_failed: bool = False
    converged: bool = False

    def to_dict(self):
        return asdict(self)


def _snapshot(problem):
    return list(problem.frames), {lid: lm.params.copy() for lid, lm in problem.landmarks.items()}


def _restore(problem, snap):
    frames, params = snap
    problem.frames = frames
    for lid, p in params.items():
        problem.landmarks[lid].params = p


def _apply_step(problem, system, dx, dl):
    dx64 = dx.astype(np.float64)
    states = problem.state_map()
    new_frames = []
    for fid in problem.frame_ids():
        f = states[fid]
        off = system.offsets[fid]
        new_frames.append(f.retracted(dx64[off:off + f.dim]))
    problem.frames = new_frames
    for i, lid in enumerate(system.landmark_ids):
        lm = problem.landmarks[lid]
        lm.params = lm.params + dl[i]


def lm_iterate(problem, config, damping, system=None):
    """One LM attempt. Returns ``(report, system)``; the returned system is
    reusable for the next attempt when the step was rejected, ``None`` when
    the state moved and the caller must relinearize.

    A step whose model decrease is below ``function_tolerance * E`` (plus
    the absolute tolerance) is not applied and the report is marked converged.
    """
    if system is None:
        system = build_reduced_system(problem, config)
    e0 = system.energy
    dx = solve_rcs(system, damping)
    if dx is None:
        return StepReport(False, e0, e0, damping, 0.0, True), system
    d64 = dx.astype(np.float64)
    H64, b64 = system.H.astype(np.float64), system.b.astype(np.float64)
    predicted = -(d64 @ b64 + 0.5 * d64 @ H64 @ d64)
    dl = back_substitute(system, dx)
    step_norm = float(np.sqrt(d64 @ d64 + np.sum(dl * dl)))
    if not np.isfinite(step_norm):
        return StepReport(False, e0, e0, damping, step_norm, True), system
    lm = config.lm
    if step_norm == 0.0 or predicted <= lm.function_tolerance * e0 + lm.absolute_tolerance:
        return StepReport(False, e0, e0, damping, step_norm, converged=True), system
    snap = _snapshot(problem)
    _apply_step(problem, system, dx, dl)
    ok = all(lm.params[2] > 0 for lm in problem.landmarks.values())
    e1 = total_energy(problem) if ok else float("inf")
    if ok and np.isfinite(e1) and e1 < e0:
        return StepReport(True, e0, e1, damping, step_norm), None
    _restore(problem, snap)
    return StepReport(False, e0, e1, damping, step_norm), system


def _checked_energy(problem):
    # non-finite states make the Lie helpers raise before any finiteness check
    try:
        with np.errstate(invalid="ignore", over="ignore"):
            e = total_energy(problem)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise NumericalFailure(f"residual evaluation failed: {exc}") from exc
    if not np.isfinite(e):
        raise NumericalFailure("energy became non-finite")
    return e


def optimize(problem, config, sink=None, frame_id=None):
    """Run LM iterations until convergence or the iteration cap."""
    lm = config.lm
    damping = lm.initial_damping
    system = None
    e = None
    reports = []
    for it in range(lm.max_iterations):
        if system is None:
            e = _checked_energy(problem) if e is None else e
            system = build_reduced_system(problem, config, energy=e)
        rep, system = lm_iterate(problem, config, damping, system)
        reports.append(rep)
        if sink is not None:
            sink({"type": "lm_step", "frame": frame_id, "iteration": it, **rep.to_dict()})
        if rep.accepted:
            e = rep.energy_after
            damping = max(damping / lm.down, lm.min_damping)
            if rep.energy_before - rep.energy_after <= lm.function_tolerance * rep.energy_before:
                break
            continue
        if rep.converged:
            break
        damping *= lm.up
        if damping > lm.max_damping:
            if rep.factorization_failed:
                raise NumericalFailure("reduced system not factorizable at maximum damping")
            break
    return reports


# ---------------------------------------------------------------------------
# Marginalization


def _rank_tol(dtype):
    return 1e3 * float(np.finfo(dtype).eps)


def marginalize_frame(problem, config, event_index=0, rng=None):
    """Marginalize the oldest frame, its hosted landmarks and all lost tracks.

    Returns ``(problem, record)``. The problem is modified in place only
    after the backend succeeded.
    """
    if len(problem.frames) <= config.window_size:
        raise ValueError("window is not over capacity")
    dtype = config.dtype
    ids = problem.frame_ids()
    mu_frame = problem.frames[0]
    mu = mu_frame.frame_id
    marg = [lid for lid, lm in problem.landmarks.items() if lm.host_frame == mu or lm.track_lost]
    marg_set = set(marg)

    keep, rel, dropped = [], [], 0
    involved = {mu}
    for blk in problem.residuals:
        if blk.kind == "reprojection":
            if blk.landmark_ref in marg_set:
                involved.add(blk.frame_refs[0])
                involved.add(problem.landmarks[blk.landmark_ref].host_frame)
                continue
            if blk.frame_refs[0] == mu:
                dropped += 1
                continue
            keep.append(blk)
        elif blk.kind == "relative_motion" and mu in blk.frame_refs:
            rel.append(blk)
            involved.update(blk.frame_refs)
        elif blk.kind == "absolute_prior" and blk.frame_refs[0] == mu:
            continue
        else:
            keep.append(blk)
    prior = problem.prior
    if prior is not None:
        involved.update(prior.frame_ids)
    kappa = [f for f in ids if f in involved and f != mu]
    order = [mu] + kappa
    offsets, n = problem.column_offsets(order)
    n_mu = mu_frame.dim
    states = problem.state_map()
    kappa_index = tuple((f, states[f].dim) for f in kappa)

    S, counts, lids, _ = landmark_tensor(problem, marg, order, use_fej=True, dtype=dtype)
    A_rel, r_rel = _dense_rows(problem, rel, offsets, n)
    A_rel, r_rel = A_rel.astype(dtype), r_rel.astype(dtype)
    pterm = _prior_terms(prior, problem, offsets, n, dtype)
    lin_now = {f: states[f] for f in kappa}

    if config.marg_backend == "ns_qr":
        ranks = _project_batch(S, counts, config.zero_tol_factor)
        rows = np.arange(S.shape[1])
        sel = (rows[None, :] >= ranks[:, None]) & (rows[None, :] < counts[:, None])
        P = S[sel]
        parts, res = [P[:, :n], A_rel], [P[:, n + 3], r_rel]
        if pterm is not None:
            if pterm[0] == SQRT:
                parts.append(pterm[1])
                res.append(pterm[2])
            else:
                raise ValueError("ns_qr marginalization needs a square-root prior")
        jac = np.vstack(parts).astype(dtype, copy=False)
        rvec = np.concatenate(res).astype(dtype, copy=False)
        inp = MarginalizationInput(jac, rvec, n_mu, kappa_index, lin_now)
        new_prior = marginalize_qr_detailed(inp, zero_tol_factor=config.zero_tol_factor).prior
        J64 = jac.astype(np.float64)
        tol = _rank_tol(dtype)
        rank_gap = (numerical_rank(J64[:, :n_mu], tol) + numerical_rank(J64[:, n_mu:], tol)
                    - numerical_rank(J64, tol)) if J64.shape[0] else 0
    else:
        H, b, _, _, _ = _sc_batch(S, _sc_rank_tol(dtype))
        H = H + A_rel.T @ A_rel
        b = b + A_rel.T @ r_rel
        if pterm is not None:
            if pterm[0] == SQUARED:
                H, b = H + pterm[1], b + pterm[2]
            else:
                H, b = H + pterm[1].T @ pterm[1], b + pterm[1].T @ pterm[2]
        H = (0.5 * (H + H.T)).astype(dtype, copy=False)
        b = b.astype(dtype, copy=False)
        try:
            Ht, bt = schur_complement(H, b, n_mu)
        except SingularBlockError:
            Ht, bt = schur_complement(H, b, n_mu, use_pseudo=True)
        new_prior = MarginalizationPrior(SQUARED, kappa_index, lin_now, H=Ht, b=bt)
        H64 = H.astype(np.float64)
        tol = _rank_tol(dtype)
        rank_gap = (numerical_rank(H64[:n_mu, :n_mu], tol) + numerical_rank(H64[n_mu:, n_mu:], tol)
                    - numerical_rank(H64, tol))

    # First-estimate shift: express the prior around the frozen states.
    new_lin = {}
    for f in kappa:
        s = states[f]
        new_lin[f] = s.lin_point if s.frozen else s.copy(with_lin_point=False)
    if kappa:
        d = np.concatenate([states[f].boxminus(new_lin[f]) for f in kappa])
        new_prior = shift_prior(new_prior, -d, new_lin_point=new_lin)

    rec = DiagnosticsRecord(
        event_index=event_index,
        sigma_min=track_sigma_min(new_prior),
        probe_costs=probe_nullspace(new_prior, config.gauge_mode, rng),
        prior_rank=new_prior.rank if not new_prior.is_empty else 0,
        rank_gap=int(rank_gap),
        prior_dim=new_prior.dim,
        dropped_observations=dropped,
        marginalized_landmarks=len(marg),
    )

    # Commit.
    for f in kappa:
        if not states[f].frozen:
            states[f].lin_point = new_lin[f]
    problem.frames = [f for f in problem.frames if f.frame_id != mu]
    for lid in marg:
        del problem.landmarks[lid]
    problem.residuals = keep
    problem.prior = new_prior
    problem.partition = {}
    _ensure_anchor(problem, config)
    return problem, rec


def _ensure_anchor(problem, config):
    if not problem.frames or config.anchor_weight <= 0:
        return
    f = problem.frames[0]
    if any(b.kind == "absolute_prior" and b.frame_refs[0] == f.frame_id for b in problem.residuals):
        return
    meas = np.concatenate([f.p, so3_log(f.R)])
    problem.residuals.append(ResidualBlock("absolute_prior", (f.frame_id,), meas, config.anchor_weight))


# ---------------------------------------------------------------------------
# Driver


class SlidingWindowEstimator:
    """Feeds a measurement stream through optimization and marginalization.

    ``sink`` receives one JSON-serializable dict per LM step and per
    marginalization event.
    """

    def __init__(self, config, rig=None, pixel_sigma=1.0, gravity=GRAVITY, sink=None, min_inverse_depth=0.01):
        self.config = config
        self.problem = WindowProblem(rig=rig or StereoRig(), gravity=np.array(gravity, dtype=float))
        self.pixel_weight = 1.0 / pixel_sigma
        self.sink = sink
        self.min_inverse_depth = min_inverse_depth
        self.records = []
        self.trajectory = {}
        self.dead_tracks = set()
        self.event_index = 0
        self.failed = False
        self.failure_event = None
        self.failure_reason = None
        self.timings = {"optimization": 0.0, "marginalization": 0.0}
        self.step_reports = []

    # -- frame handling -------------------------------------------------
    def _new_frame(self, meas):
        with_aux = self.config.gauge_mode == "vio_like"
        if not self.problem.frames:
            if meas.initial_pose is not None:
                R, p, v = meas.initial_pose
            else:
                R, p, v = np.eye(3), np.zeros(3), np.zeros(3)
            return FrameState(meas.frame_id, R, p, v if with_aux else None, meas.timestamp)
        prev = self.problem.frames[-1]
        z = meas.odometry
        dt = meas.odometry_dt
        R = prev.R @ so3_exp(z[3:6])
        if with_aux:
            g = self.problem.gravity
            p = prev.p + prev.v * dt + 0.5 * g * dt * dt + prev.R @ z[:3]
            v = prev.v + g * dt + prev.R @ z[6:9]
        else:
            p = prev.p + prev.R @ z[:3]
            v = None
        return FrameState(meas.frame_id, R, p, v, meas.timestamp)

    def _add_observations(self, meas):
        rig = self.problem.rig
        fid = meas.frame_id
        by_track = {}
        for obs in meas.observations:
            by_track.setdefault(obs.track_id, {})[obs.camera] = obs.pixel
        for tid in sorted(by_track):
            if tid in self.dead_tracks:
                continue
            cams = by_track[tid]
            if tid not in self.problem.landmarks:
                if 0 not in cams or 1 not in cams:
                    continue
                xl, xr = cams[0], cams[1]
                rho = (xl[0] - xr[0]) / (rig.fx * rig.baseline)
                rho = max(rho, self.min_inverse_depth)
                params = [(xl[0] - rig.cx) / rig.fx, (xl[1] - rig.cy) / rig.fy, rho]
                self.problem.landmarks[tid] = Landmark(tid, fid, params)
            for cam in sorted(cams):
                self.problem.residuals.append(ResidualBlock(
                    "reprojection", (fid,), cams[cam], self.pixel_weight, landmark_ref=tid, camera=cam))

    def process(self, meas):
        """Consume one :class:`swba.sim.FrameMeasurement`."""
        if self.failed:
            return
        prob = self.problem
        frame = self._new_frame(meas)
        prob.frames.append(frame)
        if len(prob.frames) > 1 and meas.odometry is not None:
            prev = prob.frames[-2]
            prob.residuals.append(ResidualBlock(
                "relative_motion", (prev.frame_id, frame.frame_id), meas.odometry,
                meas.odometry_weight if meas.odometry_weight is not None else 1.0, dt=meas.odometry_dt))
        self._add_observations(meas)
        for tid in meas.lost_tracks:
            lm = prob.landmarks.get(tid)
            if lm is not None:
                lm.track_lost = True
            self.dead_tracks.add(tid)
        _ensure_anchor(prob, self.config)

        t0 = time.perf_counter()
        try:
            reps = optimize(prob, self.config, self.sink, frame.frame_id)
            self.step_reports.extend(reps)
        except NumericalFailure as exc:
            self._fail(str(exc))
            return
        finally:
            self.timings["optimization"] += time.perf_counter() - t0

        if len(prob.frames) > self.config.window_size:
            t0 = time.perf_counter()
            try:
                mu = prob.frames[0]
                self.trajectory[mu.frame_id] = (mu.timestamp, mu.R.copy(), mu.p.copy())
                rng = np.random.default_rng([self.config.seed, self.event_index])
                _, rec = marginalize_frame(prob, self.config, self.event_index, rng)
                self.records.append(rec)
                if self.sink is not None:
                    self.sink({"type": "marginalization", "frame": mu.frame_id, **rec.to_dict()})
                self.event_index += 1
            except (np.linalg.LinAlgError, ValueError, FloatingPointError) as exc:
                self._fail(f"marginalization failed: {exc}")
            finally:
                self.timings["marginalization"] += time.perf_counter() - t0
            if self.records and not self.failed:
                try:
                    _checked_energy(prob)
                except NumericalFailure as exc:
                    self._fail(f"after marginalization: {exc}")

    def _fail(self, reason):
        self.failed = True
        self.failure_event = self.event_index
        self.failure_reason = reason
        log.warning("run failed at event %d: %s", self.event_index, reason)
        if self.sink is not None:
            self.sink({"type": "failure", "event_index": self.event_index, "reason": reason})

    def finish(self):
        """Record the frames still in the window; returns the sorted trajectory."""
        for f in self.problem.frames:
            self.trajectory[f.frame_id] = (f.timestamp, f.R.copy(), f.p.copy())
        return [self.trajectory[k] for k in sorted(self.trajectory)]

    def run(self, stream):
        for meas in stream:
            self.process(meas)
            if self.failed:
                break
        return self.finish()
