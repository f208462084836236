"""Sliding-window problem: residual models, Jacobians, energy, landmark blocks.

Residual models
---------------
reprojection
    Stereo pinhole projection of a host-anchored inverse-depth landmark into
    the left (``camera=0``) or right (``camera=1``) camera of a target frame.
relative_motion
    Difference between two consecutive frames and an odometry-like
    measurement ``[dp, dphi]``. Frames with a velocity block use the
    gravity-aware form ``[dp, dphi, dv]`` of an inertial pre-integrated
    measurement, which makes roll and pitch observable.
absolute_prior
    Pose of a single frame against a measured pose ``[p, phi]``.

All residuals and Jacobians are whitened by ``weight_sqrt``. Jacobians are
taken w.r.t. each frame's local chart (see :class:`swba.state.FrameState`)
and w.r.t. the landmark's ``(u, v, inverse_depth)``.
"""

import logging
from collections import namedtuple
from dataclasses import dataclass, field

import numpy as np

from .lie import skew, so3_exp, so3_log, so3_right_jacobian_inv
from .marginalizer import prior_energy, prior_from_dict, prior_to_dict
from .state import AUX_DIM, POSE_DIM, FrameState, Landmark

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
KINDS = ("reprojection", "relative_motion", "absolute_prior")
GRAVITY = np.array([0.0, 0.0, -9.81])
MIN_DEPTH = 1e-3


@dataclass
class StereoRig:
    """Rectified stereo pair; the left camera coincides with the body frame."""

    fx: float = 450.0
    fy: float = 450.0
    cx: float = 320.0
    cy: float = 240.0
    baseline: float = 0.3
    width: int = 640
    height: int = 480

    def camera_offsets(self, cam):
        cam = np.asarray(cam)
        out = np.zeros(cam.shape + (3,))
        out[..., 0] = self.baseline * cam
        return out

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class ResidualBlock:
    kind: str
    frame_refs: tuple
    measurement: np.ndarray
    weight_sqrt: object = 1.0
    landmark_ref: int = None
    camera: int = 0
    dt: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown residual kind {self.kind!r}")
        self.frame_refs = tuple(int(f) for f in self.frame_refs)
        self.measurement = np.array(self.measurement, dtype=np.float64).reshape(-1)
        n = self.measurement.shape[0]
        if self.kind == "reprojection":
            ok = n == 2 and len(self.frame_refs) == 1 and self.landmark_ref is not None
        elif self.kind == "relative_motion":
            ok = n in (POSE_DIM, POSE_DIM + AUX_DIM) and len(self.frame_refs) == 2
        else:
            ok = n == POSE_DIM and len(self.frame_refs) == 1
        if not ok:
            raise ValueError(f"malformed {self.kind} block: measurement dim {n}, frames {self.frame_refs}")
        w = np.asarray(self.weight_sqrt, dtype=np.float64)
        if w.ndim and w.shape != (n,):
            raise ValueError(f"weight_sqrt has shape {w.shape}, expected scalar or ({n},)")
        self.weight_sqrt = float(w) if w.ndim == 0 else w
        self._weights = (self.weight_sqrt, np.broadcast_to(w, (n,)).copy())

    @property
    def dim(self):
        return self.measurement.shape[0]

    def weights(self):
        src, w = self._weights
        if src is not self.weight_sqrt:
            w = np.broadcast_to(np.asarray(self.weight_sqrt, dtype=np.float64), (self.dim,)).copy()
            self._weights = (self.weight_sqrt, w)
        return w

    def to_dict(self):
        w = self.weight_sqrt
        return {
            "kind": self.kind,
            "frame_refs": list(self.frame_refs),
            "landmark_ref": self.landmark_ref,
            "measurement": self.measurement.tolist(),
            "weight_sqrt": w if isinstance(w, float) else np.asarray(w).tolist(),
            "camera": int(self.camera),
            "dt": float(self.dt),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d["frame_refs"], d["measurement"], d.get("weight_sqrt", 1.0),
                   d.get("landmark_ref"), d.get("camera", 0), d.get("dt", 0.0))


@dataclass
class WindowProblem:
    frames: list = field(default_factory=list)
    landmarks: dict = field(default_factory=dict)
    residuals: list = field(default_factory=list)
    prior: object = None
    rig: StereoRig = field(default_factory=StereoRig)
    gravity: np.ndarray = field(default_factory=lambda: GRAVITY.copy())
    partition: dict = field(default_factory=dict)

    def frame(self, fid):
        for f in self.frames:
            if f.frame_id == fid:
                return f
        raise KeyError(f"frame {fid} not in window")

    def frame_ids(self):
        return [f.frame_id for f in self.frames]

    def state_map(self):
        return {f.frame_id: f for f in self.frames}

    def column_order(self):
        """Frame ids with ``mu`` frames (per ``partition``) first, then window order."""
        ids = self.frame_ids()
        mu = [f for f in ids if self.partition.get(f) == "mu"]
        return mu + [f for f in ids if f not in mu]

    def column_offsets(self, order=None):
        order = self.column_order() if order is None else order
        states = self.state_map()
        offsets, off = {}, 0
        for fid in order:
            offsets[fid] = off
            off += states[fid].dim
        return offsets, off

    def validate(self):
        ids = set(self.frame_ids())
        for blk in self.residuals:
            missing = [f for f in blk.frame_refs if f not in ids]
            if missing:
                raise ValueError(f"{blk.kind} block references missing frames {missing}")
            if blk.landmark_ref is not None:
                lm = self.landmarks.get(blk.landmark_ref)
                if lm is None:
                    raise ValueError(f"block references missing landmark {blk.landmark_ref}")
                if lm.host_frame not in ids:
                    raise ValueError(f"landmark {lm.landmark_id} host {lm.host_frame} not in window")
        if self.prior is not None:
            order = [f for f in self.frame_ids() if f in set(self.prior.frame_ids)]
            if order != self.prior.frame_ids:
                raise ValueError("prior variable order is not consistent with the window")

    def copy(self):
        return problem_from_dict(problem_to_dict(self))


Linearization = namedtuple("Linearization", "residual jacobians valid")


def reprojection_batch(rig, Rh, ph, Rt, pt, cam, lm, meas, jacobians=True):
    """Unweighted stereo reprojection for ``n`` observations at once.

    Returns ``(res (n,2), J_host (n,2,6), J_target (n,2,6), J_lm (n,2,3), valid (n,))``.
    Host and target pose Jacobians are returned as computed; callers zero
    them for observations in the host frame itself, where they cancel.
    """
    u, v, rho = lm[:, 0], lm[:, 1], lm[:, 2]
    q = np.stack([u, v, np.ones_like(u)], axis=1)
    p_h = q / rho[:, None]
    p_w = np.einsum("nij,nj->ni", Rh, p_h) + ph
    p_t = np.einsum("nji,nj->ni", Rt, p_w - pt)
    p_c = p_t - rig.camera_offsets(cam)
    z = p_c[:, 2]
    valid = (z > MIN_DEPTH) & (rho > 0)
    zs = np.where(valid, z, 1.0)
    x_n = p_c[:, 0] / zs
    y_n = p_c[:, 1] / zs
    res = np.stack([rig.fx * x_n + rig.cx - meas[:, 0], rig.fy * y_n + rig.cy - meas[:, 1]], axis=1)
    if not jacobians:
        return res, None, None, None, valid
    n = lm.shape[0]
    dpi = np.zeros((n, 2, 3))
    dpi[:, 0, 0] = rig.fx / zs
    dpi[:, 0, 2] = -rig.fx * x_n / zs
    dpi[:, 1, 1] = rig.fy / zs
    dpi[:, 1, 2] = -rig.fy * y_n / zs
    Rth = np.einsum("nji,njk->nik", Rt, Rh)
    dpt_host = np.concatenate([Rth, -Rth @ skew(p_h)], axis=2)
    dpt_target = np.concatenate([np.broadcast_to(-np.eye(3), (n, 3, 3)), skew(p_t)], axis=2)
    dph_lm = np.zeros((n, 3, 3))
    dph_lm[:, 0, 0] = 1.0 / rho
    dph_lm[:, 1, 1] = 1.0 / rho
    dph_lm[:, :, 2] = -q / (rho * rho)[:, None]
    J_host = dpi @ dpt_host
    J_target = dpi @ dpt_target
    J_lm = dpi @ (Rth @ dph_lm)
    return res, J_host, J_target, J_lm, valid


def _reprojection_inputs(problem, blocks, use_fej):
    frames = problem.frames
    index = {f.frame_id: i for i, f in enumerate(frames)}
    R = np.array([f.R for f in frames])
    p = np.array([f.p for f in frames])
    jstates = [f.jacobian_state(use_fej) for f in frames]
    JR = np.array([f.R for f in jstates])
    Jp = np.array([f.p for f in jstates])
    lms = problem.landmarks
    n = len(blocks)
    lm_objs = [lms[b.landmark_ref] for b in blocks]
    h = np.fromiter((index[lm.host_frame] for lm in lm_objs), dtype=int, count=n)
    t = np.fromiter((index[b.frame_refs[0]] for b in blocks), dtype=int, count=n)
    lm = np.array([lm.params for lm in lm_objs])
    meas = np.array([b.measurement for b in blocks])
    cam = np.fromiter((b.camera for b in blocks), dtype=int, count=n)
    w = np.array([b.weights() for b in blocks])
    return dict(cur=(R[h], p[h], R[t], p[t]), jac=(JR[h], Jp[h], JR[t], Jp[t]), lm=lm, meas=meas,
                cam=cam, w=w, same=h == t)


def linearize_reprojections(problem, blocks, use_fej=True, jacobians=True):
    """Weighted residuals and Jacobians for a list of reprojection blocks."""
    if not blocks:
        z = np.zeros((0, 2))
        return z, np.zeros((0, 2, 6)), np.zeros((0, 2, 6)), np.zeros((0, 2, 3)), np.zeros(0, bool)
    a = _reprojection_inputs(problem, blocks, use_fej)
    res, _, _, _, valid = reprojection_batch(problem.rig, *a["cur"], a["cam"], a["lm"], a["meas"], jacobians=False)
    res = res * a["w"]
    if not jacobians:
        return res, None, None, None, valid
    _, Jh, Jt, Jl, jvalid = reprojection_batch(problem.rig, *a["jac"], a["cam"], a["lm"], a["meas"])
    wj = a["w"][:, :, None]
    Jh, Jt, Jl = Jh * wj, Jt * wj, Jl * wj
    Jh[a["same"]] = 0.0
    Jt[a["same"]] = 0.0
    return res, Jh, Jt, Jl, valid & jvalid


def _relative_motion(blk, fi, fj, gravity):
    """Unweighted residual and Jacobians (w.r.t. frame i, frame j) of a relative_motion block."""
    with_aux = blk.dim == POSE_DIM + AUX_DIM
    dt = blk.dt
    Ri, Rj = fi.R, fj.R
    dp = fj.p - fi.p
    if with_aux:
        dp = dp - fi.v * dt - 0.5 * gravity * dt * dt
    r_p = Ri.T @ dp - blk.measurement[:3]
    dR_meas = so3_exp(blk.measurement[3:6])
    r_R = so3_log(dR_meas.T @ Ri.T @ Rj)
    parts = [r_p, r_R]
    if with_aux:
        dv = fj.v - fi.v - gravity * dt
        parts.append(Ri.T @ dv - blk.measurement[6:9])
    res = np.concatenate(parts)
    return res, with_aux, dp


def _relative_motion_jac(blk, fi, fj, gravity):
    res, with_aux, dp = _relative_motion(blk, fi, fj, gravity)
    n = blk.dim
    di = fi.dim
    dj = fj.dim
    Ji = np.zeros((n, di))
    Jj = np.zeros((n, dj))
    Ri, Rj = fi.R, fj.R
    Jr_inv = so3_right_jacobian_inv(res[3:6])
    Ji[0:3, 0:3] = -np.eye(3)
    Ji[0:3, 3:6] = skew(Ri.T @ dp)
    Jj[0:3, 0:3] = Ri.T @ Rj
    Ji[3:6, 3:6] = -Jr_inv @ Rj.T @ Ri
    Jj[3:6, 3:6] = Jr_inv
    if with_aux:
        dv = fj.v - fi.v - gravity * blk.dt
        Ji[0:3, 6:9] = -Ri.T * blk.dt
        Ji[6:9, 3:6] = skew(Ri.T @ dv)
        Ji[6:9, 6:9] = -Ri.T
        Jj[6:9, 6:9] = Ri.T
    return Ji, Jj


def _absolute_prior(blk, f):
    Rm = so3_exp(blk.measurement[3:6])
    r_p = Rm.T @ (f.p - blk.measurement[:3])
    r_R = so3_log(Rm.T @ f.R)
    return np.concatenate([r_p, r_R]), Rm


def _absolute_prior_jac(blk, f):
    res, Rm = _absolute_prior(blk, f)
    J = np.zeros((POSE_DIM, f.dim))
    J[0:3, 0:3] = Rm.T @ f.R
    J[3:6, 3:6] = so3_right_jacobian_inv(res[3:6])
    return J


def evaluate_residual(block, problem, use_fej=True, jacobians=True):
    """Weighted residual and Jacobians of one block.

    Jacobians are keyed by ``("frame", id)`` / ``("landmark", id)``. Frames
    with a frozen linearization point contribute Jacobians evaluated there
    (when ``use_fej``); the residual value always uses the current state.
    A reprojection with the point behind the camera is returned with
    ``valid=False``.
    """
    states = problem.state_map()
    w = block.weights()
    if block.kind == "reprojection":
        res, Jh, Jt, Jl, valid = linearize_reprojections(problem, [block], use_fej, jacobians)
        jac = {}
        if jacobians:
            lm = problem.landmarks[block.landmark_ref]
            tgt = block.frame_refs[0]
            dim_t = states[tgt].dim
            if lm.host_frame != tgt:
                dim_h = states[lm.host_frame].dim
                jac[("frame", lm.host_frame)] = _pad(Jh[0], dim_h)
                jac[("frame", tgt)] = _pad(Jt[0], dim_t)
            jac[("landmark", block.landmark_ref)] = Jl[0]
        return Linearization(res[0], jac, bool(valid[0]))

    if block.kind == "relative_motion":
        fi, fj = states[block.frame_refs[0]], states[block.frame_refs[1]]
        res = _relative_motion(block, fi, fj, problem.gravity)[0] * w
        jac = {}
        if jacobians:
            Ji, Jj = _relative_motion_jac(block, fi.jacobian_state(use_fej), fj.jacobian_state(use_fej), problem.gravity)
            jac[("frame", fi.frame_id)] = Ji * w[:, None]
            jac[("frame", fj.frame_id)] = Jj * w[:, None]
        return Linearization(res, jac, True)

    f = states[block.frame_refs[0]]
    res = _absolute_prior(block, f)[0] * w
    jac = {}
    if jacobians:
        jac[("frame", f.frame_id)] = _absolute_prior_jac(block, f.jacobian_state(use_fej)) * w[:, None]
    return Linearization(res, jac, True)


def _pad(J, dim):
    if J.shape[1] == dim:
        return J
    out = np.zeros((J.shape[0], dim))
    out[:, :J.shape[1]] = J
    return out


def reprojection_blocks(problem, landmark_ids=None):
    if landmark_ids is None:
        return [b for b in problem.residuals if b.kind == "reprojection"]
    keep = set(landmark_ids)
    return [b for b in problem.residuals if b.kind == "reprojection" and b.landmark_ref in keep]


def total_energy(problem):
    """Active residual energy over valid blocks plus the prior energy."""
    e = 0.0
    rep = reprojection_blocks(problem)
    if rep:
        res, _, _, _, valid = linearize_reprojections(problem, rep, jacobians=False)
        e += 0.5 * float(np.sum(res[valid] ** 2))
    for blk in problem.residuals:
        if blk.kind != "reprojection":
            r = evaluate_residual(blk, problem, jacobians=False).residual
            e += 0.5 * float(r @ r)
    return e + prior_energy(problem.prior, problem.state_map())


@dataclass
class LandmarkBlock:
    """Dense per-landmark storage ``[frame columns | landmark (3) | residual]``.

    After nullspace projection the top ``rank`` rows keep the triangular
    landmark factor for back substitution and the remaining rows carry
    ``Q2^T [J r]`` with zero landmark columns.
    """

    landmark_id: int
    storage: np.ndarray
    n_frame_cols: int
    frame_order: tuple
    state: str = "linearized"
    rank: int = 3
    flagged: bool = False

    LM_DIM = 3

    @property
    def frame_cols(self):
        return self.storage[:, :self.n_frame_cols]

    @property
    def landmark_cols(self):
        return self.storage[:, self.n_frame_cols:self.n_frame_cols + 3]

    @property
    def residual_col(self):
        return self.storage[:, -1]

    @property
    def back_sub_rows(self):
        return self.storage[:self.rank] if self.state == "ns_projected" else None

    @property
    def projected_rows(self):
        if self.state != "ns_projected":
            raise ValueError("block has not been projected")
        return self.storage[self.rank:]


def landmark_tensor(problem, landmark_ids, order=None, use_fej=True, dtype=np.float64):
    """Padded ``(L, m_max, n_frame + 4)`` storage for the given landmarks.

    Rows are the landmark's reprojection residuals (two per observation) in
    residual-list order; padding rows are zero. Observations flagged invalid
    are left out. Returns ``(tensor, row_counts, kept_ids, n_frame_cols)``.
    """
    offsets, nf = problem.column_offsets(order)
    landmark_ids = list(landmark_ids)
    index = {lid: i for i, lid in enumerate(landmark_ids)}
    blocks = reprojection_blocks(problem, landmark_ids)
    res, Jh, Jt, Jl, valid = linearize_reprojections(problem, blocks, use_fej)
    keep = np.flatnonzero(valid)
    lm_idx = np.array([index[blocks[k].landmark_ref] for k in keep], dtype=int)
    counts = np.bincount(lm_idx, minlength=len(landmark_ids)) if len(keep) else np.zeros(len(landmark_ids), int)
    m_max = 2 * int(counts.max()) if len(counts) and counts.max() else 0
    S = np.zeros((len(landmark_ids), m_max, nf + 4), dtype=np.float64)
    if len(keep):
        order_k = np.argsort(lm_idx, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        pos = np.empty(len(keep), dtype=int)
        pos[order_k] = np.arange(len(keep)) - starts[lm_idx[order_k]]
        host_off = np.array([offsets[problem.landmarks[blocks[k].landmark_ref].host_frame] for k in keep])
        tgt_off = np.array([offsets[blocks[k].frame_refs[0]] for k in keep])
        cols6 = np.arange(6)
        for rr in range(2):
            rows = 2 * pos + rr
            S[lm_idx[:, None], rows[:, None], host_off[:, None] + cols6] += Jh[keep, rr]
            S[lm_idx[:, None], rows[:, None], tgt_off[:, None] + cols6] += Jt[keep, rr]
            S[lm_idx[:, None], rows[:, None], nf + np.arange(3)] = Jl[keep, rr]
            S[lm_idx, rows, nf + 3] = res[keep, rr]
    return S.astype(dtype, copy=False), 2 * counts, landmark_ids, nf


def assemble_landmark_blocks(problem, landmark_ids=None, use_fej=True, dtype=np.float64):
    """One dense :class:`LandmarkBlock` per landmark, frame columns ordered
    ``mu`` first per ``problem.partition``.

    Landmarks without any valid observation are omitted; the number omitted
    is returned alongside the blocks.
    """
    if landmark_ids is None:
        landmark_ids = list(problem.landmarks)
    order = problem.column_order()
    S, counts, ids, nf = landmark_tensor(problem, landmark_ids, order, use_fej, dtype)
    out = []
    omitted = 0
    for i, lid in enumerate(ids):
        if counts[i] == 0:
            omitted += 1
            continue
        out.append(LandmarkBlock(lid, S[i, :counts[i]].copy(), nf, tuple(order)))
    if omitted:
        log.debug("assemble_landmark_blocks: %d landmark(s) without valid observations", omitted)
    return out, omitted


def problem_to_dict(problem):
    return {
        "schema_version": SCHEMA_VERSION,
        "rig": problem.rig.to_dict(),
        "gravity": np.asarray(problem.gravity).tolist(),
        "frames": [f.to_dict() for f in problem.frames],
        "landmarks": [lm.to_dict() for lm in problem.landmarks.values()],
        "residuals": [b.to_dict() for b in problem.residuals],
        "prior": prior_to_dict(problem.prior),
        "partition": {str(k): v for k, v in problem.partition.items()},
    }


def problem_from_dict(d):
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValueError(f"unsupported problem schema_version {version!r}")
    return WindowProblem(
        frames=[FrameState.from_dict(f) for f in d["frames"]],
        landmarks={lm["landmark_id"]: Landmark.from_dict(lm) for lm in d["landmarks"]},
        residuals=[ResidualBlock.from_dict(b) for b in d["residuals"]],
        prior=prior_from_dict(d.get("prior")),
        rig=StereoRig(**d.get("rig", {})),
        gravity=np.array(d.get("gravity", GRAVITY)),
        partition={int(k): v for k, v in d.get("partition", {}).items()},
    )
