"""Trajectory error, prior-health diagnostics and their file formats."""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .lie import quat_xyzw, rot_from_quat_xyzw
from .linalg import min_eigenvalue

PROBE_NAMES = ("tx", "ty", "tz", "roll", "pitch", "yaw", "random")
CSV_COLUMNS = ("event", "sigma_min", "tx", "ty", "tz", "roll", "pitch", "yaw", "random", "rank", "rank_gap")
GAUGE_DIRECTIONS = {
    "vo_like": ("tx", "ty", "tz", "roll", "pitch", "yaw"),
    "vio_like": ("tx", "ty", "tz", "yaw"),
}


@dataclass
class DiagnosticsRecord:
    event_index: int
    sigma_min: float = None
    probe_costs: dict = field(default_factory=dict)
    prior_rank: int = 0
    rank_gap: int = 0
    prior_dim: int = 0
    dropped_observations: int = 0
    marginalized_landmarks: int = 0

    def to_dict(self):
        return {
            "event_index": self.event_index,
            "sigma_min": self.sigma_min,
            "probe_costs": {k: float(v) for k, v in self.probe_costs.items()},
            "prior_rank": self.prior_rank,
            "rank_gap": self.rank_gap,
            "prior_dim": self.prior_dim,
            "dropped_observations": self.dropped_observations,
            "marginalized_landmarks": self.marginalized_landmarks,
        }


def align_rigid(estimate, truth):
    """Least-squares ``(R, t)`` with ``R @ estimate_i + t ~ truth_i`` (no scale)."""
    e = np.asarray(estimate, dtype=np.float64)
    g = np.asarray(truth, dtype=np.float64)
    if e.shape != g.shape or e.ndim != 2 or e.shape[1] != 3:
        raise ValueError(f"position arrays must both be (n, 3), got {e.shape} and {g.shape}")
    ce, cg = e.mean(axis=0), g.mean(axis=0)
    C = (g - cg).T @ (e - ce)
    U, _, Vt = np.linalg.svd(C)
    S = np.eye(3)
    S[2, 2] = np.sign(np.linalg.det(U @ Vt)) or 1.0
    R = U @ S @ Vt
    return R, cg - R @ ce


def _positions(poses):
    if isinstance(poses, np.ndarray) and poses.ndim == 2 and poses.shape[1] == 3:
        return poses.astype(np.float64)
    out = []
    for item in poses:
        if isinstance(item, (tuple, list)):
            out.append(np.asarray(item[-1], dtype=np.float64))
        else:
            a = np.asarray(item, dtype=np.float64)
            out.append(a[:3, 3] if a.shape == (4, 4) else a)
    return np.array(out).reshape(-1, 3)


def ate_rmse(estimate, truth):
    """Translational RMSE after rigid alignment of ``estimate`` onto ``truth``.

    Both arguments are sequences of ``(R, p)`` pairs (or ``(t, R, p)``
    triples), 4x4 matrices or bare positions, associated by index.
    """
    e, g = _positions(estimate), _positions(truth)
    if len(e) != len(g):
        raise ValueError(f"trajectory lengths differ: {len(e)} vs {len(g)}")
    if len(e) < 3:
        raise ValueError("ate_rmse needs at least 3 poses")
    R, t = align_rigid(e, g)
    d = e @ R.T + t - g
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


def probe_vectors(prior, rng=None):
    """Unit perturbations of the prior's linearization point, keyed by probe name.

    Translations move every frame by the same world vector; rotations turn
    all frames (orientation, position and velocity) about a world axis
    through the origin. Both are written in each frame's local chart.
    """
    n = prior.dim
    probes = {}
    for k, name in enumerate(("tx", "ty", "tz")):
        a = np.zeros(3)
        a[k] = 1.0
        eps = np.zeros(n)
        for fid, (off, dim) in prior.offsets().items():
            eps[off:off + 3] = prior.lin_point[fid].R.T @ a
        probes[name] = eps
    for k, name in enumerate(("roll", "pitch", "yaw")):
        a = np.zeros(3)
        a[k] = 1.0
        eps = np.zeros(n)
        for fid, (off, dim) in prior.offsets().items():
            s = prior.lin_point[fid]
            eps[off:off + 3] = s.R.T @ np.cross(a, s.p)
            eps[off + 3:off + 6] = s.R.T @ a
            if dim > 6:
                eps[off + 6:off + 9] = np.cross(a, s.v)
        probes[name] = eps
    rng = np.random.default_rng() if rng is None else rng
    probes["random"] = rng.standard_normal(n)
    for name, eps in probes.items():
        nrm = np.linalg.norm(eps)
        probes[name] = eps / nrm if nrm > 0 else eps
    return probes


def probe_nullspace(prior, gauge_mode=None, rng=None):
    """``dE = 0.5 e^T H e + e^T b`` of the prior for each unit probe ``e`` (double).

    ``gauge_mode`` does not change the probes; it is accepted so callers can
    pair the result with :data:`GAUGE_DIRECTIONS`.
    """
    if gauge_mode is not None and gauge_mode not in GAUGE_DIRECTIONS:
        raise ValueError(f"unknown gauge_mode {gauge_mode!r}")
    if prior is None or prior.is_empty:
        return {name: 0.0 for name in PROBE_NAMES}
    H, b = prior.hessian()
    out = {}
    for name, eps in probe_vectors(prior, rng).items():
        out[name] = float(0.5 * eps @ H @ eps + eps @ b)
    return out


def track_sigma_min(prior):
    """Smallest eigenvalue of the prior Hessian in double, ``None`` for an empty prior."""
    if prior is None or prior.is_empty:
        return None
    return min_eigenvalue(prior.hessian()[0])


def diagnostics_csv(records):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for rec in records:
        sig = "" if rec.sigma_min is None else repr(float(rec.sigma_min))
        row = [rec.event_index, sig]
        row += [repr(float(rec.probe_costs.get(k, 0.0))) for k in PROBE_NAMES]
        row += [rec.prior_rank, rec.rank_gap]
        w.writerow(row)
    return buf.getvalue()


def read_diagnostics_csv(text):
    rows = list(csv.DictReader(io.StringIO(text)))
    out = []
    for row in rows:
        missing = [c for c in CSV_COLUMNS if c not in row]
        if missing:
            raise ValueError(f"diagnostics CSV lacks columns {missing}")
        out.append(DiagnosticsRecord(
            event_index=int(row["event"]),
            sigma_min=None if row["sigma_min"] == "" else float(row["sigma_min"]),
            probe_costs={k: float(row[k]) for k in PROBE_NAMES},
            prior_rank=int(row["rank"]),
            rank_gap=int(row["rank_gap"]),
        ))
    return out


def trajectory_text(entries):
    """``timestamp tx ty tz qx qy qz qw`` lines from ``(timestamp, R, p)`` entries."""
    lines = []
    for ts, R, p in entries:
        q = quat_xyzw(R)
        vals = [float(ts)] + [float(x) for x in p] + [float(x) for x in q]
        lines.append(" ".join(repr(v) for v in vals))
    return "\n".join(lines) + ("\n" if lines else "")


def parse_trajectory(text, name="trajectory"):
    out = []
    for k, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 8:
            raise ValueError(f"{name}: line {k} has {len(parts)} fields, expected 8")
        try:
            vals = [float(x) for x in parts]
        except ValueError:
            raise ValueError(f"{name}: line {k} is not numeric") from None
        out.append((vals[0], rot_from_quat_xyzw(vals[4:8]), np.array(vals[1:4])))
    return out
