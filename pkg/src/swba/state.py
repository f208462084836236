"""Frame and landmark state containers."""

from dataclasses import dataclass, field

import numpy as np

from .lie import orthonormalize, se3_exp, se3_log

POSE_DIM = 6
AUX_DIM = 3


@dataclass
class FrameState:
    """Pose of one keyframe (world-from-body) plus an optional velocity block.

    The local chart is ``[rho, omega, dv]``: a right-multiplied SE(3)
    increment followed, when present, by an additive world-frame velocity
    increment. ``lin_point`` is the frozen first-estimate copy used for
    Jacobians once the frame is connected to the marginalization prior.
    """

    frame_id: int
    R: np.ndarray
    p: np.ndarray
    v: np.ndarray = None
    timestamp: float = 0.0
    lin_point: "FrameState" = field(default=None, repr=False)

    def __post_init__(self):
        self.R = np.array(self.R, dtype=np.float64).reshape(3, 3)
        self.p = np.array(self.p, dtype=np.float64).reshape(3)
        if self.v is not None:
            self.v = np.array(self.v, dtype=np.float64).reshape(3)

    @property
    def dim(self):
        return POSE_DIM + (AUX_DIM if self.v is not None else 0)

    @property
    def frozen(self):
        return self.lin_point is not None

    def copy(self, with_lin_point=True):
        return FrameState(
            self.frame_id,
            self.R.copy(),
            self.p.copy(),
            None if self.v is None else self.v.copy(),
            self.timestamp,
            self.lin_point if with_lin_point else None,
        )

    def freeze(self):
        """Freeze the current state as linearization point (no-op if frozen)."""
        if self.lin_point is None:
            self.lin_point = self.copy(with_lin_point=False)
        return self.lin_point

    def jacobian_state(self, use_fej=True):
        return self.lin_point if (use_fej and self.lin_point is not None) else self

    def retracted(self, delta):
        """Return a copy moved by ``delta`` in the local chart."""
        delta = np.asarray(delta, dtype=np.float64)
        if delta.shape != (self.dim,):
            raise ValueError(f"increment has shape {delta.shape}, expected ({self.dim},)")
        dR, dp = se3_exp(delta[:POSE_DIM])
        out = self.copy()
        out.p = self.p + self.R @ dp
        out.R = orthonormalize(self.R @ dR)
        if self.v is not None:
            out.v = self.v + delta[POSE_DIM:]
        return out

    def boxminus(self, other):
        """Local-chart difference ``self [-] other`` taken at ``other``."""
        xi = se3_log(other.R.T @ self.R, other.R.T @ (self.p - other.p))
        if self.v is None:
            return xi
        return np.concatenate([xi, self.v - other.v])

    def to_dict(self):
        d = {
            "frame_id": int(self.frame_id),
            "timestamp": float(self.timestamp),
            "R": self.R.reshape(-1).tolist(),
            "p": self.p.tolist(),
            "v": None if self.v is None else self.v.tolist(),
        }
        d["lin_point"] = None if self.lin_point is None else self.lin_point.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        lin = d.get("lin_point")
        return cls(
            d["frame_id"],
            np.array(d["R"]).reshape(3, 3),
            d["p"],
            d.get("v"),
            d.get("timestamp", 0.0),
            None if lin is None else cls.from_dict(lin),
        )


@dataclass
class Landmark:
    """Point parameterized in its host frame as ``(u, v, inverse_depth)``.

    ``(u, v)`` are normalized image coordinates of the host's left camera,
    so the point in the host body frame is ``[u, v, 1] / inverse_depth``.
    """

    landmark_id: int
    host_frame: int
    params: np.ndarray
    track_lost: bool = False

    def __post_init__(self):
        self.params = np.array(self.params, dtype=np.float64).reshape(3)

    @property
    def inverse_depth(self):
        return float(self.params[2])

    def point_in_host(self):
        u, v, rho = self.params
        return np.array([u, v, 1.0]) / rho

    def to_dict(self):
        return {
            "landmark_id": int(self.landmark_id),
            "host_frame": int(self.host_frame),
            "params": self.params.tolist(),
            "track_lost": bool(self.track_lost),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["landmark_id"], d["host_frame"], d["params"], d.get("track_lost", False))
