"""Synthetic stereo odometry worlds.

A world is a smooth ground-truth trajectory (circle, figure-eight or a
random walk), landmarks scattered in a shell around the path and a simulated
tracking frontend that produces per-keyframe stereo observations with
bounded track lengths, plus odometry-like relative-motion measurements.
Everything is drawn from a single ``numpy`` generator seeded by
``WorldParams.seed``.
"""

from dataclasses import asdict, dataclass, field

import numpy as np

from .lie import so3_exp, so3_log
from .problem import GRAVITY, StereoRig

PRESETS = ("circle", "figure8", "randomwalk")
GAUGE_MODES = ("vo_like", "vio_like")
LOOKAHEAD = 15.0


@dataclass
class WorldParams:
    seed: int = 0
    preset: str = "circle"
    n_frames: int = 60
    dt: float = 0.5
    speed: float = 1.0
    radius: float = 8.0
    landmark_density: float = 15.0
    shell: tuple = (2.5, 9.0)
    height_spread: float = 2.5
    observation_noise: float = 1.0
    pixel_sigma: float = 1.0
    motion_noise: tuple = (0.02, 0.005, 0.02)
    noise_free: bool = False
    gauge_mode: str = "vo_like"
    track_min: int = 3
    track_max: int = 6
    max_features: int = 50
    min_depth: float = 1.0
    max_depth: float = 20.0
    rig: StereoRig = field(default_factory=StereoRig)

    def validate(self):
        if self.preset not in PRESETS:
            raise ValueError(f"preset must be one of {PRESETS}")
        if self.gauge_mode not in GAUGE_MODES:
            raise ValueError(f"gauge_mode must be one of {GAUGE_MODES}")
        if self.n_frames < 2 or self.dt <= 0 or self.speed <= 0:
            raise ValueError("need n_frames >= 2, dt > 0 and speed > 0")
        if not 1 <= self.track_min <= self.track_max:
            raise ValueError("need 1 <= track_min <= track_max")
        if self.shell[0] <= 0 or self.shell[1] <= self.shell[0]:
            raise ValueError("shell must be (inner, outer) with 0 < inner < outer")
        if self.pixel_sigma <= 0 or min(self.motion_noise) <= 0:
            raise ValueError("weighting sigmas must be positive")

    def to_dict(self):
        d = asdict(self)
        d["shell"] = list(self.shell)
        d["motion_noise"] = list(self.motion_noise)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "rig" in d and isinstance(d["rig"], dict):
            d["rig"] = StereoRig(**d["rig"])
        for key in ("shell", "motion_noise"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class Observation:
    track_id: int
    camera: int
    pixel: np.ndarray


@dataclass
class FrameMeasurement:
    """Everything the estimator receives for one keyframe."""

    frame_id: int
    timestamp: float
    observations: list
    odometry: np.ndarray = None
    odometry_weight: np.ndarray = None
    odometry_dt: float = 0.0
    lost_tracks: list = field(default_factory=list)
    initial_pose: tuple = None


@dataclass
class SyntheticWorld:
    seed: int
    params: WorldParams
    rotations: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    timestamps: np.ndarray
    landmarks: np.ndarray
    track_landmark: dict
    observation_noise: float
    motion_noise: tuple

    @property
    def trajectory(self):
        return list(zip(self.rotations, self.positions))


def _heading_frame(forward, roll=0.0):
    f = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(f, up)
    x /= np.linalg.norm(x)
    y = np.cross(f, x)
    R = np.stack([x, y, f], axis=1)
    if roll:
        R = R @ so3_exp(np.array([0.0, 0.0, roll]))
    return R


def _path_function(params, rng):
    """Return ``pos(t)`` for the chosen preset (vectorized over t)."""
    r, s = params.radius, params.speed
    if params.preset == "circle":
        w = s / r

        def pos(t):
            t = np.asarray(t, dtype=float)
            return np.stack([r * np.cos(w * t), r * np.sin(w * t), 0.4 * np.sin(0.5 * w * t)], axis=-1)

        return pos, 2 * np.pi / w
    if params.preset == "figure8":
        # Average speed of the lemniscate-like curve is ~1.2 * r * w.
        w = s / (1.2 * r)

        def pos(t):
            t = np.asarray(t, dtype=float)
            return np.stack([r * np.sin(w * t), 0.6 * r * np.sin(2 * w * t), 0.3 * np.sin(3 * w * t)], axis=-1)

        return pos, 2 * np.pi / w

    T = params.n_frames * params.dt + LOOKAHEAD / params.speed + 1.0
    n_terms = 4
    freqs = rng.uniform(0.02, 0.12, n_terms)
    amps = rng.uniform(0.2, 0.6, n_terms) / np.sqrt(n_terms)
    phases = rng.uniform(0, 2 * np.pi, n_terms)
    grid = np.linspace(-1.0, T + 1.0, int((T + 2.0) * 50) + 1)
    heading = np.sum(amps[:, None] / (2 * np.pi * freqs[:, None])
                     * np.sin(2 * np.pi * freqs[:, None] * grid + phases[:, None]), axis=0)
    vel = s * np.stack([np.cos(heading), np.sin(heading)], axis=1)
    xy = np.concatenate([[0.0, 0.0]], axis=0)[None].repeat(len(grid), 0)
    dtg = grid[1] - grid[0]
    xy[1:] = np.cumsum(0.5 * (vel[1:] + vel[:-1]) * dtg, axis=0)

    def pos(t):
        t = np.asarray(t, dtype=float)
        x = np.interp(t, grid, xy[:, 0])
        y = np.interp(t, grid, xy[:, 1])
        return np.stack([x, y, 0.3 * np.sin(0.1 * t)], axis=-1)

    return pos, None


def _poses(pos, times, preset):
    h = 1e-3
    p = pos(times)
    v = (pos(times + h) - pos(times - h)) / (2 * h)
    Rs = np.empty((len(times), 3, 3))
    for k in range(len(times)):
        roll = 0.05 * np.sin(0.3 * times[k])
        Rs[k] = _heading_frame(v[k], roll)
    return Rs, p, v


def _sample_landmarks(params, pos, period, rng):
    # Cover the stretch ahead of the last frame too, so the final keyframes see points.
    T = params.n_frames * params.dt + LOOKAHEAD / params.speed
    if period is not None:
        T = min(T, period)
    ts = np.linspace(0.0, T, 400)
    pts = pos(ts)
    length = float(np.sum(np.linalg.norm(np.diff(pts, axis=0), axis=1)))
    n = max(int(params.landmark_density * length), 10)
    t = rng.uniform(0.0, T, n)
    base = pos(t)
    ang = rng.uniform(0, 2 * np.pi, n)
    dist = rng.uniform(params.shell[0], params.shell[1], n)
    off = np.stack([dist * np.cos(ang), dist * np.sin(ang), rng.normal(0.0, params.height_spread, n)], axis=1)
    cand = base + off
    # Keep points at least the inner shell radius away from the whole path.
    dense = pos(np.linspace(0.0, T, 2000))
    dmin = np.min(np.linalg.norm(cand[:, None, :2] - dense[None, :, :2], axis=2), axis=1)
    return cand[dmin >= params.shell[0] * 0.8]


def _project(rig, R, p, pts, cam):
    pc = (pts - p) @ R
    pc[:, 0] -= rig.baseline * cam
    z = pc[:, 2]
    zs = np.where(z > 1e-9, z, 1.0)
    uv = np.stack([rig.fx * pc[:, 0] / zs + rig.cx, rig.fy * pc[:, 1] / zs + rig.cy], axis=1)
    return uv, z


def _visible(params, R, p, pts):
    rig = params.rig
    ok = np.ones(len(pts), dtype=bool)
    pix = []
    for cam in (0, 1):
        uv, z = _project(rig, R, p, pts, cam)
        ok &= (z > params.min_depth) & (z < params.max_depth)
        ok &= (uv[:, 0] > 5) & (uv[:, 0] < rig.width - 5) & (uv[:, 1] > 5) & (uv[:, 1] < rig.height - 5)
        pix.append(uv)
    return ok, pix


def relative_measurement(Ri, pi, vi, Rj, pj, vj, dt, with_aux, gravity=GRAVITY):
    """Exact relative-motion measurement between two true states."""
    dp = pj - pi
    if with_aux:
        dp = dp - vi * dt - 0.5 * gravity * dt * dt
    parts = [Ri.T @ dp, so3_log(Ri.T @ Rj)]
    if with_aux:
        parts.append(Ri.T @ (vj - vi - gravity * dt))
    return np.concatenate(parts)


def generate_world(params):
    """Build a deterministic world and its measurement stream.

    Returns ``(world, stream)`` where ``stream`` is a list of
    :class:`FrameMeasurement`, one per keyframe.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    pos, period = _path_function(params, rng)
    times = np.arange(params.n_frames) * params.dt
    Rs, ps, vs = _poses(pos, times, params.preset)
    pts = _sample_landmarks(params, pos, period, rng)
    if len(pts) == 0:
        raise ValueError("world has no landmarks")

    noise_px = 0.0 if params.noise_free else params.observation_noise
    noise_motion = (0.0, 0.0, 0.0) if params.noise_free else tuple(params.motion_noise)
    with_aux = params.gauge_mode == "vio_like"
    sig_t, sig_r, sig_v = params.motion_noise
    odo_w = np.concatenate([np.full(3, 1 / sig_t), np.full(3, 1 / sig_r)] + ([np.full(3, 1 / sig_v)] if with_aux else []))

    active = {}
    track_landmark = {}
    next_track = 0
    stream = []
    for k in range(params.n_frames):
        R, p = Rs[k], ps[k]
        vis, pix = _visible(params, R, p, pts)
        if not np.any(vis):
            raise ValueError(f"no visible landmarks at frame {k}; geometry is infeasible")
        lost = []
        obs = []
        tracked_landmarks = set()
        for tid in sorted(active):
            li, remaining = active[tid]
            if remaining > 0 and vis[li]:
                active[tid] = (li, remaining - 1)
                tracked_landmarks.add(li)
            else:
                del active[tid]
                lost.append(tid)
        candidates = [i for i in rng.permutation(np.flatnonzero(vis)) if i not in tracked_landmarks]
        for li in candidates:
            if len(active) >= params.max_features:
                break
            length = int(rng.integers(params.track_min, params.track_max + 1))
            active[next_track] = (int(li), length - 1)
            track_landmark[next_track] = int(li)
            next_track += 1
        for tid in sorted(active):
            li = active[tid][0]
            for cam in (0, 1):
                uv = pix[cam][li] + (rng.normal(0.0, noise_px, 2) if noise_px > 0 else 0.0)
                obs.append(Observation(tid, cam, np.asarray(uv, dtype=float)))
        odo = None
        if k > 0:
            odo = relative_measurement(Rs[k - 1], ps[k - 1], vs[k - 1], R, p, vs[k], params.dt, with_aux)
            if noise_motion[0] > 0:
                odo[:3] += rng.normal(0.0, noise_motion[0], 3)
                odo[3:6] = so3_log(so3_exp(odo[3:6]) @ so3_exp(rng.normal(0.0, noise_motion[1], 3)))
                if with_aux:
                    odo[6:9] += rng.normal(0.0, noise_motion[2], 3)
        stream.append(FrameMeasurement(
            frame_id=k,
            timestamp=float(times[k]),
            observations=obs,
            odometry=odo,
            odometry_weight=odo_w if k > 0 else None,
            odometry_dt=params.dt,
            lost_tracks=lost,
            initial_pose=(R.copy(), p.copy(), vs[k].copy()) if k == 0 else None,
        ))

    world = SyntheticWorld(
        seed=params.seed,
        params=params,
        rotations=Rs,
        positions=ps,
        velocities=vs,
        timestamps=times,
        landmarks=pts,
        track_landmark=track_landmark,
        observation_noise=noise_px,
        motion_noise=noise_motion,
    )
    return world, stream
