"""Random single-block problems and a central-difference Jacobian oracle."""

import numpy as np

from swba.lie import so3_exp
from swba.problem import ResidualBlock, WindowProblem, evaluate_residual
from swba.state import FrameState, Landmark

FD_STEP = 1e-6


def random_frame(rng, fid, with_aux):
    R = so3_exp(rng.normal(size=3))
    return FrameState(fid, R, rng.normal(size=3) * 3.0, rng.normal(size=3) if with_aux else None, float(fid))


def random_problem(rng, kind, with_aux=False):
    """A two-frame problem holding one block of ``kind`` at a random valid configuration."""
    while True:
        problem, blk = _random_problem(rng, kind, with_aux)
        if evaluate_residual(blk, problem, jacobians=False).valid:
            return problem, blk


def _random_problem(rng, kind, with_aux):
    f0 = random_frame(rng, 0, with_aux)
    f1 = random_frame(rng, 1, with_aux)
    lms = {}
    if kind == "reprojection":
        # keep the landmark in front of the target camera
        f1.R = f0.R @ so3_exp(rng.normal(size=3) * 0.2)
        f1.p = f0.p + f0.R @ rng.normal(size=3) * 0.5
        uv = rng.uniform(-0.5, 0.5, size=2)
        rho = rng.uniform(0.1, 1.0)
        lms[7] = Landmark(7, 0, [uv[0], uv[1], rho])
        same = rng.random() < 0.3
        blk = ResidualBlock("reprojection", (0 if same else 1,), rng.uniform(100, 500, size=2),
                            rng.uniform(0.5, 2.0), landmark_ref=7, camera=int(rng.integers(2)))
    elif kind == "relative_motion":
        n = 9 if with_aux else 6
        w = rng.uniform(0.5, 5.0, size=n)
        blk = ResidualBlock("relative_motion", (0, 1), rng.normal(size=n) * 0.5, w, dt=rng.uniform(0.05, 1.0))
    else:
        blk = ResidualBlock("absolute_prior", (1,), rng.normal(size=6) * 0.5, rng.uniform(0.5, 5.0))
    return WindowProblem(frames=[f0, f1], landmarks=lms, residuals=[blk]), blk


def _perturbed(problem, key, k, step):
    frames = list(problem.frames)
    lms = dict(problem.landmarks)
    if key[0] == "frame":
        i = problem.frame_ids().index(key[1])
        e = np.zeros(frames[i].dim)
        e[k] = step
        frames[i] = frames[i].retracted(e)
    else:
        lm = lms[key[1]]
        params = lm.params.copy()
        params[k] += step
        lms[key[1]] = Landmark(lm.landmark_id, lm.host_frame, params)
    return WindowProblem(frames=frames, landmarks=lms, residuals=problem.residuals, rig=problem.rig,
                         gravity=problem.gravity)


def numeric_jacobians(problem, block, keys_dims):
    out = {}
    for key, ncols in keys_dims.items():
        J = np.zeros((block.dim, ncols))
        for k in range(ncols):
            rp = evaluate_residual(block, _perturbed(problem, key, k, FD_STEP), jacobians=False).residual
            rm = evaluate_residual(block, _perturbed(problem, key, k, -FD_STEP), jacobians=False).residual
            J[:, k] = (rp - rm) / (2 * FD_STEP)
        out[key] = J
    return out


def jacobian_errors(problem, block):
    """Relative Frobenius error per Jacobian block; zero analytic blocks report
    the absolute size of the numeric one instead."""
    lin = evaluate_residual(block, problem)
    keys_dims = {key: J.shape[1] for key, J in lin.jacobians.items()}
    if block.kind == "reprojection" and block.frame_refs[0] == problem.landmarks[block.landmark_ref].host_frame:
        keys_dims[("frame", block.frame_refs[0])] = problem.frame(block.frame_refs[0]).dim
    num = numeric_jacobians(problem, block, keys_dims)
    errs = {}
    for key, Jn in num.items():
        Ja = lin.jacobians.get(key, np.zeros_like(Jn))
        na = np.linalg.norm(Ja)
        errs[key] = np.linalg.norm(Ja - Jn) / na if na > 0 else np.linalg.norm(Jn)
    return errs
