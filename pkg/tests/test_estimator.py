from dataclasses import replace

import numpy as np
import pytest

from swba.estimator import (
    NumericalFailure,
    SolverConfig,
    _project_batch,
    back_substitute,
    build_reduced_system,
    marginalize_frame,
    ns_project_landmark,
    optimize,
    solve_rcs,
)
from swba.evaluation import ate_rmse
from swba.lie import so3_exp
from swba.marginalizer import SQRT, SQUARED, MarginalizationPrior, squared_from_sqrt
from swba.problem import LandmarkBlock, ResidualBlock, WindowProblem, assemble_landmark_blocks, landmark_tensor
from swba.sim import WorldParams, generate_world
from swba.state import FrameState
from windows import dense_system, run_window


@pytest.fixture(scope="module")
def est_window():
    return run_window(n_frames=7, window_size=4)


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(opt_backend="dense")
    with pytest.raises(ValueError):
        SolverConfig(precision="half")
    with pytest.raises(ValueError):
        SolverConfig(window_size=1)
    with pytest.raises(ValueError):
        SolverConfig(lm={"initial_damping": 0.0})
    cfg = SolverConfig(marg_backend="sc_sc", lm={"max_iterations": 3})
    assert cfg.prior_form == SQUARED and cfg.lm.max_iterations == 3
    assert SolverConfig().to_dict()["lm"]["up"] == 2.0


def test_ns_projection_matches_per_landmark_sc(est_window):
    est, _, _ = est_window
    blocks, _ = assemble_landmark_blocks(est.problem)
    for blk in blocks[:25]:
        S = blk.storage
        nf = blk.n_frame_cols
        proj = ns_project_landmark(blk)
        assert proj.state == "ns_projected"
        Jf, Jl, r = S[:, :nf], S[:, nf:nf + 3], S[:, -1]
        Hll = Jl.T @ Jl
        if proj.rank == 3:
            M = np.linalg.inv(Hll)
            H_ref = Jf.T @ Jf - Jf.T @ Jl @ M @ Jl.T @ Jf
            b_ref = Jf.T @ r - Jf.T @ Jl @ M @ Jl.T @ r
            P = proj.projected_rows
            scale = np.abs(Jf.T @ Jf).max()
            np.testing.assert_allclose(P[:, :nf].T @ P[:, :nf], H_ref, atol=1e-9 * scale)
            np.testing.assert_allclose(P[:, :nf].T @ P[:, -1], b_ref, atol=1e-9 * max(scale, 1.0))
            assert np.all(P[:, nf:nf + 3] == 0)
        with pytest.raises(ValueError):
            ns_project_landmark(proj)


def test_single_observation_landmark_keeps_all_rows(rng):
    S = np.zeros((2, 6 + 4))
    S[:, :6] = rng.standard_normal((2, 6))
    S[:, 6:9] = rng.standard_normal((2, 3))
    S[:, 9] = rng.standard_normal(2)
    proj = ns_project_landmark(LandmarkBlock(1, S, 6, (0,)))
    assert proj.rank == 2 and proj.flagged
    assert proj.projected_rows.shape[0] == 0
    assert proj.back_sub_rows.shape[0] == 2


@pytest.mark.parametrize("dtype", [np.float64, np.float32])
def test_batched_projection_matches_per_block(est_window, dtype):
    est, _, _ = est_window
    prob = est.problem
    S, counts, lids, nf = landmark_tensor(prob, list(prob.landmarks), prob.frame_ids(), dtype=dtype)
    ref = [ns_project_landmark(LandmarkBlock(l, S[i, :counts[i]].copy(), nf, ())) for i, l in enumerate(lids)]
    B = S.copy()
    ranks = _project_batch(B, counts, 256.0)
    tol = 1e-9 if dtype == np.float64 else 2e-3
    for i, r in enumerate(ref):
        assert ranks[i] == r.rank
        c = counts[i]
        got = B[i, :c].astype(np.float64)
        want = r.storage.astype(np.float64)
        # reflectors are unique up to sign per row
        for row in range(c):
            if np.dot(got[row], want[row]) < 0:
                want[row] = -want[row]
        np.testing.assert_allclose(got, want, atol=tol * max(1.0, np.abs(want).max()))


def test_backends_give_same_reduced_system(est_window):
    est, _, cfg = est_window
    ns = build_reduced_system(est.problem, replace(cfg, opt_backend="ns_ldlt"))
    sc = build_reduced_system(est.problem, replace(cfg, opt_backend="sc_ldlt"))
    scale = np.abs(sc.H).max()
    np.testing.assert_allclose(ns.H, sc.H, atol=1e-8 * scale)
    np.testing.assert_allclose(ns.b, sc.b, atol=1e-8 * scale)


@pytest.mark.parametrize("backend", ["ns_ldlt", "sc_ldlt"])
def test_reduced_solve_and_back_substitution_match_joint_solve(est_window, backend):
    est, _, cfg = est_window
    prob = est.problem
    system = build_reduced_system(prob, replace(cfg, opt_backend=backend))
    dx = solve_rcs(system, 0.0)
    dl = back_substitute(system, dx)
    J, r, offsets, lids = dense_system(prob)
    joint = -np.linalg.lstsq(J, r, rcond=None)[0]
    nf = sum(f.dim for f in prob.frames)
    scale = np.abs(joint).max()
    np.testing.assert_allclose(dx, joint[:nf], atol=1e-7 * scale)
    for i, lid in enumerate(system.landmark_ids):
        off = offsets[("landmark", lid)]
        np.testing.assert_allclose(dl[i], joint[off:off + 3], atol=1e-7 * scale)


def test_first_marginalization_keeps_gauge_freedom():
    est, _, _ = run_window(n_frames=5, window_size=4, noise_free=True)
    rec = est.records[0]
    assert rec.prior_dim - rec.prior_rank >= 6
    assert max(abs(rec.probe_costs[k]) for k in ("tx", "ty", "tz", "roll", "pitch", "yaw")) < 1e-8


def _prior_only_problem(rng, form):
    fr = [FrameState(i, so3_exp(rng.standard_normal(3) * 0.1), rng.standard_normal(3)) for i in range(3)]
    for f in fr:
        f.freeze()
    J = rng.standard_normal((18, 18))
    prior = MarginalizationPrior(SQRT, tuple((f.frame_id, 6) for f in fr),
                                 {f.frame_id: f.lin_point for f in fr}, J=np.triu(J), r=rng.standard_normal(18))
    if form == SQUARED:
        prior = squared_from_sqrt(prior)
    return WindowProblem(frames=fr, prior=prior)


@pytest.mark.parametrize("marg", ["ns_qr", "sc_sc"])
def test_prior_only_marginalization_is_dense_sc(rng, marg):
    form = SQUARED if marg == "sc_sc" else SQRT
    prob = _prior_only_problem(rng, form)
    H, b = prob.prior.hessian()
    ref_H = H[6:, 6:] - H[6:, :6] @ np.linalg.solve(H[:6, :6], H[:6, 6:])
    ref_b = b[6:] - H[6:, :6] @ np.linalg.solve(H[:6, :6], b[:6])
    cfg = SolverConfig(window_size=2, marg_backend=marg, anchor_weight=0.0)
    _, rec = marginalize_frame(prob, cfg)
    Hn, bn = prob.prior.hessian()
    np.testing.assert_allclose(Hn, ref_H, atol=1e-9 * np.abs(ref_H).max())
    np.testing.assert_allclose(bn, ref_b, atol=1e-9 * np.abs(ref_H).max())
    assert prob.frame_ids() == [1, 2] and rec.prior_dim == 12


def test_marginalize_requires_overfull_window(est_window):
    est, _, cfg = est_window
    with pytest.raises(ValueError):
        marginalize_frame(est.problem.copy(), cfg)


def test_noise_free_converges():
    est, world, _ = run_window(n_frames=10, window_size=5, noise_free=True)
    traj = est.finish()
    truth = [(world.rotations[i], world.positions[i]) for i in range(len(traj))]
    assert ate_rmse(traj, truth) < 1e-6
    assert all(r.sigma_min is not None for r in est.records)


def test_vio_window_runs():
    est, _, _ = run_window(n_frames=8, window_size=4, gauge_mode="vio_like", noise_free=True)
    assert not est.failed
    rec = est.records[-1]
    assert max(abs(rec.probe_costs[k]) for k in ("tx", "ty", "tz", "yaw")) < 1e-8
    assert min(abs(rec.probe_costs[k]) for k in ("roll", "pitch")) > 1e-3


def test_nonfinite_energy_raises(est_window):
    _, _, cfg = est_window
    est, _, _ = run_window(n_frames=3, window_size=4)
    prob = est.problem
    prob.residuals.append(ResidualBlock("absolute_prior", (prob.frames[0].frame_id,), np.full(6, np.nan)))
    with pytest.raises(NumericalFailure):
        optimize(prob, cfg)


def test_estimator_records_failure_and_stops():
    est, _, _ = run_window(n_frames=3, window_size=4)
    est.problem.residuals.append(ResidualBlock("absolute_prior", (0,), np.full(6, np.inf)))
    events = []
    est.sink = events.append
    _, stream = generate_world(WorldParams(seed=3, n_frames=5))
    est.process(stream[3])
    assert est.failed and est.failure_reason
    assert events[-1]["type"] == "failure"
    n = len(est.problem.frames)
    est.process(stream[4])
    assert len(est.problem.frames) == n
