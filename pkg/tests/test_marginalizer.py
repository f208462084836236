import numpy as np
import pytest

from swba.linalg import DefinitenessWarning, compact_svd, min_eigenvalue
from swba.lie import so3_exp
from swba.marginalizer import (
    SQRT,
    SQUARED,
    MarginalizationInput,
    MarginalizationPrior,
    SingularBlockError,
    empty_prior,
    kappa_u_sqrt_system,
    marginalize_qr,
    marginalize_qr_detailed,
    marginalize_sc,
    prior_energy,
    prior_from_dict,
    prior_to_dict,
    shift_prior,
    sqrt_from_squared,
    squared_from_sqrt,
)
from swba.state import FrameState


def frames(rng, ids, aux=False):
    return {i: FrameState(i, so3_exp(rng.standard_normal(3)), rng.standard_normal(3),
                          rng.standard_normal(3) if aux else None) for i in ids}


def sqrt_prior(rng, ids=(1, 2), rows=None, aux=False):
    lp = frames(rng, ids, aux)
    dim = sum(f.dim for f in lp.values())
    J = np.triu(rng.standard_normal((rows or dim, dim)))
    return MarginalizationPrior(SQRT, tuple((i, lp[i].dim) for i in ids), lp, J=J, r=rng.standard_normal(J.shape[0]))


def moved(rng, lin_point, scale=0.1):
    return {i: f.retracted(rng.standard_normal(f.dim) * scale) for i, f in lin_point.items()}


def test_energy_at_linearization_point(rng):
    p = sqrt_prior(rng)
    assert prior_energy(p, p.lin_point) == pytest.approx(0.5 * p.r @ p.r)
    assert prior_energy(squared_from_sqrt(p), p.lin_point) == 0.0


def test_converted_energies_differ_by_constant(rng):
    p = sqrt_prior(rng)
    q = squared_from_sqrt(p)
    for _ in range(100):
        x = moved(rng, p.lin_point)
        assert prior_energy(p, x) - prior_energy(q, x) == pytest.approx(0.5 * p.r @ p.r, rel=1e-9)


def test_energy_is_quadratic_in_chart(rng):
    p = squared_from_sqrt(sqrt_prior(rng))
    d = rng.standard_normal(p.dim) * 0.1
    e = [prior_energy(p, {fid: p.lin_point[fid].retracted(k * d[off:off + dim])
                          for fid, (off, dim) in p.offsets().items()}) for k in (0, 1, 2)]
    assert e[2] - 2 * e[1] + e[0] == pytest.approx(d @ p.H @ d, rel=1e-9)


def test_energy_missing_frame(rng):
    p = sqrt_prior(rng)
    with pytest.raises(KeyError):
        prior_energy(p, {1: p.lin_point[1]})


def _translation_only(rng, p, scale):
    d = np.zeros(p.dim)
    for off, dim in p.offsets().values():
        d[off:off + 3] = rng.standard_normal(3) * scale
        d[off + 6:off + dim] = rng.standard_normal(dim - 6) * scale
    return d


def test_shift_prior_invariance_and_inverse(rng):
    p = sqrt_prior(rng, aux=True)
    assert shift_prior(p, np.zeros(p.dim)).r.tolist() == p.r.tolist()
    d = _translation_only(rng, p, 0.05)
    s = shift_prior(p, d)
    np.testing.assert_allclose(shift_prior(s, -d).r, p.r, atol=1e-12)
    # along translation and velocity the chart is linear, so the energy
    # difference is exactly constant in x
    diffs = []
    for _ in range(100):
        e = _translation_only(rng, p, 1.0)
        x = {fid: p.lin_point[fid].retracted(e[off:off + dim]) for fid, (off, dim) in p.offsets().items()}
        diffs.append(prior_energy(s, x) - prior_energy(p, x))
    assert np.ptp(diffs) <= 1e-9 * max(1.0, np.max(np.abs(diffs)))
    with pytest.raises(ValueError):
        shift_prior(p, np.zeros(p.dim + 1))


def test_shift_keeps_explicit_lin_point(rng):
    p = sqrt_prior(rng)
    new = moved(rng, p.lin_point)
    s = shift_prior(p, np.zeros(p.dim), new_lin_point=new)
    assert s.lin_point[1] is new[1]


def test_shift_commutes_with_conversion(rng):
    p = squared_from_sqrt(sqrt_prior(rng))
    d = rng.standard_normal(p.dim) * 0.1
    a = sqrt_from_squared(shift_prior(p, d))
    b = shift_prior(sqrt_from_squared(p), d)
    for _ in range(10):
        x = moved(rng, p.lin_point)
        assert prior_energy(a, x) - prior_energy(a, p.lin_point) == pytest.approx(
            prior_energy(b, x) - prior_energy(b, p.lin_point), rel=1e-8, abs=1e-10)


def test_sc_identity_decoupled():
    J = np.eye(5)
    r = np.arange(5.0)
    p = marginalize_sc(MarginalizationInput(J, r, 2, ((7, 3),)))
    np.testing.assert_allclose(p.H, np.eye(3))
    np.testing.assert_allclose(p.b, r[2:])


def test_sc_matches_brute_force(rng):
    J = rng.standard_normal((12, 8))
    r = rng.standard_normal(12)
    p = marginalize_sc(MarginalizationInput(J, r, 3, ((1, 5),)))
    H, b = J.T @ J, J.T @ r
    M = np.linalg.inv(H[:3, :3])
    np.testing.assert_allclose(p.H, H[3:, 3:] - H[3:, :3] @ M @ H[:3, 3:], atol=1e-10)
    np.testing.assert_allclose(p.b, b[3:] - H[3:, :3] @ M @ b[:3], atol=1e-10)


def test_sc_pseudo_matches_svd_projector(rng):
    base = rng.standard_normal((12, 2))
    Jm = np.hstack([base, base[:, :1]])
    Jk = rng.standard_normal((12, 5))
    J = np.hstack([Jm, Jk])
    r = rng.standard_normal(12)
    inp = MarginalizationInput(J, r, 3, ((1, 5),))
    with pytest.raises(SingularBlockError, match="use_pseudo"):
        marginalize_sc(inp)
    p = marginalize_sc(inp, use_pseudo=True)
    U1, _, _ = compact_svd(Jm)
    np.testing.assert_allclose(p.H, Jk.T @ Jk - Jk.T @ U1 @ U1.T @ Jk, atol=1e-10)
    np.testing.assert_allclose(p.b, Jk.T @ r - Jk.T @ U1 @ U1.T @ r, atol=1e-10)
    q = marginalize_qr(inp)
    np.testing.assert_allclose(q.J.T @ q.J, p.H, atol=1e-10)
    np.testing.assert_allclose(q.J.T @ q.r, p.b, atol=1e-10)


def test_qr_full_rank_equivalence_small(rng):
    for _ in range(50):
        n_mu, n_k = int(rng.integers(2, 7)), int(rng.integers(4, 31))
        m = n_mu + n_k + int(rng.integers(1, 10))
        J = rng.standard_normal((m, n_mu + n_k))
        r = rng.standard_normal(m)
        inp = MarginalizationInput(J, r, n_mu, ((1, n_k),))
        q, s = marginalize_qr(inp), marginalize_sc(inp)
        eps = np.finfo(float).eps
        assert q.J.shape[0] == n_k == q.rank
        assert np.linalg.norm(q.J.T @ q.J - s.H) <= 50 * eps * np.linalg.norm(s.H) * 10
        assert min_eigenvalue(q.J.T @ q.J) >= -10 * eps * np.linalg.norm(s.H)


def test_qr_rows_equal_rank(rng):
    Jk = rng.standard_normal((4, 6))  # kappa block of rank 4
    J = np.hstack([rng.standard_normal((4, 1)), Jk])
    q = marginalize_qr_detailed(MarginalizationInput(J, np.ones(4), 1, ((1, 6),)))
    assert q.mu_rank == 1
    assert q.prior.J.shape == (3, 6)


def test_qr_empty_kappa():
    p = marginalize_qr(MarginalizationInput(np.ones((3, 2)), np.ones(3), 2, ()))
    assert p.is_empty and p.J.shape == (0, 0)


def test_input_validation():
    with pytest.raises(ValueError):
        MarginalizationInput(np.ones((3, 4)), np.ones(2), 1, ((1, 3),))
    with pytest.raises(ValueError):
        MarginalizationInput(np.ones((3, 4)), np.ones(3), 2, ((1, 3),))


def test_prior_invariants(rng):
    with pytest.raises(ValueError):
        MarginalizationPrior(SQUARED, ((1, 2),), {}, H=np.array([[1.0, 2.0], [0.0, 1.0]]), b=np.zeros(2))
    with pytest.raises(ValueError):
        MarginalizationPrior(SQRT, ((1, 2),), {}, J=np.ones((3, 2)), r=np.ones(3))
    with pytest.raises(ValueError):
        MarginalizationPrior(SQRT, ((1, 2),), {}, J=np.ones((1, 3)), r=np.ones(1))
    assert empty_prior().rank == 0 and empty_prior(SQUARED).is_empty


def test_sqrt_from_squared_roundtrip(rng):
    j = rng.standard_normal((4, 6))
    lp = frames(rng, [1])
    sq = MarginalizationPrior(SQUARED, ((1, 6),), lp, H=j.T @ j, b=j.T @ rng.standard_normal(4))
    s = sqrt_from_squared(sq)
    assert 4 <= s.J.shape[0] <= 6
    back = squared_from_sqrt(s)
    np.testing.assert_allclose(back.H, sq.H, atol=1e-10)
    np.testing.assert_allclose(back.b, sq.b, atol=1e-10)
    ident = sqrt_from_squared(MarginalizationPrior(SQUARED, ((1, 6),), lp, H=np.eye(6), b=np.arange(6.0)))
    np.testing.assert_allclose(ident.J, np.eye(6))
    np.testing.assert_allclose(ident.r, np.arange(6.0))


def test_sqrt_from_indefinite_warns():
    p = MarginalizationPrior(SQUARED, ((1, 2),), {}, H=np.diag([1.0, -1e-3]).astype(np.float32),
                             b=np.zeros(2, np.float32))
    with pytest.warns(DefinitenessWarning):
        s = sqrt_from_squared(p)
    assert s.J.shape == (1, 2)


def test_kappa_u_system(rng):
    R = np.triu(rng.standard_normal((3, 3)))
    rt = rng.standard_normal(3)
    A, b = kappa_u_sqrt_system(R, rt, n_u=2)
    np.testing.assert_array_equal(A, np.hstack([R, np.zeros((3, 2))]))
    Jn = rng.standard_normal((4, 5))
    rn = rng.standard_normal(4)
    A, b = kappa_u_sqrt_system(R, rt, Jn, rn, n_u=2)
    H = Jn.T @ Jn
    H[:3, :3] += R.T @ R
    np.testing.assert_allclose(A.T @ A, H, atol=1e-12)
    np.testing.assert_allclose(A.T @ b, Jn.T @ rn + np.concatenate([R.T @ rt, np.zeros(2)]), atol=1e-12)
    with pytest.raises(ValueError):
        kappa_u_sqrt_system(R, rt, Jn[:, :4], rn, n_u=2)


@pytest.mark.parametrize("form", [SQRT, SQUARED])
def test_prior_dict_roundtrip(rng, form):
    p = sqrt_prior(rng, aux=True)
    if form == SQUARED:
        p = squared_from_sqrt(p)
    q = prior_from_dict(prior_to_dict(p))
    assert q.form == p.form and q.variable_index == p.variable_index
    x = moved(rng, p.lin_point)
    assert prior_energy(q, x) == prior_energy(p, x)
    assert prior_from_dict(prior_to_dict(None)) is None
