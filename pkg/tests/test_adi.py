import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from swe4dvar.adi import (
    AdiConfig,
    FrozenJacobian,
    NonConvergence,
    quasi_newton_solve,
    sparse_linear_solve,
)

from conftest import initial_state, make_model


def test_window_step():
    cfg = AdiConfig.from_window(3 * 3600.0, 91)
    assert cfg.dt == pytest.approx(120.0, rel=1e-15)
    assert cfg.nt == 91


@pytest.mark.parametrize("kw", [
    {"dt": 0.0, "nt": 5},
    {"dt": -1.0, "nt": 5},
    {"dt": 1.0, "nt": 1},
    {"dt": 1.0, "nt": 5, "newton_tol": 0.0},
    {"dt": 1.0, "nt": 5, "linear_solver": "cholesky"},
])
def test_config_rejects_bad_values(kw):
    with pytest.raises(ValueError):
        AdiConfig(**kw)


# quasi-Newton --------------------------------------------------------------------
def test_linear_residual_converges_in_one_iteration(rng):
    A = np.diag([2.0, 3.0, 5.0]) + 0.1 * rng.standard_normal((3, 3))
    b = rng.standard_normal(3)
    res = quasi_newton_solve(lambda w: A @ w - b, A, np.zeros(3))
    assert res.iterations == 1
    np.testing.assert_allclose(res.w, np.linalg.solve(A, b), rtol=1e-13)


def test_already_converged_guess_takes_no_iterations():
    res = quasi_newton_solve(lambda w: w - 1.0, np.eye(2), np.ones(2))
    assert res.iterations == 0
    np.testing.assert_array_equal(res.w, np.ones(2))


def test_scalar_chord_iteration():
    # g(w) = w^2 - 2 with the slope frozen at the guess 1.5: contraction factor |1 - 2w/3| ~ 0.057
    res = quasi_newton_solve(lambda w: w**2 - 2.0, np.array([[3.0]]), np.array([1.5]), tol=1e-14)
    assert res.w[0] == pytest.approx(np.sqrt(2.0), rel=1e-14)
    assert 5 <= res.iterations <= 15


def test_nonconvergence_is_reported():
    with pytest.raises(NonConvergence) as info:
        quasi_newton_solve(lambda w: w**2 + 1.0, np.array([[1.0]]), np.array([0.5]), max_iter=20)
    assert info.value.residual_norm > 0


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 5.0), st.floats(-3.0, 3.0))
def test_chord_solves_cubic(a, c):
    # w^3 + a w - c is monotone; an exact initial slope keeps the chord contractive near the root
    root_guess = np.cbrt(c)
    slope = 3 * root_guess**2 + a
    g = lambda w: w**3 + a * w - c  # noqa: E731
    res = quasi_newton_solve(g, np.array([[slope]]), np.array([root_guess]), tol=1e-12, max_iter=200)
    assert abs(g(res.w)[0]) <= 1e-10 * max(1.0, abs(c))


# linear solvers ------------------------------------------------------------------
def _diag_dominant(rng, n=60):
    A = sp.random(n, n, density=0.05, random_state=np.random.RandomState(3)) + sp.eye(n) * 4.0
    return sp.csc_matrix(A)


def test_gmres_matches_direct(rng):
    A = _diag_dominant(rng)
    b = rng.standard_normal(A.shape[0])
    x = sparse_linear_solve(A, b)
    np.testing.assert_allclose(A @ x, b, rtol=0, atol=1e-10 * np.linalg.norm(b))
    assert not np.any(sparse_linear_solve(A, np.zeros_like(b)))


def test_frozen_jacobian_transpose_solves(rng):
    A = _diag_dominant(rng)
    b = rng.standard_normal(A.shape[0])
    for cfg in (None, AdiConfig(1.0, 2, linear_solver="gmres")):
        J = FrozenJacobian(A, cfg)
        np.testing.assert_allclose(A @ J.solve(b), b, atol=1e-9)
        np.testing.assert_allclose(A.T @ J.solve_transpose(b), b, atol=1e-9)


# full model ----------------------------------------------------------------------
def test_forward_shapes_and_finiteness(tiny_model):
    w0 = initial_state(tiny_model)
    traj = tiny_model.forward(w0)
    assert traj.correctors.shape == (6, 3 * tiny_model.n)
    assert traj.predictors.shape == (5, 3 * tiny_model.n)
    assert np.array_equal(traj.correctors[0], w0)
    assert np.all(np.isfinite(traj.correctors))
    assert len(traj.newton_iterations) == 5


def test_forward_keeps_boundary_equations(tiny_model):
    traj = tiny_model.forward(initial_state(tiny_model))
    for w in traj.correctors:
        np.testing.assert_allclose(tiny_model.space.close(w), w, rtol=0, atol=1e-9 * np.max(np.abs(w)))


def test_forward_is_deterministic(tiny_model):
    w0 = initial_state(tiny_model)
    assert np.array_equal(tiny_model.forward(w0).correctors, tiny_model.forward(w0).correctors)


def test_geostrophic_state_evolves_slowly(tiny_model):
    # a balanced initial field changes by a small fraction over a few steps
    w0 = initial_state(tiny_model)
    wf = tiny_model.forward(w0).final
    n = tiny_model.n
    rel = np.linalg.norm(wf[2 * n:] - w0[2 * n:]) / np.linalg.norm(w0[2 * n:])
    assert rel < 1e-2


def test_gmres_forward_matches_direct():
    direct = make_model(9, 7, 4)
    gm = make_model(9, 7, 4, linear_solver="gmres")
    w0 = initial_state(direct)
    a, b = direct.forward(w0).final, gm.forward(w0).final
    np.testing.assert_allclose(b, a, rtol=0, atol=1e-8 * np.max(np.abs(a)))


# linearization -------------------------------------------------------------------
@pytest.fixture(scope="module")
def linearized(tiny_model):
    w0 = initial_state(tiny_model)
    traj = tiny_model.forward(w0)
    return tiny_model, w0, traj, tiny_model.linearize(traj)


def _active_direction(model, rng):
    return model.space.extend(rng.standard_normal(3 * model.space.n_act))


def test_tlm_matches_finite_differences(linearized, rng):
    model, w0, traj, lin = linearized
    dw = _active_direction(model, rng)
    dw *= 1e-3 * np.linalg.norm(w0) / np.linalg.norm(dw)
    tl = lin.tlm(dw)[-1]
    errs = []
    for eps in (1e-1, 1e-2):
        fd = (model.forward(w0 + eps * dw).final - traj.final) / eps
        errs.append(np.linalg.norm(fd - tl) / np.linalg.norm(tl))
    assert errs[1] < 1e-4
    assert errs[1] < 0.2 * errs[0]  # first-order truncation shrinks with eps


def test_tlm_superposition(linearized, rng):
    model, _, _, lin = linearized
    a, b = _active_direction(model, rng), _active_direction(model, rng)
    lhs = lin.tlm(2.0 * a - 3.0 * b)
    rhs = 2.0 * lin.tlm(a) - 3.0 * lin.tlm(b)
    np.testing.assert_allclose(lhs, rhs, rtol=0, atol=1e-12 * np.max(np.abs(rhs)))


def test_adjoint_duality(linearized, rng):
    model, _, traj, lin = linearized
    dw = _active_direction(model, rng)
    forcing = rng.standard_normal(traj.correctors.shape)
    tl = lin.tlm(dw)
    lam = lin.adjoint(forcing)
    lhs = np.sum(tl * forcing)
    rhs = dw @ lam.correctors[0]
    assert abs(lhs - rhs) <= 1e-12 * max(abs(lhs), np.linalg.norm(dw) * np.linalg.norm(lam.correctors[0]))


def test_adjoint_of_final_forcing_only(linearized, rng):
    model, _, traj, lin = linearized
    forcing = np.zeros(traj.correctors.shape)
    forcing[-1] = rng.standard_normal(forcing.shape[1])
    lam = lin.adjoint(forcing)
    assert lam.correctors.shape == traj.correctors.shape
    assert lam.predictors.shape == lam.z_first.shape == lam.z_second.shape == traj.predictors.shape
    np.testing.assert_array_equal(lam.correctors[-1], forcing[-1])
    zero = lin.adjoint(np.zeros_like(forcing))
    assert not np.any(zero.correctors)
