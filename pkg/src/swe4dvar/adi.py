"""Gustafsson two-step ADI scheme: forward, tangent linear and adjoint models.

Each time step is split into two half steps of length ``tau = dt / 2``::

    g1(w_half, w_N)  = m * (w_half - w_N  + tau * (X(w_half) + Y(w_N)))    + B w_half
    g2(w_next, w_half) = m * (w_next - w_half + tau * (Y(w_next) + X(w_half))) + B w_next

``X`` collects the x-direction terms (plus the Coriolis force in the v
equation), ``Y`` the y-direction terms (plus the Coriolis force in the u
equation), ``m`` is the active-row mask and ``B`` the boundary operator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .swe import (
    X_GROUP,
    Y_GROUP,
    Grid,
    PhysicalConstants,
    StateVector,
    active_space,
    boundary_operator,
    build_difference_operators,
    coriolis_field,
)

log = logging.getLogger(__name__)

__all__ = [
    "AdiConfig",
    "NonConvergence",
    "LinearSolverError",
    "Trajectory",
    "AdjointTrajectory",
    "FrozenJacobian",
    "AdiScheme",
    "Linearization",
    "SweModel",
    "NewtonResult",
    "quasi_newton_solve",
    "sparse_linear_solve",
    "forward_trajectory",
]


class NonConvergence(RuntimeError):
    """Quasi-Newton iteration did not reach the requested tolerance."""

    def __init__(self, message, residual_norm=np.nan, step=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.step = step


class LinearSolverError(RuntimeError):
    pass


@dataclass(frozen=True)
class AdiConfig:
    dt: float
    nt: int
    newton_tol: float = 1e-10
    newton_max_iter: int = 50
    linear_solver: str = "direct"
    gmres_tol: float = 1e-12
    gmres_max_iter: int = 500
    gmres_restart: int = 30

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if self.nt < 2:
            raise ValueError("need at least two time levels")
        for name in ("newton_tol", "gmres_tol"):
            if not 0 < getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in (0, 1)")
        if self.linear_solver not in ("direct", "gmres"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")

    @classmethod
    def from_window(cls, t_final: float, nt: int, **kw) -> "AdiConfig":
        return cls(dt=t_final / (nt - 1), nt=nt, **kw)


def sparse_linear_solve(A, b, cfg: AdiConfig | None = None, M=None):
    """Restarted GMRES with an incomplete-LU preconditioner.

    Raises LinearSolverError when the relative residual target is missed.
    """
    tol = cfg.gmres_tol if cfg else 1e-12
    restart = cfg.gmres_restart if cfg else 30
    maxiter = cfg.gmres_max_iter if cfg else 500
    A = sp.csc_matrix(A)
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0:
        return np.zeros_like(b)
    if M is None:
        ilu = spla.spilu(A, drop_tol=1e-6, fill_factor=20)
        M = spla.LinearOperator(A.shape, ilu.solve)
    x, info = spla.gmres(A, b, rtol=tol, atol=0.0, restart=restart, maxiter=maxiter, M=M)
    res = np.linalg.norm(A @ x - b)
    if info != 0 and res > tol * bnorm * 10:
        raise LinearSolverError(f"GMRES failed (info={info}, relative residual {res / bnorm:.2e})")
    return x


class FrozenJacobian:
    """A sparse Jacobian together with a reusable solver handle."""

    def __init__(self, matrix, cfg: AdiConfig | None = None):
        self.matrix = sp.csc_matrix(matrix)
        self.cfg = cfg
        self._lu = None
        self._ilu = None

    def _factor(self):
        if self._lu is None:
            self._lu = spla.splu(self.matrix)
        return self._lu

    def solve(self, b):
        if self.cfg is not None and self.cfg.linear_solver == "gmres":
            return self._gmres(self.matrix, b, trans=False)
        return self._factor().solve(b)

    def solve_transpose(self, b):
        if self.cfg is not None and self.cfg.linear_solver == "gmres":
            return self._gmres(self.matrix.T, b, trans=True)
        return self._factor().solve(b, trans="T")

    def _gmres(self, A, b, trans):
        if self._ilu is None:
            self._ilu = spla.spilu(self.matrix, drop_tol=1e-6, fill_factor=20)
        ilu = self._ilu
        if trans:
            M = spla.LinearOperator(A.shape, lambda r: ilu.solve(r, trans="T"))
        else:
            M = spla.LinearOperator(A.shape, ilu.solve)
        return sparse_linear_solve(A, b, self.cfg, M=M)


class NewtonResult(NamedTuple):
    w: np.ndarray
    iterations: int
    residual_norm: float


def quasi_newton_solve(residual: Callable, jac, guess, tol=1e-10, max_iter=50, atol=None):
    """Chord iteration ``w <- w - J^{-1} g(w)`` with a fixed Jacobian.

    ``jac`` is anything with a ``solve`` method or a dense/sparse matrix.
    Converged when ``|g(w)| <= tol * |g(guess)|`` or below ``atol``, which
    defaults to a round-off floor scaled by the size of ``guess``.
    """
    if not hasattr(jac, "solve"):
        jac = FrozenJacobian(jac) if sp.issparse(jac) else _DenseJacobian(jac)
    w = np.array(guess, dtype=float, copy=True)
    if atol is None:
        atol = 64 * np.finfo(float).eps * max(1.0, float(np.max(np.abs(w), initial=0.0)))
    r = residual(w)
    r0 = float(np.linalg.norm(r))
    if r0 <= atol:
        return NewtonResult(w, 0, r0)
    target = max(tol * r0, atol)
    rn = r0
    for it in range(1, max_iter + 1):
        w -= jac.solve(r)
        r = residual(w)
        rn = float(np.linalg.norm(r))
        if not np.isfinite(rn):
            break
        if rn <= target:
            return NewtonResult(w, it, rn)
    raise NonConvergence(
        f"quasi-Newton stalled at residual {rn:.3e} (target {target:.3e})", residual_norm=rn
    )


class _DenseJacobian:
    def __init__(self, a):
        a = np.atleast_2d(np.asarray(a, dtype=float))
        if not np.all(np.isfinite(a)):
            raise LinearSolverError("non-finite entries in dense Jacobian")
        self._lu = sla.lu_factor(a, check_finite=False)

    def solve(self, b):
        return sla.lu_solve(self._lu, b, check_finite=False)

    def solve_transpose(self, b):
        return sla.lu_solve(self._lu, b, trans=1, check_finite=False)


@dataclass
class Trajectory:
    """Corrector states ``w(t_i)`` and predictor states ``w(t_{i+1/2})``."""

    correctors: np.ndarray  # (nt, 3n)
    predictors: np.ndarray  # (nt - 1, 3n)
    newton_iterations: list = field(default_factory=list)

    @property
    def nt(self) -> int:
        return self.correctors.shape[0]

    @property
    def final(self) -> np.ndarray:
        return self.correctors[-1]


@dataclass
class AdjointTrajectory:
    """Adjoint states and the intermediate solves of every step.

    ``correctors[i]`` is lambda at ``t_i`` (observation forcing included),
    ``predictors[i]`` is lambda at ``t_{i+1/2}``, ``z_second[i]`` and
    ``z_first[i]`` solve the transposed second and first half-step systems
    of step ``i -> i + 1``.
    """

    correctors: np.ndarray
    predictors: np.ndarray
    z_second: np.ndarray
    z_first: np.ndarray

    @property
    def nt(self) -> int:
        return self.correctors.shape[0]


class _GroupAssembler:
    """Evaluates one term group (X or Y) and assembles its sparse Jacobian."""

    def __init__(self, terms, coriolis_block, f, ops, n):
        self.terms = terms
        self.cor = coriolis_block  # (eq, var, sign)
        self.f = f
        self.ops = ops
        self.n = n
        rows, cols = [], []
        self._stencil_slices = []
        ar = np.arange(n)
        pos = 0
        for t in terms:
            D = ops.d(t.direction).tocoo()
            rows.append(t.eq * n + ar)
            cols.append(t.first * n + ar)
            rows.append(t.eq * n + D.row)
            cols.append(t.deriv * n + D.col)
            self._stencil_slices.append((D.row, D.data))
            pos += n + D.nnz
        eq, var, _ = coriolis_block
        rows.append(eq * n + ar)
        cols.append(var * n + ar)
        self.rows = np.concatenate(rows)
        self.cols = np.concatenate(cols)

    def evaluate(self, w):
        n = self.n
        b = (w[:n], w[n:2 * n], w[2 * n:])
        out = np.zeros(3 * n)
        derivs = {}
        for t in self.terms:
            key = (t.deriv, t.direction)
            if key not in derivs:
                derivs[key] = self.ops.d(t.direction) @ b[t.deriv]
            out[t.eq * n:(t.eq + 1) * n] += t.coef * b[t.first] * derivs[key]
        eq, var, sign = self.cor
        out[eq * n:(eq + 1) * n] += sign * self.f * b[var]
        return out

    def jacobian_values(self, w):
        n = self.n
        b = (w[:n], w[n:2 * n], w[2 * n:])
        vals = []
        for t, (drow, ddata) in zip(self.terms, self._stencil_slices):
            vals.append(t.coef * (self.ops.d(t.direction) @ b[t.deriv]))
            vals.append(t.coef * b[t.first][drow] * ddata)
        vals.append(self.cor[2] * self.f)
        return np.concatenate(vals)


class AdiScheme:
    """Two-step ADI time stepping shared by the full and reduced models.

    Subclasses provide ``cfg``, the residuals ``residual1``/``residual2``,
    their Jacobians ``jac1_new``, ``jac1_old``, ``jac2_new``, ``jac2_old``,
    ``factor`` (returns an object with ``solve``/``solve_transpose``) and
    ``operator`` (prepares an explicit Jacobian for matvecs).
    """

    def factor(self, a):
        return _DenseJacobian(a)

    def operator(self, a):
        return np.asarray(a)

    # time stepping --------------------------------------------------------
    def step_pair(self, w_n):
        """Advance one full step; returns ``(w_half, w_next, iterations)``."""
        cfg = self.cfg
        jac1 = self.factor(self.jac1_new(w_n))
        r1 = quasi_newton_solve(lambda w: self.residual1(w, w_n), jac1, w_n,
                                cfg.newton_tol, cfg.newton_max_iter)
        w_half = r1.w
        jac2 = self.factor(self.jac2_new(w_half))
        r2 = quasi_newton_solve(lambda w: self.residual2(w, w_half), jac2, w_half,
                                cfg.newton_tol, cfg.newton_max_iter)
        return w_half, r2.w, (r1.iterations, r2.iterations)

    def forward(self, w0) -> Trajectory:
        w0 = _as_flat(w0)
        nt = self.cfg.nt
        corr = np.empty((nt, w0.size))
        pred = np.empty((nt - 1, w0.size))
        corr[0] = w0
        its = []
        for i in range(nt - 1):
            try:
                pred[i], corr[i + 1], it = self.step_pair(corr[i])
            except NonConvergence as exc:
                exc.step = i
                raise
            its.append(it)
        return Trajectory(corr, pred, its)

    def linearize(self, traj: Trajectory) -> "Linearization":
        return Linearization(self, traj)


class SweModel(AdiScheme):
    """Full-order ADI shallow water model on a fixed grid and time step."""

    def __init__(self, grid: Grid, constants: PhysicalConstants, cfg: AdiConfig):
        self.grid = grid
        self.constants = constants
        self.cfg = cfg
        self.ops = build_difference_operators(grid)
        self.f = coriolis_field(grid, constants)
        n = grid.n
        self.n = n
        self.tau = 0.5 * cfg.dt
        active = grid.active_mask()
        self.mask = np.tile(active.astype(float), 3)
        self.boundary = boundary_operator(grid)
        self.space = active_space(grid, self.ops, self.f)
        self.X = _GroupAssembler(X_GROUP, (1, 0, 1.0), self.f, self.ops, n)
        self.Y = _GroupAssembler(Y_GROUP, (0, 1, -1.0), self.f, self.ops, n)
        B = self.boundary.tocoo()
        ar = np.arange(3 * n)
        self._diag_rows = ar
        self._b_rows, self._b_cols, self._b_vals = B.row, B.col, B.data

    # residuals -----------------------------------------------------------
    def residual1(self, w_half, w_n):
        t = self.tau
        return self.mask * (w_half - w_n + t * (self.X.evaluate(w_half) + self.Y.evaluate(w_n))) + self.boundary @ w_half

    def residual2(self, w_next, w_half):
        t = self.tau
        return self.mask * (w_next - w_half + t * (self.Y.evaluate(w_next) + self.X.evaluate(w_half))) + self.boundary @ w_next

    # Jacobians -----------------------------------------------------------
    def _assemble(self, group, w, sign, with_boundary):
        """``m * (sign * I + tau * J_group(w)) [+ B]`` as a CSC matrix."""
        n3 = 3 * self.n
        gv = group.jacobian_values(w)
        m = self.mask
        rows = [self._diag_rows, group.rows]
        cols = [self._diag_rows, group.cols]
        vals = [sign * m, self.tau * m[group.rows] * gv]
        if with_boundary:
            rows.append(self._b_rows)
            cols.append(self._b_cols)
            vals.append(self._b_vals)
        return sp.csc_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n3, n3)
        )

    def jac1_new(self, w_half):
        """d g1 / d w_half evaluated at ``w_half``."""
        return self._assemble(self.X, w_half, 1.0, True)

    def jac1_old(self, w_n):
        """d g1 / d w_N evaluated at ``w_N``."""
        return self._old(self.Y, w_n)

    def jac2_new(self, w_next):
        return self._assemble(self.Y, w_next, 1.0, True)

    def jac2_old(self, w_half):
        return self._old(self.X, w_half)

    def _old(self, group, w):
        # d/dw_old of m * (-w_old + tau * G(w_old)) = m * (-I + tau * J_G)
        return self._assemble(group, w, -1.0, False)

    def factor(self, a):
        return FrozenJacobian(a, self.cfg)

    def operator(self, a):
        return a.tocsr()


class Linearization:
    """Tangent linear and adjoint operators along a stored trajectory.

    The Jacobians are evaluated at the converged predictor/corrector states,
    so the TLM is the exact derivative of the discrete forward map.
    """

    def __init__(self, model: AdiScheme, traj: Trajectory):
        self.model = model
        self.traj = traj
        self._cache = {}

    def step_operators(self, i):
        """``(J1n, J1o, J2n, J2o)`` for step ``i -> i + 1``."""
        if i not in self._cache:
            m = self.model
            wn, wh, wnext = self.traj.correctors[i], self.traj.predictors[i], self.traj.correctors[i + 1]
            self._cache[i] = (
                m.factor(m.jac1_new(wh)),
                m.operator(m.jac1_old(wn)),
                m.factor(m.jac2_new(wnext)),
                m.operator(m.jac2_old(wh)),
            )
        return self._cache[i]

    def tlm_step(self, i, dw):
        j1n, j1o, j2n, j2o = self.step_operators(i)
        dh = j1n.solve(-(j1o @ dw))
        dnext = j2n.solve(-(j2o @ dh))
        return dh, dnext

    def adjoint_step(self, i, lam_next):
        """Returns ``(lambda_N, lambda_half, z_second, z_first)``."""
        j1n, j1o, j2n, j2o = self.step_operators(i)
        z2 = j2n.solve_transpose(lam_next)
        lam_half = -(j2o.T @ z2)
        z1 = j1n.solve_transpose(lam_half)
        lam_n = -(j1o.T @ z1)
        return lam_n, lam_half, z2, z1

    def tlm(self, dw0):
        """Corrector increments at every time level."""
        nt = self.traj.nt
        out = np.empty((nt, np.size(dw0)))
        out[0] = dw0
        for i in range(nt - 1):
            out[i + 1] = self.tlm_step(i, out[i])[1]
        return out

    def adjoint(self, forcing) -> AdjointTrajectory:
        """Backward sweep ``lambda_i = M_i^T lambda_{i+1} + forcing_i``."""
        forcing = np.asarray(forcing)
        nt = self.traj.nt
        size = forcing.shape[1]
        corr = np.empty((nt, size))
        pred = np.empty((nt - 1, size))
        z2s = np.empty((nt - 1, size))
        z1s = np.empty((nt - 1, size))
        corr[-1] = forcing[-1]
        for i in range(nt - 2, -1, -1):
            lam_n, pred[i], z2s[i], z1s[i] = self.adjoint_step(i, corr[i + 1])
            corr[i] = lam_n + forcing[i]
        return AdjointTrajectory(corr, pred, z2s, z1s)


def _as_flat(w):
    return w.flat if isinstance(w, StateVector) else np.asarray(w, dtype=float)


def forward_trajectory(w0, model: SweModel) -> Trajectory:
    return model.forward(w0)
