"""Spatial discretization of the 2D shallow water equations on a beta-plane.

State vectors are stored flat as ``[u | v | phi]`` with each block of length
``n = nx * ny``.  Grid points are flattened x-major: ``index = j * nx + i``.

Boundary treatment
------------------
The x direction is periodic with period ``L``: column ``i = nx - 1`` duplicates
column ``i = 0``.  Rows on the perimeter (the duplicate column and the two
y-boundaries) carry linear boundary equations instead of the ADI equations:

* periodic copy ``w[nx-1, j] = w[0, j]`` for all variables,
* first-order Neumann ``u[i, 0] = u[i, 1]`` (same for ``phi``) at ``y = 0, D``,
* Dirichlet ``v = 0`` at ``y = 0, D``.

The remaining rows are *active*; the nonlinear terms only enter the model on
active rows.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Grid",
    "PhysicalConstants",
    "StateVector",
    "DiffOperators",
    "NonlinearTerms",
    "TermSpec",
    "TERMS",
    "X_GROUP",
    "Y_GROUP",
    "build_grid",
    "build_difference_operators",
    "coriolis_field",
    "grammeltvedt_height",
    "grammeltvedt_initial_state",
    "eval_nonlinear_terms",
    "boundary_operator",
    "ActiveSpace",
    "active_space",
]


@dataclass(frozen=True)
class PhysicalConstants:
    g: float = 10.0
    f_hat: float = 1.0e-4
    beta: float = 1.5e-11
    H0: float = 2000.0
    H1: float = 220.0
    H2: float = 133.0

    def __post_init__(self):
        vals = (self.g, self.f_hat, self.beta, self.H0, self.H1, self.H2)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("physical constants must be finite")
        if self.g <= 0:
            raise ValueError("gravity must be positive")


@dataclass(frozen=True)
class Grid:
    nx: int
    ny: int
    length: float = 6.0e6
    width: float = 4.4e6

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise ValueError(f"grid needs at least 3x3 points, got {self.nx}x{self.ny}")
        if not (self.length > 0 and self.width > 0):
            raise ValueError("domain extents must be positive")

    @property
    def n(self) -> int:
        return self.nx * self.ny

    @property
    def dx(self) -> float:
        return self.length / (self.nx - 1)

    @property
    def dy(self) -> float:
        return self.width / (self.ny - 1)

    def index(self, i, j):
        return j * self.nx + i

    def coords(self, index):
        j, i = divmod(index, self.nx)
        return i, j

    @property
    def x(self) -> np.ndarray:
        return np.tile(np.arange(self.nx) * self.dx, self.ny)

    @property
    def y(self) -> np.ndarray:
        return np.repeat(np.arange(self.ny) * self.dy, self.nx)

    def active_mask(self) -> np.ndarray:
        """Boolean mask (length n) of rows governed by the ADI equations."""
        i = np.tile(np.arange(self.nx), self.ny)
        j = np.repeat(np.arange(self.ny), self.nx)
        return (i < self.nx - 1) & (j > 0) & (j < self.ny - 1)


def build_grid(nx, ny, constants=None, length=6.0e6, width=4.4e6) -> Grid:
    # constants are accepted for signature symmetry with the other builders
    del constants
    return Grid(int(nx), int(ny), float(length), float(width))


@dataclass(frozen=True)
class StateVector:
    u: np.ndarray
    v: np.ndarray
    phi: np.ndarray

    def __post_init__(self):
        for name in ("u", "v", "phi"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if not (self.u.shape == self.v.shape == self.phi.shape and self.u.ndim == 1):
            raise ValueError("u, v, phi must be 1-D arrays of equal length")

    @property
    def n(self) -> int:
        return self.u.size

    @property
    def flat(self) -> np.ndarray:
        return np.concatenate([self.u, self.v, self.phi])

    @classmethod
    def from_flat(cls, w) -> "StateVector":
        w = np.asarray(w, dtype=float)
        n = w.size // 3
        if 3 * n != w.size:
            raise ValueError("flat state length must be a multiple of 3")
        return cls(w[:n].copy(), w[n:2 * n].copy(), w[2 * n:].copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat)))


@dataclass(frozen=True)
class DiffOperators:
    Ax: sp.csr_matrix
    Ay: sp.csr_matrix

    def d(self, direction: str) -> sp.csr_matrix:
        return self.Ax if direction == "x" else self.Ay

    def for_var(self, var: int, direction: str) -> sp.csr_matrix:
        del var
        return self.d(direction)


def build_difference_operators(grid: Grid) -> DiffOperators:
    """Second-order centred first derivatives.

    ``Ax`` wraps periodically with period ``L`` (neighbours of the seam column
    are ``1`` and ``nx - 2``).  ``Ay`` uses first-order one-sided differences
    on the two y-boundary rows.
    """
    nx, ny, n = grid.nx, grid.ny, grid.n
    ii = np.tile(np.arange(nx), ny)
    jj = np.repeat(np.arange(ny), nx)
    rows = np.arange(n)

    right = np.where(ii < nx - 1, ii + 1, 1)
    left = np.where(ii > 0, ii - 1, nx - 2)
    cx = 0.5 / grid.dx
    Ax = sp.csr_matrix(
        (np.r_[np.full(n, cx), np.full(n, -cx)],
         (np.r_[rows, rows], np.r_[jj * nx + right, jj * nx + left])),
        shape=(n, n),
    )

    dy = grid.dy
    interior = (jj > 0) & (jj < ny - 1)
    bottom = jj == 0
    top = jj == ny - 1
    r = np.r_[rows[interior], rows[interior], rows[bottom], rows[bottom], rows[top], rows[top]]
    c = np.r_[
        rows[interior] + nx, rows[interior] - nx,
        rows[bottom] + nx, rows[bottom],
        rows[top], rows[top] - nx,
    ]
    vals = np.r_[
        np.full(interior.sum(), 0.5 / dy), np.full(interior.sum(), -0.5 / dy),
        np.full(bottom.sum(), 1.0 / dy), np.full(bottom.sum(), -1.0 / dy),
        np.full(top.sum(), 1.0 / dy), np.full(top.sum(), -1.0 / dy),
    ]
    Ay = sp.csr_matrix((vals, (r, c)), shape=(n, n))
    return DiffOperators(Ax, Ay)


def coriolis_field(grid: Grid, constants: PhysicalConstants) -> np.ndarray:
    return constants.f_hat + constants.beta * (grid.y - grid.width / 2)


def grammeltvedt_height(grid: Grid, constants: PhysicalConstants) -> np.ndarray:
    s = 9.0 * (grid.width / 2 - grid.y) / (2.0 * grid.width)
    return (
        constants.H0
        + constants.H1 * np.tanh(s)
        + constants.H2 / np.cosh(s) ** 2 * np.sin(2 * np.pi * grid.x / grid.length)
    )


def grammeltvedt_initial_state(grid: Grid, constants: PhysicalConstants,
                               ops: DiffOperators | None = None) -> StateVector:
    """Height profile No. 1 of Grammeltvedt with geostrophic winds."""
    ops = ops or build_difference_operators(grid)
    h = grammeltvedt_height(grid, constants)
    if np.any(h <= 0):
        raise ValueError("non-positive fluid depth in initial height field")
    f = coriolis_field(grid, constants)
    if np.any(f == 0):
        raise ValueError("Coriolis parameter vanishes; geostrophic winds undefined")
    u = -(constants.g / f) * (ops.Ay @ h)
    v = (constants.g / f) * (ops.Ax @ h)
    phi = 2.0 * np.sqrt(constants.g * h)
    return StateVector(u, v, phi)


class TermSpec(NamedTuple):
    """One quadratic term ``coef * first ⊙ (D deriv)`` in equation ``eq``.

    Variables are block indices 0 (u), 1 (v), 2 (phi).
    """
    name: str
    eq: int
    first: int
    deriv: int
    direction: str
    coef: float


TERMS = (
    TermSpec("F11", 0, 0, 0, "x", 1.0),
    TermSpec("F12", 0, 2, 2, "x", 0.5),
    TermSpec("F13", 0, 1, 0, "y", 1.0),
    TermSpec("F21", 1, 0, 1, "x", 1.0),
    TermSpec("F22", 1, 1, 1, "y", 1.0),
    TermSpec("F23", 1, 2, 2, "y", 0.5),
    TermSpec("F31", 2, 2, 0, "x", 0.5),
    TermSpec("F32", 2, 0, 2, "x", 1.0),
    TermSpec("F33", 2, 2, 1, "y", 0.5),
    TermSpec("F34", 2, 1, 2, "y", 1.0),
)
TERM_NAMES = tuple(t.name for t in TERMS)
TERM_BY_NAME = {t.name: t for t in TERMS}
# x-direction terms are implicit in the first ADI half step, y-direction in the second
X_GROUP = tuple(t for t in TERMS if t.direction == "x")
Y_GROUP = tuple(t for t in TERMS if t.direction == "y")


@dataclass(frozen=True)
class NonlinearTerms:
    values: dict = field(default_factory=dict)

    def __getattr__(self, name):
        try:
            return self.values[name]
        except KeyError:
            raise AttributeError(name) from None

    def __getitem__(self, name):
        return self.values[name]


def _blocks(w):
    n = w.size // 3
    return w[:n], w[n:2 * n], w[2 * n:]


def eval_nonlinear_terms(w, ops: DiffOperators) -> NonlinearTerms:
    """All ten quadratic terms at state ``w`` (StateVector or flat array)."""
    flat = w.flat if isinstance(w, StateVector) else np.asarray(w, dtype=float)
    blocks = _blocks(flat)
    derivs = {}
    out = {}
    for t in TERMS:
        key = (t.deriv, t.direction)
        if key not in derivs:
            derivs[key] = ops.d(t.direction) @ blocks[t.deriv]
        out[t.name] = t.coef * blocks[t.first] * derivs[key]
    return NonlinearTerms(out)


def boundary_operator(grid: Grid) -> sp.csr_matrix:
    """Sparse ``3n x 3n`` operator whose rows encode the boundary equations.

    Row ``r`` of an inactive point reads ``w[r] - w[source(r)]`` (periodic or
    Neumann copy) or ``w[r]`` (Dirichlet ``v``).  Active rows are empty.
    """
    nx, ny, n = grid.nx, grid.ny, grid.n
    rows, cols, vals = [], [], []
    for block in range(3):
        off = block * n
        for j in range(ny):
            for i in range(nx):
                r = j * nx + i
                if i < nx - 1 and 0 < j < ny - 1:
                    continue
                rows.append(off + r)
                cols.append(off + r)
                vals.append(1.0)
                if block == 1 and j in (0, ny - 1):
                    continue
                if i == nx - 1:
                    src = j * nx
                elif j == 0:
                    src = nx + i
                else:
                    src = (ny - 2) * nx + i
                rows.append(off + r)
                cols.append(off + src)
                vals.append(-1.0)
    return sp.csr_matrix((vals, (rows, cols)), shape=(3 * n, 3 * n))


@dataclass(frozen=True)
class ActiveSpace:
    """Prognostic unknowns restricted to the active rows.

    Boundary values are not independent: ``w = E a`` fills the inactive rows
    from the active values ``a`` so that ``B w = 0``.  ``Ax[v]`` and
    ``Ay[v]`` are the derivative operators of variable ``v`` acting on active
    values, with the boundary conditions folded in (``S A E``).
    """

    grid: Grid
    idx: np.ndarray  # active row indices, length n_act
    E: tuple  # per variable, sparse (n, n_act)
    Ax: tuple  # per variable, sparse (n_act, n_act)
    Ay: tuple
    f: np.ndarray  # Coriolis parameter on active rows

    @property
    def n_act(self) -> int:
        return self.idx.size

    def for_var(self, var: int, direction: str) -> sp.csr_matrix:
        return self.Ax[var] if direction == "x" else self.Ay[var]

    def restrict(self, w):
        """Active values ``S w`` of flat full states (last axis)."""
        w = np.asarray(w, dtype=float)
        n = self.grid.n
        return np.concatenate([w[..., v * n + self.idx] for v in range(3)], axis=-1)

    def extend(self, a):
        """Boundary-consistent full state ``E a``."""
        a = np.asarray(a, dtype=float)
        na = self.n_act
        return np.concatenate(
            [(self.E[v] @ a[..., v * na:(v + 1) * na].T).T for v in range(3)], axis=-1
        )

    def extend_transpose(self, w):
        """``E^T w``: maps full-space sensitivities to active-space ones."""
        w = np.asarray(w, dtype=float)
        n = self.grid.n
        return np.concatenate(
            [(self.E[v].T @ w[..., v * n:(v + 1) * n].T).T for v in range(3)], axis=-1
        )

    def close(self, w):
        """Replace boundary values by the ones implied by the active values."""
        return self.extend(self.restrict(w))


def active_space(grid: Grid, ops: DiffOperators, f) -> ActiveSpace:
    n = grid.n
    mask = grid.active_mask()
    idx = np.flatnonzero(mask)
    bidx = np.flatnonzero(~mask)
    B = boundary_operator(grid).tocsr()
    Es, Axs, Ays = [], [], []
    for v in range(3):
        Bv = B[v * n:(v + 1) * n, v * n:(v + 1) * n]
        Bbb = Bv[bidx][:, bidx].tocsc()
        Bba = Bv[bidx][:, idx]
        # boundary values solve B_bb w_b = -B_ba w_a
        Wb = np.asarray(-spla.spsolve(Bbb, Bba.toarray())).reshape(bidx.size, idx.size)
        br, bc = np.nonzero(Wb)
        E = sp.csr_matrix(
            (np.r_[np.ones(idx.size), Wb[br, bc]], (np.r_[idx, bidx[br]], np.r_[np.arange(idx.size), bc])),
            shape=(n, idx.size),
        )
        Es.append(E)
        Axs.append((ops.Ax[idx] @ E).tocsr())
        Ays.append((ops.Ay[idx] @ E).tocsr())
    return ActiveSpace(grid, idx, tuple(Es), tuple(Axs), tuple(Ays), np.asarray(f)[idx])
