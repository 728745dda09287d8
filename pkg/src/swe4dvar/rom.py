"""Reduced-order shallow water models: standard POD, tensorial POD and POD/DEIM.

Bases live on the active rows (see :class:`~swe4dvar.swe.ActiveSpace`); a
reduced state ``x`` lifts to the boundary-consistent full state
``E U_f x`` with ``U_f = blockdiag(U, V, Phi)``.  The reduced model is the
Galerkin projection of the active-row ADI residuals::

    g1~(x_half, x_N) = M (x_half - x_N) + tau (X~(x_half) + Y~(x_N))

with ``M = U_f^T U_f`` (the identity for orthonormal bases).  Only the
evaluation of the quadratic terms inside ``X~`` and ``Y~`` differs between
variants.
"""

from __future__ import annotations

import enum
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .adi import AdiScheme, SweModel, Trajectory
from .pod import PodBases
from .swe import TERM_BY_NAME, TERM_NAMES, TERMS, X_GROUP, Y_GROUP, DiffOperators, eval_nonlinear_terms

log = logging.getLogger(__name__)

__all__ = [
    "RomVariant",
    "RomTensors",
    "DeimTerm",
    "DeimOperators",
    "ReducedModel",
    "HYBRID_TENSORIAL_TERMS",
    "precompute_tensors",
    "deim_select_points",
    "collect_nonlinear_snapshots",
    "build_deim_operators",
    "deim_term_names",
    "reduced_nonlinear_eval",
    "save_rom",
    "load_rom",
]

# height-involving terms that lose accuracy under DEIM
HYBRID_TENSORIAL_TERMS = ("F12", "F23", "F31", "F33")


def deim_term_names(variant, hybrid_terms=HYBRID_TENSORIAL_TERMS) -> tuple:
    """Terms that ``variant`` approximates with DEIM."""
    variant = RomVariant(variant)
    if variant is RomVariant.POD_DEIM:
        return TERM_NAMES
    if variant is RomVariant.HYBRID_POD_DEIM:
        return tuple(t for t in TERM_NAMES if t not in hybrid_terms)
    return ()


class RomVariant(enum.Enum):
    STANDARD_POD = "standard"
    TENSORIAL_POD = "tensorial"
    POD_DEIM = "deim"
    HYBRID_POD_DEIM = "hybrid"

    @property
    def needs_tensors(self) -> bool:
        return self in (RomVariant.TENSORIAL_POD, RomVariant.HYBRID_POD_DEIM)

    @property
    def needs_deim(self) -> bool:
        return self in (RomVariant.POD_DEIM, RomVariant.HYBRID_POD_DEIM)


@dataclass
class RomTensors:
    """Rank-3 tensors ``T[i, j, l] = sum_r W_eq[r, i] B_first[r, j] D_deriv[r, l]``."""

    tensors: dict
    provenance: str = "exact"

    def __post_init__(self):
        for name, T in self.tensors.items():
            if T.ndim != 3 or not np.all(np.isfinite(T)):
                raise ValueError(f"tensor {name} must be a finite rank-3 array")

    def __getitem__(self, name):
        return self.tensors[name]


def _test_basis(bases: PodBases, var, row_weights):
    B = bases.modes[var]
    return B if row_weights is None else B * np.asarray(row_weights)[:, None]


def _triple_product(W, B, D):
    n, ke = W.shape
    kf, kd = B.shape[1], D.shape[1]
    A = (W[:, :, None] * B[:, None, :]).reshape(n, ke * kf)
    return (A.T @ D).reshape(ke, kf, kd)


def precompute_tensors(bases: PodBases, row_weights=None, terms=TERM_NAMES) -> RomTensors:
    """Exact tensors for ``terms`` (summation over every grid row).

    ``row_weights`` optionally scales the Galerkin test basis (for example a
    row mask); bases on active rows need none.
    """
    out = {}
    for name in terms:
        t = TERM_BY_NAME[name]
        W = _test_basis(bases, t.eq, row_weights)
        out[name] = _triple_product(W, bases.modes[t.first], bases.deriv(t.deriv, t.direction))
    return RomTensors(out, "exact")


def deim_select_points(V, candidates=None):
    """Greedy DEIM interpolation indices for the columns of ``V``.

    ``candidates`` optionally restricts the admissible rows (boolean mask or
    index array).  Raises ``LinAlgError`` when the columns are numerically
    dependent on the already selected points.
    """
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if V.ndim != 2:
        raise ValueError("DEIM basis must be 2-D")
    n, m = V.shape
    allowed = np.ones(n, bool)
    if candidates is not None:
        c = np.asarray(candidates)
        allowed = c.astype(bool) if c.dtype == bool else np.isin(np.arange(n), c)
    if m > allowed.sum():
        raise ValueError(f"{m} DEIM points requested but only {allowed.sum()} rows admissible")
    penalty = np.where(allowed, 0.0, -np.inf)
    tol = 1e3 * np.finfo(float).eps
    pts = []
    for l in range(m):
        col = V[:, l]
        if l == 0:
            r = col
        else:
            c = np.linalg.solve(V[pts, :l], col[pts])
            r = col - V[:, :l] @ c
        score = np.abs(r) + penalty
        p = int(np.argmax(score))
        if not score[p] > tol * max(1.0, np.linalg.norm(col)):
            raise np.linalg.LinAlgError(f"DEIM basis rank-deficient at column {l}")
        pts.append(p)
    return np.array(pts, dtype=np.int64)


def collect_nonlinear_snapshots(traj: Trajectory, ops: DiffOperators, rows=None, terms=TERM_NAMES) -> dict:
    """Per-term snapshot matrices from predictor and corrector states.

    ``rows`` optionally restricts the matrices to a subset of grid rows
    (the active rows for reduced models).
    """
    states = np.vstack([traj.correctors, traj.predictors])
    cols = {name: [] for name in terms}
    for w in states:
        vals = eval_nonlinear_terms(w, ops)
        for name in terms:
            cols[name].append(vals[name] if rows is None else vals[name][rows])
    return {name: np.column_stack(c) for name, c in cols.items()}


@dataclass
class DeimTerm:
    points: np.ndarray  # (m,)
    E: np.ndarray  # (k_eq, m)
    sampled_first: np.ndarray  # (m, k_first)
    sampled_deriv: np.ndarray  # (m, k_deriv)
    V: np.ndarray  # (n, m)
    cond: float

    @property
    def m(self) -> int:
        return self.points.size

    def tensor(self):
        """DEIM tensor ``sum_r E[i, r] Bm[r, j] Dm[r, l]`` over the DEIM points."""
        return _triple_product(self.E.T, self.sampled_first, self.sampled_deriv)


@dataclass
class DeimOperators:
    terms: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.terms[name]

    def tensors(self) -> RomTensors:
        return RomTensors({k: t.tensor() for k, t in self.terms.items()}, "deim-approximated")


def build_deim_operators(bases: PodBases, nl_snapshots: dict, m, active=None,
                         row_weights=None, terms=TERM_NAMES) -> DeimOperators:
    """DEIM machinery for each term in ``terms``.

    The nonlinear-term basis is built from snapshot rows in ``active``
    (boundary rows are excluded as interpolation candidates), so ``m`` is
    capped by both the snapshot count and the number of active rows.
    """
    m = int(m)
    if m < 1:
        raise ValueError("DEIM needs at least one point")
    out = {}
    for name in terms:
        t = TERM_BY_NAME[name]
        S = np.asarray(nl_snapshots[name], dtype=float)
        n, s = S.shape
        rows = np.arange(n) if active is None else np.flatnonzero(active)
        cap = min(s, rows.size)
        if m > cap:
            raise ValueError(f"m={m} exceeds the DEIM cap {cap} for {name}")
        Ua, _, _ = np.linalg.svd(S[rows], full_matrices=False)
        V = np.zeros((n, m))
        V[rows] = Ua[:, :m]
        pts = deim_select_points(V, rows)
        PV = V[pts]
        cond = float(np.linalg.cond(PV))
        if not np.isfinite(cond):
            raise np.linalg.LinAlgError(f"singular DEIM matrix for {name}")
        log.debug("DEIM %s: m=%d cond(P^T V)=%.3e", name, m, cond)
        W = _test_basis(bases, t.eq, row_weights)
        E = np.linalg.solve(PV.T, (W.T @ V).T).T
        out[name] = DeimTerm(
            pts, E,
            bases.modes[t.first][pts].copy(),
            bases.deriv(t.deriv, t.direction)[pts].copy(),
            V, cond,
        )
    return DeimOperators(out)


class _ReducedGroup:
    """Reduced X or Y term group: linear part plus quadratic terms."""

    def __init__(self, K, linear, tensor_terms=(), deim_terms=(), full=None):
        self.K = K
        self.linear = linear
        # (eq, first, deriv, T2, Tt2, (ke, kf)): tensors flattened to 2-D for BLAS
        self.tensor_terms = []
        for eq, fi, de, T in tensor_terms:
            ke, kf, kd = T.shape
            self.tensor_terms.append((
                eq, fi, de,
                np.ascontiguousarray(T.reshape(ke * kf, kd)),
                np.ascontiguousarray(T.transpose(0, 2, 1).reshape(ke * kd, kf)),
                (ke, kf),
            ))
        # (eq, first, deriv, E, S1, S2) per DEIM term, blocks kept small
        self.deim_terms = list(deim_terms)
        self.full = full  # (assembler, Uf, Wf) for standard POD

    def evaluate(self, x):
        out = self.linear @ x
        for eq, fi, de, T2, _, shape in self.tensor_terms:
            out[eq] += (T2 @ x[de]).reshape(shape) @ x[fi]
        for eq, fi, de, E, S1, S2 in self.deim_terms:
            out[eq] += E @ ((S1 @ x[fi]) * (S2 @ x[de]))
        if self.full is not None:
            asm, Uf, Wf = self.full
            out += Wf.T @ asm.evaluate(Uf @ x)
        return out

    def jacobian(self, x):
        J = self.linear.copy()
        for eq, fi, de, T2, Tt2, shape in self.tensor_terms:
            J[eq, fi] += (T2 @ x[de]).reshape(shape)
            J[eq, de] += (Tt2 @ x[fi]).reshape(shape[0], -1)
        for eq, fi, de, E, S1, S2 in self.deim_terms:
            J[eq, fi] += (E * (S2 @ x[de])) @ S1
            J[eq, de] += (E * (S1 @ x[fi])) @ S2
        if self.full is not None:
            asm, Uf, Wf = self.full
            n3 = Uf.shape[0]
            Jf = sp.csr_matrix((asm.jacobian_values(Uf @ x), (asm.rows, asm.cols)), shape=(n3, n3))
            J += Wf.T @ (Jf @ Uf)
        return J


class ReducedModel(AdiScheme):
    """Galerkin-projected ADI model in the coordinates of active-row ``bases``."""

    def __init__(self, model: SweModel, bases: PodBases, variant=RomVariant.TENSORIAL_POD,
                 tensors: RomTensors | None = None, deim: DeimOperators | None = None,
                 hybrid_terms=HYBRID_TENSORIAL_TERMS, projection="galerkin"):
        if projection != "galerkin":
            raise ValueError(
                "only Galerkin projection is supported; Petrov-Galerkin reduced models are unstable here"
            )
        variant = RomVariant(variant)
        space = model.space
        self.model = model
        self.space = space
        self.bases = bases
        self.variant = variant
        self.cfg = model.cfg
        self.tau = model.tau
        n = model.n
        if bases.n != space.n_act:
            raise ValueError(f"bases have {bases.n} rows, the model has {space.n_act} active rows")
        offs = np.cumsum((0,) + bases.k)
        self.K = int(offs[-1])
        self.slices = tuple(slice(int(offs[i]), int(offs[i + 1])) for i in range(3))

        if variant is RomVariant.HYBRID_POD_DEIM:
            tensor_names = tuple(hybrid_terms)
        elif variant is RomVariant.TENSORIAL_POD:
            tensor_names = TERM_NAMES
        else:
            tensor_names = ()
        deim_names = tuple(t for t in TERM_NAMES if t not in tensor_names) if variant.needs_deim else ()
        if tensor_names and tensors is None:
            tensors = precompute_tensors(bases, terms=tensor_names)
        if deim_names:
            if deim is None:
                raise ValueError(f"variant {variant.value} needs DEIM operators")
            missing = [t for t in deim_names if t not in deim.terms]
            if missing:
                raise ValueError(f"DEIM operators missing for {missing}")
        self.tensors = tensors
        self.deim = deim
        self.tensor_names = tensor_names
        self.deim_names = deim_names

        # lifted (boundary-consistent) trial basis and its active-row test basis
        Uf = np.zeros((3 * n, self.K))
        for v in range(3):
            Uf[v * n:(v + 1) * n, self.slices[v]] = space.E[v] @ bases.modes[v]
        self.Uf = Uf
        Wf = model.mask[:, None] * Uf
        self.M = np.zeros((self.K, self.K))
        for v in range(3):
            self.M[self.slices[v], self.slices[v]] = bases.modes[v].T @ bases.modes[v]
        f = space.f[:, None]
        CX = np.zeros((self.K, self.K))
        CY = np.zeros((self.K, self.K))
        CX[self.slices[1], self.slices[0]] = bases.modes[1].T @ (f * bases.modes[0])
        CY[self.slices[0], self.slices[1]] = -(bases.modes[0].T @ (f * bases.modes[1]))
        self._memo = {}
        self._jmemo = {}
        self.X = self._group(X_GROUP, CX, model.X, Uf, Wf)
        self.Y = self._group(Y_GROUP, CY, model.Y, Uf, Wf)

    def _group(self, terms, coriolis, assembler, Uf, Wf):
        if self.variant is RomVariant.STANDARD_POD:
            return _ReducedGroup(self.K, np.zeros((self.K, self.K)), full=(assembler, Uf, Wf))
        sl = self.slices
        tt, dt = [], []
        for t in terms:
            if t.name in self.tensor_names:
                T = t.coef * self.tensors[t.name]
                tt.append((sl[t.eq], sl[t.first], sl[t.deriv], T))
            else:
                d = self.deim[t.name]
                dt.append((sl[t.eq], sl[t.first], sl[t.deriv], t.coef * d.E,
                           np.ascontiguousarray(d.sampled_first), np.ascontiguousarray(d.sampled_deriv)))
        return _ReducedGroup(self.K, coriolis, tt, dt)

    # coordinates ------------------------------------------------------------
    def project(self, w):
        """Reduced coordinates of full states: ``U_f^T S w``."""
        a = self.space.restrict(w)
        na = self.space.n_act
        return np.concatenate(
            [a[..., v * na:(v + 1) * na] @ self.bases.modes[v] for v in range(3)], axis=-1
        )

    def lift(self, x):
        """Boundary-consistent full states ``E U_f x``."""
        return np.asarray(x, dtype=float) @ self.Uf.T

    def lift_transpose(self, w):
        """``(E U_f)^T w``: reduced image of full-space sensitivities."""
        return np.asarray(w, dtype=float) @ self.Uf

    def lift_active(self, x):
        """Active-row values ``U_f x``."""
        x = np.asarray(x, dtype=float)
        return np.concatenate([x[..., self.slices[v]] @ self.bases.modes[v].T for v in range(3)], axis=-1)

    # residuals and Jacobians -------------------------------------------------
    def _eval(self, group, x):
        # the old-level term is constant across quasi-Newton iterations and
        # the converged new-level term is reused by the next half step
        key = (id(group), x.tobytes())
        val = self._memo.get(key)
        if val is None:
            if len(self._memo) >= 8:
                self._memo.clear()
            val = self._memo[key] = group.evaluate(x)
        return val

    def _jac(self, group, x):
        # the adjoint sweep needs each group Jacobian at each state twice
        key = (id(group), x.tobytes())
        val = self._jmemo.get(key)
        if val is None:
            if len(self._jmemo) >= 8:
                self._jmemo.clear()
            val = self._jmemo[key] = group.jacobian(x)
        return val

    def residual1(self, x_half, x_n):
        return self.M @ (x_half - x_n) + self.tau * (self._eval(self.X, x_half) + self._eval(self.Y, x_n))

    def residual2(self, x_next, x_half):
        return self.M @ (x_next - x_half) + self.tau * (self._eval(self.Y, x_next) + self._eval(self.X, x_half))

    def jac1_new(self, x_half):
        return self.M + self.tau * self._jac(self.X, x_half)

    def jac1_old(self, x_n):
        return -self.M + self.tau * self._jac(self.Y, x_n)

    def jac2_new(self, x_next):
        return self.M + self.tau * self._jac(self.Y, x_next)

    def jac2_old(self, x_half):
        return -self.M + self.tau * self._jac(self.X, x_half)

    def nonlinear_terms(self, x) -> dict:
        return reduced_nonlinear_eval(self, x)


def reduced_nonlinear_eval(rom: ReducedModel, x) -> dict:
    """The ten reduced term vectors (each of length ``k_eq``) at ``x``."""
    x = np.asarray(x, dtype=float)
    sl = rom.slices
    out = {}
    full_vals = None
    for t in TERMS:
        if rom.variant is RomVariant.STANDARD_POD:
            if full_vals is None:
                full_vals = eval_nonlinear_terms(rom.lift(x), rom.model.ops)
            out[t.name] = rom.bases.modes[t.eq].T @ full_vals[t.name][rom.space.idx]
        elif t.name in rom.tensor_names:
            out[t.name] = t.coef * ((rom.tensors[t.name] @ x[sl[t.deriv]]) @ x[sl[t.first]])
        else:
            d = rom.deim[t.name]
            out[t.name] = t.coef * (d.E @ ((d.sampled_first @ x[sl[t.first]]) * (d.sampled_deriv @ x[sl[t.deriv]])))
    return out


# persistence ------------------------------------------------------------------
_ROMT_MAGIC = b"ROMT"
_ROMT_VERSION = 1


def _records(tensors: RomTensors | None, deim: DeimOperators | None):
    rec = {}
    if tensors is not None:
        rec["meta/provenance/" + tensors.provenance] = np.zeros(0, dtype=np.uint64)
        for k, T in tensors.tensors.items():
            rec[f"tensor/{k}"] = T
    if deim is not None:
        for k, d in deim.terms.items():
            rec[f"deim/{k}/points"] = d.points.astype(np.uint64)
            rec[f"deim/{k}/E"] = d.E
            rec[f"deim/{k}/first"] = d.sampled_first
            rec[f"deim/{k}/deriv"] = d.sampled_deriv
            rec[f"deim/{k}/V"] = d.V
            rec[f"deim/{k}/cond"] = np.array([d.cond])
    return rec


def save_rom(path, tensors: RomTensors | None = None, deim: DeimOperators | None = None):
    """Write tensors and DEIM operators: ``ROMT`` | u32 version | u32 count | records.

    Each record is u16 name length | name | u8 kind (0 float64, 1 uint64) |
    u32 ndim | u64 dims | row-major little-endian data.
    """
    rec = _records(tensors, deim)
    with open(path, "wb") as fh:
        fh.write(_ROMT_MAGIC)
        fh.write(struct.pack("<II", _ROMT_VERSION, len(rec)))
        for name, arr in rec.items():
            kind = 1 if arr.dtype == np.uint64 else 0
            arr = np.ascontiguousarray(arr, dtype="<u8" if kind else "<f8")
            b = name.encode("ascii")
            fh.write(struct.pack("<H", len(b)) + b)
            fh.write(struct.pack("<BI", kind, arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(arr.tobytes())


def load_rom(path):
    """Inverse of :func:`save_rom`; returns ``(RomTensors or None, DeimOperators or None)``."""
    raw = Path(path).read_bytes()
    if raw[:4] != _ROMT_MAGIC:
        raise ValueError(f"{path}: not a reduced-model file")
    version, count = struct.unpack_from("<II", raw, 4)
    if version != _ROMT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    pos = 12
    rec = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + ln].decode("ascii")
            pos += ln
            kind, ndim = struct.unpack_from("<BI", raw, pos)
            pos += 5
            shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
            pos += 8 * ndim
            cnt = int(np.prod(shape, dtype=np.int64))
            dt = "<u8" if kind == 1 else "<f8"
            if pos + 8 * cnt > len(raw):
                raise ValueError("truncated record")
            rec[name] = np.frombuffer(raw, dtype=dt, count=cnt, offset=pos).reshape(shape).copy()
            pos += 8 * cnt
    except struct.error as exc:
        raise ValueError(f"{path}: truncated reduced-model file") from exc
    if pos != len(raw):
        raise ValueError(f"{path}: trailing bytes in reduced-model file")
    tensors = None
    tens = {k.split("/", 1)[1]: v for k, v in rec.items() if k.startswith("tensor/")}
    if tens:
        prov = next((k.rsplit("/", 1)[1] for k in rec if k.startswith("meta/provenance/")), "exact")
        tensors = RomTensors(tens, prov)
    names = sorted({k.split("/")[1] for k in rec if k.startswith("deim/")})
    deim = None
    if names:
        deim = DeimOperators({
            nm: DeimTerm(
                rec[f"deim/{nm}/points"].astype(np.int64), rec[f"deim/{nm}/E"],
                rec[f"deim/{nm}/first"], rec[f"deim/{nm}/deriv"], rec[f"deim/{nm}/V"],
                float(rec[f"deim/{nm}/cond"][0]),
            )
            for nm in names
        })
    return tensors, deim
