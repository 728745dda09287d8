"""Snapshot assembly, truncated SVD and per-variable POD bases."""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .adi import AdjointTrajectory, Trajectory

__all__ = [
    "BasisStrategy",
    "SnapshotMatrix",
    "PodBases",
    "truncated_svd",
    "assemble_snapshots",
    "build_pod_bases",
    "with_derivatives",
    "projection_error",
    "biorthogonalize",
    "save_basis",
    "load_basis",
]

VARIABLES = ("u", "v", "phi")


class BasisStrategy(enum.Enum):
    """Snapshot selection rule.

    AR uses forward snapshots only; ARRA adds the adjoint trajectory, the
    adjoint intermediate solves and the background-gradient term.
    """

    AR = "AR"
    ARRA = "ARRA"


@dataclass
class SnapshotMatrix:
    data: np.ndarray  # (n, s)
    tags: list = field(default_factory=list)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 2:
            raise ValueError("snapshot matrix must be 2-D")
        if len(self.tags) != self.data.shape[1]:
            raise ValueError("one provenance tag per column required")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("non-finite snapshot entries")

    @property
    def count(self) -> int:
        return self.data.shape[1]


def truncated_svd(S, k, method="svd"):
    """Leading ``k`` left singular vectors and singular values of ``S``.

    ``method="svd"`` runs a thin LAPACK SVD.  ``method="snapshots"`` solves
    the ``s x s`` Gram eigenproblem instead; cheaper for ``s << n`` but only
    accurate for singular values above ``sqrt(eps) * sigma_1``.
    """
    S = np.asarray(S, dtype=float)
    n, s = S.shape
    if not 1 <= k <= min(n, s):
        raise ValueError(f"k={k} outside [1, min(n, s)={min(n, s)}]")
    if method == "snapshots":
        evals, evecs = np.linalg.eigh(S.T @ S)
        order = np.argsort(evals)[::-1][:k]
        sigma = np.sqrt(np.clip(evals[order], 0.0, None))
        U = S @ evecs[:, order]
        nz = sigma > 0
        U[:, nz] /= sigma[nz]
        return U, sigma
    if method != "svd":
        raise ValueError(f"unknown SVD method {method!r}")
    U, sigma, _ = np.linalg.svd(S, full_matrices=False)
    return U[:, :k], sigma[:k]


def _split(w, n):
    return w[..., :n], w[..., n:2 * n], w[..., 2 * n:]


def assemble_snapshots(forward: Trajectory, adjoint: AdjointTrajectory | None = None,
                       background_gradient=None, strategy=BasisStrategy.AR,
                       normalize=False, space=None) -> list:
    """Per-variable snapshot matrices for the requested strategy.

    With an :class:`~swe4dvar.swe.ActiveSpace` the snapshots are expressed in
    active coordinates: states are restricted to the active rows, adjoint
    states and the background gradient (sensitivities) are mapped with
    ``E^T`` and the intermediate multipliers keep their active rows.
    """
    strategy = BasisStrategy(strategy)
    cols, tags = [], []
    state = dual = (lambda a: a)
    if space is not None:
        state, dual = space.restrict, space.extend_transpose

    def add(block, tag, fn):
        block = fn(np.atleast_2d(block))
        cols.append(block)
        tags.extend([tag] * block.shape[0])

    add(forward.correctors, "forward-corrector", state)
    add(forward.predictors, "forward-predictor", state)
    if strategy is BasisStrategy.ARRA:
        if adjoint is None or adjoint.nt == 0 or background_gradient is None:
            raise ValueError("ARRA snapshots need the adjoint trajectory and background gradient")
        add(adjoint.correctors, "adjoint", dual)
        add(adjoint.predictors, "adjoint", dual)
        add(adjoint.z_second, "adjoint-intermediate", state)
        add(adjoint.z_first, "adjoint-intermediate", state)
        add(np.asarray(background_gradient), "background-gradient", dual)
    allcols = np.vstack(cols)  # (s, 3n)
    n = allcols.shape[1] // 3
    out = []
    for block in _split(allcols, n):
        data = block.T.copy()
        if normalize:
            norms = np.linalg.norm(data, axis=0)
            data[:, norms > 0] /= norms[norms > 0]
        out.append(SnapshotMatrix(data, list(tags)))
    return out


@dataclass
class PodBases:
    """Orthonormal bases for u, v, phi plus their derivative images."""

    modes: tuple  # three (n, k) arrays
    sigma: tuple  # three length-k arrays
    dx: tuple = ()
    dy: tuple = ()

    @property
    def k(self) -> tuple:
        return tuple(m.shape[1] for m in self.modes)

    @property
    def n(self) -> int:
        return self.modes[0].shape[0]

    U = property(lambda self: self.modes[0])
    V = property(lambda self: self.modes[1])
    Phi = property(lambda self: self.modes[2])

    def deriv(self, var, direction):
        return self.dx[var] if direction == "x" else self.dy[var]

    def project(self, w):
        """Reduced coordinates of a flat full state (or rows of states)."""
        n = self.n
        parts = _split(np.asarray(w, dtype=float), n)
        return np.concatenate([p @ m for p, m in zip(parts, self.modes)], axis=-1)

    def lift(self, x):
        x = np.asarray(x, dtype=float)
        offs = np.cumsum((0,) + self.k)
        return np.concatenate(
            [x[..., offs[i]:offs[i + 1]] @ self.modes[i].T for i in range(3)], axis=-1
        )


def build_pod_bases(snapshots, k, ops, method="svd") -> PodBases:
    ks = (k,) * 3 if np.isscalar(k) else tuple(k)
    modes, sigmas = [], []
    for snap, kk in zip(snapshots, ks):
        data = snap.data if isinstance(snap, SnapshotMatrix) else np.asarray(snap)
        U, s = truncated_svd(data, int(kk), method=method)
        modes.append(U)
        sigmas.append(s)
    return with_derivatives(modes, sigmas, ops)


def with_derivatives(modes, sigmas, ops) -> PodBases:
    """Attach derivative images; ``ops`` is a DiffOperators or an ActiveSpace."""
    return PodBases(
        tuple(modes),
        tuple(sigmas),
        tuple(ops.for_var(v, "x") @ m for v, m in enumerate(modes)),
        tuple(ops.for_var(v, "y") @ m for v, m in enumerate(modes)),
    )


def projection_error(basis, vec) -> float:
    vec = np.asarray(vec, dtype=float)
    nrm = np.linalg.norm(vec)
    if nrm == 0:
        raise ValueError("projection error undefined for a zero field")
    return float(np.linalg.norm(vec - basis @ (basis.T @ vec)) / nrm)


def biorthogonalize(U, W):
    """Two-sided modified Gram-Schmidt: returns ``(U', W')`` with ``W'^T U' = I``.

    Intended for Petrov-Galerkin test bases; the reduced models here use
    Galerkin projection only.
    """
    U = np.array(U, dtype=float, copy=True)
    W = np.array(W, dtype=float, copy=True)
    k = U.shape[1]
    for i in range(k):
        for j in range(i):
            U[:, i] -= (W[:, j] @ U[:, i]) * U[:, j]
            W[:, i] -= (U[:, j] @ W[:, i]) * W[:, j]
        d = W[:, i] @ U[:, i]
        if abs(d) < 1e-14 * np.linalg.norm(W[:, i]) * np.linalg.norm(U[:, i]):
            raise np.linalg.LinAlgError(f"biorthogonalization breaks down at column {i}")
        nu = np.linalg.norm(U[:, i])
        U[:, i] /= nu
        W[:, i] /= d / nu
    return U, W


_PODB_MAGIC = b"PODB"
_PODB_VERSION = 1


def save_basis(path, basis, sigma):
    basis = np.ascontiguousarray(basis, dtype="<f8")
    sigma = np.ascontiguousarray(sigma, dtype="<f8")
    n, k = basis.shape
    if sigma.shape != (k,):
        raise ValueError("need one singular value per basis column")
    with open(path, "wb") as fh:
        fh.write(_PODB_MAGIC)
        fh.write(struct.pack("<IQQ", _PODB_VERSION, n, k))
        fh.write(basis.tobytes(order="C"))
        fh.write(sigma.tobytes())


def load_basis(path):
    raw = Path(path).read_bytes()
    if raw[:4] != _PODB_MAGIC:
        raise ValueError(f"{path}: not a POD basis file")
    version, n, k = struct.unpack_from("<IQQ", raw, 4)
    if version != _PODB_VERSION:
        raise ValueError(f"{path}: unsupported basis format version {version}")
    off = 4 + struct.calcsize("<IQQ")
    expected = off + 8 * (n * k + k)
    if len(raw) != expected:
        raise ValueError(f"{path}: truncated or oversized basis file")
    basis = np.frombuffer(raw, dtype="<f8", count=n * k, offset=off).reshape(n, k).copy()
    sigma = np.frombuffer(raw, dtype="<f8", count=k, offset=off + 8 * n * k).copy()
    return basis, sigma
