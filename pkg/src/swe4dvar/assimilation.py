"""Full and reduced-order strong-constraint 4D-Var with identity covariances.

The cost function is::

    J(x0) = 1/2 |x0_b - x0|^2 + 1/2 sum_{i=0}^{N} |y_i - x_i|^2

with ``x_i`` the model trajectory.  Its gradient is ``-(x0_b - x0) - lambda_0``
where ``lambda`` solves the discrete adjoint forced by ``y_i - x_i`` at every
level.
"""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
import scipy.optimize

from .adi import AdjointTrajectory, SweModel, Trajectory
from .pod import BasisStrategy, assemble_snapshots, build_pod_bases
from .rom import ReducedModel, RomVariant, build_deim_operators, collect_nonlinear_snapshots, deim_term_names
from .swe import grammeltvedt_initial_state

log = logging.getLogger(__name__)

__all__ = [
    "ObservationSet",
    "Background",
    "TwinExperiment",
    "OptimizerConfig",
    "BfgsResult",
    "HistoryRecord",
    "AssimResult",
    "FullSystem",
    "ReducedSystem",
    "twin_experiment",
    "full_cost_gradient",
    "reduced_cost_gradient",
    "bfgs_minimize",
    "full_4dvar",
    "reduced_4dvar",
    "verification_suite",
    "error_metrics",
]


@dataclass
class ObservationSet:
    """Full-state observations ``y_i`` at every time level (H = R = I)."""

    values: np.ndarray  # (nt, 3n)
    operator: str = "identity"
    error_covariance: str = "identity"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2:
            raise ValueError("observations must be a (time levels, state size) array")
        if self.operator != "identity" or self.error_covariance != "identity":
            raise NotImplementedError("only identity observation operator and covariance are supported")

    @property
    def count(self) -> int:
        return self.values.size

    @property
    def nt(self) -> int:
        return self.values.shape[0]


@dataclass
class Background:
    xb: np.ndarray
    covariance: str = "identity"

    def __post_init__(self):
        self.xb = np.asarray(self.xb, dtype=float)
        if self.covariance != "identity":
            raise NotImplementedError("only identity background covariance is supported")


@dataclass
class TwinExperiment:
    truth: np.ndarray
    observations: ObservationSet
    background: Background
    first_guess: np.ndarray
    seed: int
    base_state: np.ndarray


def _perturb(w, amplitude, rng, mode, scope="field"):
    """Uniform random perturbation: one factor per field or one per grid value."""
    n = w.size // 3
    if scope == "field":
        noise = np.repeat(rng.uniform(-1.0, 1.0, size=3), n)
    elif scope == "pointwise":
        noise = rng.uniform(-1.0, 1.0, size=w.size)
    else:
        raise ValueError(f"unknown perturbation scope {scope!r}")
    if mode == "multiplicative":
        return w * (1.0 + amplitude * noise)
    if mode == "additive":
        scale = np.repeat([np.max(np.abs(w[i * n:(i + 1) * n])) for i in range(3)], n)
        return w + amplitude * scale * noise
    raise ValueError(f"unknown perturbation mode {mode!r}")


def twin_experiment(model: SweModel, seed=0, truth_amplitude=0.10, background_amplitude=0.05,
                    background_mode="consistent", perturbation="multiplicative",
                    scope="field") -> TwinExperiment:
    """Synthetic truth, observations, background and first guess.

    The truth is the Grammeltvedt state perturbed by ``truth_amplitude``; the
    observations are the full truth trajectory.  With ``scope="field"`` each
    of u, v and phi is scaled by one uniform random factor; ``"pointwise"``
    draws an independent factor for every grid value.  All initial states are
    made boundary-consistent: boundary values are not control variables.  The
    state perturbed by ``background_amplitude`` is the starting iterate.  In
    ``"consistent"`` mode the background term is centred on the truth, so the
    twin optimum has ``J = 0``; in ``"independent"`` mode the perturbed state
    also serves as ``x0_b``.
    """
    if background_mode not in ("consistent", "independent"):
        raise ValueError(f"unknown background mode {background_mode!r}")
    rng = np.random.default_rng(seed)
    close = model.space.close
    base = close(grammeltvedt_initial_state(model.grid, model.constants, model.ops).flat)
    truth = close(_perturb(base, truth_amplitude, rng, perturbation, scope))
    guess = close(_perturb(base, background_amplitude, rng, perturbation, scope))
    obs = ObservationSet(model.forward(truth).correctors)
    xb = truth.copy() if background_mode == "consistent" else guess.copy()
    return TwinExperiment(truth, obs, Background(xb), guess, int(seed), base)


class CostGradient(NamedTuple):
    J: float
    grad: np.ndarray
    trajectory: Trajectory
    adjoint: AdjointTrajectory


def full_cost_gradient(x0, obs: ObservationSet, bg: Background, model: SweModel) -> CostGradient:
    x0 = np.asarray(x0, dtype=float)
    traj = model.forward(x0)
    if traj.nt != obs.nt:
        raise ValueError("observation time levels do not match the model window")
    d = obs.values - traj.correctors
    db = bg.xb - x0
    J = 0.5 * float(db @ db) + 0.5 * float(np.sum(d * d))
    adj = model.linearize(traj).adjoint(d)
    return CostGradient(J, -db - adj.correctors[0], traj, adj)


def reduced_cost_gradient(x0r, obs: ObservationSet, bg: Background, rom: ReducedModel,
                          timings: dict | None = None) -> CostGradient:
    """Reduced cost along the lifted reduced trajectory and its exact gradient."""
    x0r = np.asarray(x0r, dtype=float)
    t0 = time.perf_counter()
    traj = rom.forward(x0r)
    t1 = time.perf_counter()
    d = obs.values - rom.lift(traj.correctors)
    db = bg.xb - rom.lift(x0r)
    J = 0.5 * float(db @ db) + 0.5 * float(np.sum(d * d))
    adj = rom.linearize(traj).adjoint(rom.lift_transpose(d))
    grad = -rom.lift_transpose(db) - adj.correctors[0]
    if timings is not None:
        timings["online_forward"] = timings.get("online_forward", 0.0) + t1 - t0
        timings["online_adjoint"] = timings.get("online_adjoint", 0.0) + time.perf_counter() - t1
    return CostGradient(J, grad, traj, adj)


class FullSystem:
    """Cost/gradient and sensitivity access for the full model."""

    def __init__(self, model: SweModel, obs: ObservationSet, bg: Background):
        self.model, self.obs, self.bg = model, obs, bg

    def cost_grad(self, x0):
        return full_cost_gradient(x0, self.obs, self.bg, self.model)

    def final_state(self, x0):
        return self.model.forward(x0).final

    def tlm_final(self, x0, dx):
        traj = self.model.forward(x0)
        return self.model.linearize(traj).tlm(dx)[-1]


class ReducedSystem(FullSystem):
    def __init__(self, rom: ReducedModel, obs: ObservationSet, bg: Background, timings=None):
        super().__init__(rom, obs, bg)
        self.timings = timings

    def cost_grad(self, x0r):
        return reduced_cost_gradient(x0r, self.obs, self.bg, self.model, self.timings)


@dataclass
class OptimizerConfig:
    eps1: float = 1e-14  # reduced gradient norm
    eps2: float = 1e-5  # relative reduced cost decrease
    eps3: float = 1e-15  # full cost threshold
    eps4: float = 1e-5  # full gradient-norm threshold
    mxfun: int = 25
    n_out: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    full_gtol: float = 1e-14
    full_maxfun: int = 200

    def __post_init__(self):
        for name in ("eps1", "eps2", "eps3", "eps4", "full_gtol"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError(f"{name} must be a positive finite tolerance")
        for name in ("mxfun", "n_out", "full_maxfun"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be at least 1")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("line-search constants need 0 < c1 < c2 < 1")


@dataclass
class BfgsResult:
    x: np.ndarray
    f: float
    grad: np.ndarray
    nfev: int
    nit: int
    stop_reason: str
    history: list  # (f, |g|) of accepted iterates, starting point included


class _BudgetExhausted(Exception):
    pass


def bfgs_minimize(fun: Callable, x0, gtol=1e-14, ftol=0.0, maxfun=100, c1=1e-4, c2=0.9,
                  dense_limit=4000, callback=None) -> BfgsResult:
    """BFGS with a strong-Wolfe line search.

    ``fun(x)`` returns ``(f, grad)``.  Stops when ``|grad| <= gtol``, when the
    accepted decrease satisfies ``|f_new - f_old| <= ftol * |f_old|``, when
    ``maxfun`` evaluations have been spent or when the line search fails; the
    last accepted iterate is returned in every case.  The inverse Hessian is
    stored densely up to ``dense_limit`` unknowns and through the
    equivalent full-memory product form beyond that.  ``callback(x, f, g)``
    is called on every accepted iterate and stops the run by returning True.
    """
    x = np.array(x0, dtype=float, copy=True)
    dim = x.size
    cache = {}
    nfev = [0]

    def evaluate(z):
        key = z.tobytes()
        if key not in cache:
            if nfev[0] >= maxfun:
                raise _BudgetExhausted
            nfev[0] += 1
            f, g = fun(z)
            cache.clear()
            cache[key] = (float(f), np.asarray(g, dtype=float).copy())
        return cache[key]

    f, g = evaluate(x)
    history = [(f, float(np.linalg.norm(g)))]
    if callback is not None and callback(x, f, g):
        return BfgsResult(x, f, g, nfev[0], 0, "callback", history)
    dense = dim <= dense_limit
    H = None
    pairs = []
    gamma = 1.0
    old_old = f + np.linalg.norm(g) / 2  # first trial step of unit length
    nit = 0

    def apply_h(v):
        if dense:
            return v.copy() if H is None else H @ v
        q = v.copy()
        alphas = []
        for s, y, rho in reversed(pairs):
            a = rho * (s @ q)
            q -= a * y
            alphas.append(a)
        r = gamma * q
        for (s, y, rho), a in zip(pairs, reversed(alphas)):
            r += (a - rho * (y @ r)) * s
        return r

    while True:
        gn = float(np.linalg.norm(g))
        if not np.isfinite(f) or not np.isfinite(gn):
            reason = "non-finite"
            break
        if gn <= gtol:
            reason = "gradient"
            break
        if nfev[0] >= maxfun:
            reason = "maxfun"
            break
        p = -apply_h(g)
        if not g @ p < 0:
            H, pairs = None, []
            p = -g
        try:
            with warnings.catch_warnings():
                # a failed search is reported through stop_reason
                warnings.filterwarnings("ignore", message="The line search algorithm")
                alpha, _, _, f_new, f_prev, _ = scipy.optimize.line_search(
                    lambda z: evaluate(z)[0], lambda z: evaluate(z)[1], x, p, g, f, old_old,
                    c1=c1, c2=c2, maxiter=20,
                )
        except _BudgetExhausted:
            reason = "maxfun"
            break
        if alpha is None:
            reason = "line-search"
            break
        x_new = x + alpha * p
        try:
            f_new, g_new = evaluate(x_new)
        except _BudgetExhausted:  # pragma: no cover - line search evaluated it
            reason = "maxfun"
            break
        if f_new > f:
            reason = "line-search"
            break
        s, y = x_new - x, g_new - g
        ys = float(y @ s)
        if ys > 0:
            rho = 1.0 / ys
            if dense:
                if H is None:
                    H = np.eye(dim) * (ys / float(y @ y))
                Hy = H @ y
                H += (rho * rho * float(y @ Hy) + rho) * np.outer(s, s) - rho * (np.outer(Hy, s) + np.outer(s, Hy))
            else:
                if not pairs:
                    gamma = ys / float(y @ y)
                pairs.append((s, y, rho))
        old_old, f_old = f, f
        x, f, g = x_new, f_new, g_new
        nit += 1
        history.append((f, float(np.linalg.norm(g))))
        if callback is not None and callback(x, f, g):
            reason = "callback"
            break
        if abs(f_old - f) <= ftol * abs(f_old):
            reason = "cost-decrease"
            break
    return BfgsResult(x, f, g, nfev[0], nit, reason, history)


@dataclass
class HistoryRecord:
    outer: int
    inner: int
    cost: float  # normalized by the initial full cost
    grad_norm: float  # normalized by the initial full gradient norm
    kind: str  # "inner" (reduced minimization) or "outer" (full-space check)


@dataclass
class AssimResult:
    analysis: np.ndarray
    history: list
    outer_iterations: int
    timings: dict
    stop_reason: str
    cost: float
    initial_cost: float
    grad_norm: float
    initial_grad_norm: float
    seed: int | None = None
    metrics: dict = field(default_factory=dict)
    nfev: int = 0

    @property
    def normalized_cost(self) -> float:
        return self.cost / self.initial_cost

    def history_triples(self):
        return [(i, h.cost, h.grad_norm) for i, h in enumerate(self.history)]


def _per_variable_rel(a, b):
    n = a.size // 3
    out = []
    for i in range(3):
        ref = a[i * n:(i + 1) * n]
        nrm = np.linalg.norm(ref)
        out.append(float(np.linalg.norm(ref - b[i * n:(i + 1) * n]) / nrm) if nrm > 0 else float("nan"))
    return out


def error_metrics(analysis, exp: TwinExperiment, optimum=None) -> dict:
    """Relative errors of an analysis against observations at t0 (and an optimum)."""
    out = {}
    for name, e in zip(("u", "v", "phi"), _per_variable_rel(exp.observations.values[0], analysis)):
        out[f"Eo_{name}"] = e
    if optimum is not None:
        for name, e in zip(("u", "v", "phi"), _per_variable_rel(optimum, analysis)):
            out[f"Estar_{name}"] = e
    return out


def full_4dvar(model: SweModel, exp: TwinExperiment, opt: OptimizerConfig | None = None) -> AssimResult:
    """BFGS on the full cost until ``|grad| <= full_gtol`` or ``J <= eps3``.

    The control variables are the active-row values; boundary values follow
    from the boundary conditions.
    """
    opt = opt or OptimizerConfig()
    space = model.space
    timings = {"forward": 0.0, "adjoint": 0.0}
    start = time.perf_counter()

    def fun(a):
        x = space.extend(a)
        t0 = time.perf_counter()
        traj = model.forward(x)
        t1 = time.perf_counter()
        d = exp.observations.values - traj.correctors
        db = exp.background.xb - x
        J = 0.5 * float(db @ db) + 0.5 * float(np.sum(d * d))
        g = -db - model.linearize(traj).adjoint(d).correctors[0]
        timings["forward"] += t1 - t0
        timings["adjoint"] += time.perf_counter() - t1
        return J, space.extend_transpose(g)

    res = bfgs_minimize(fun, space.restrict(exp.first_guess), gtol=opt.full_gtol, ftol=0.0,
                        maxfun=opt.full_maxfun, c1=opt.c1, c2=opt.c2,
                        callback=lambda x, f, g: f <= opt.eps3)
    J0, gn0 = res.history[0]
    history = [HistoryRecord(0, i, f / J0, gn / gn0, "inner") for i, (f, gn) in enumerate(res.history)]
    timings["total"] = time.perf_counter() - start
    timings["other"] = timings["total"] - timings["forward"] - timings["adjoint"]
    reason = "eps3" if res.stop_reason == "callback" else res.stop_reason
    analysis = space.extend(res.x)
    return AssimResult(analysis, history, 0, timings, reason, res.f, J0, float(np.linalg.norm(res.grad)), gn0,
                       exp.seed, error_metrics(analysis, exp), res.nfev)


def reduced_4dvar(model: SweModel, exp: TwinExperiment, variant=RomVariant.TENSORIAL_POD,
                  strategy=BasisStrategy.ARRA, k=50, m=50, opt: OptimizerConfig | None = None,
                  optimum=None) -> AssimResult:
    """Two-loop reduced 4D-Var: offline basis build, online reduced BFGS, decisional check."""
    opt = opt or OptimizerConfig()
    variant = RomVariant(variant)
    strategy = BasisStrategy(strategy)
    obs, bg = exp.observations, exp.background
    timings = {key: 0.0 for key in (
        "offline_full_forward", "offline_full_adjoint", "svd", "tensors_deim",
        "online_forward", "online_adjoint", "online_other", "decisional",
    )}
    start = time.perf_counter()
    space = model.space

    def full_eval(x, stage):
        t0 = time.perf_counter()
        traj = model.forward(x)
        t1 = time.perf_counter()
        d = obs.values - traj.correctors
        db = bg.xb - x
        J = 0.5 * float(db @ db) + 0.5 * float(np.sum(d * d))
        adj = model.linearize(traj).adjoint(d) if strategy is BasisStrategy.ARRA or stage == "decisional" else None
        t2 = time.perf_counter()
        if stage == "offline":
            timings["offline_full_forward"] += t1 - t0
            timings["offline_full_adjoint"] += t2 - t1
        else:
            timings["decisional"] += t2 - t0
        g = None if adj is None else space.extend_transpose(-db - adj.correctors[0])
        return J, g, traj, adj

    x0 = np.array(exp.first_guess, dtype=float)
    J, g, traj, adj = full_eval(x0, "offline")
    if g is None:  # AR still needs the full gradient for normalization and stopping
        t0 = time.perf_counter()
        adj = model.linearize(traj).adjoint(obs.values - traj.correctors)
        g = space.extend_transpose(-(bg.xb - x0) - adj.correctors[0])
        timings["offline_full_adjoint"] += time.perf_counter() - t0
    J0, gn0 = J, float(np.linalg.norm(g))
    history = [HistoryRecord(0, 0, 1.0, 1.0, "outer")]
    metrics = {}
    reason = "n_out"
    nfev = 0
    outer = 0
    for outer in range(1, opt.n_out + 1):
        # offline stage
        t0 = time.perf_counter()
        snaps = assemble_snapshots(traj, adj if strategy is BasisStrategy.ARRA else None,
                                   x0 - bg.xb if strategy is BasisStrategy.ARRA else None, strategy,
                                   space=space)
        bases = build_pod_bases(snaps, k, space)
        t1 = time.perf_counter()
        deim = None
        if variant.needs_deim:
            names = deim_term_names(variant)
            nl = collect_nonlinear_snapshots(traj, model.ops, rows=space.idx, terms=names)
            deim = build_deim_operators(bases, nl, m, terms=names)
        rom = ReducedModel(model, bases, variant, deim=deim)
        t2 = time.perf_counter()
        timings["svd"] += t1 - t0
        timings["tensors_deim"] += t2 - t1

        # online stage
        system = ReducedSystem(rom, obs, bg, timings)
        xr0 = rom.project(x0)
        first = []

        def inner(z):
            cg = system.cost_grad(z)
            if not first:  # the starting point; reused for the reconstruction metrics
                first.append(cg)
            return cg[:2]

        t0 = time.perf_counter()
        inner_time = timings["online_forward"] + timings["online_adjoint"]
        res = bfgs_minimize(inner, xr0, gtol=opt.eps1, ftol=opt.eps2,
                            maxfun=opt.mxfun, c1=opt.c1, c2=opt.c2)
        if outer == 1:
            metrics.update(_rom_accuracy(rom, x0, adj, first[0]))
        timings["online_other"] += (time.perf_counter() - t0) - (
            timings["online_forward"] + timings["online_adjoint"] - inner_time)
        nfev += res.nfev
        for i, (f, gn) in enumerate(res.history[1:], start=1):
            history.append(HistoryRecord(outer, i, f / J0, gn / gn0, "inner"))
        log.info("outer %d: inner %s after %d evaluations", outer, res.stop_reason, res.nfev)

        # decisional stage
        x0 = rom.lift(res.x)
        J, g, traj, adj = full_eval(x0, "decisional")
        gn = float(np.linalg.norm(g))
        history.append(HistoryRecord(outer, 0, J / J0, gn / gn0, "outer"))
        if J <= opt.eps3:
            reason = "eps3"
            break
        if gn <= opt.eps4:
            reason = "eps4"
            break
    timings["total"] = time.perf_counter() - start
    metrics.update(error_metrics(x0, exp, optimum))
    return AssimResult(x0, history, outer, timings, reason, J, J0, float(np.linalg.norm(g)), gn0,
                       exp.seed, metrics, nfev)


def _rom_accuracy(rom: ReducedModel, x0, adj: AdjointTrajectory, cg: CostGradient) -> dict:
    """Reconstruction errors of the initial state and initial adjoint."""
    out = {}
    space = rom.space
    ef = _per_variable_rel(space.restrict(x0), rom.lift_active(rom.project(x0)))
    ea = _per_variable_rel(space.extend_transpose(adj.correctors[0]), rom.lift_active(cg.adjoint.correctors[0]))
    for name, a, b in zip(("u", "v", "phi"), ef, ea):
        out[f"E_{name}"] = a
        out[f"E_lambda_{name}"] = b
    return out


def verification_suite(system: FullSystem, x0, scales=None, seed=0, direction=None) -> list:
    """Finite-difference checks of the gradient and the tangent linear model.

    For each scale ``a`` the perturbation is ``a * h``.  By default ``h`` is
    the unit vector along the gradient at ``x0`` (the classical choice for
    this test); ``direction="random"`` draws a seeded random unit vector and
    any array is normalized and used as given.  Returns records with
    ``adj_test = (J(x0 + a h) - J(x0)) / (a <grad, h>)`` and ``tl_test =
    |M(x0 + a h) - M(x0)| / |a M' h|``.
    """
    x0 = np.asarray(x0, dtype=float)
    scales = [10.0 ** -p for p in range(1, 8)] if scales is None else list(scales)
    if any(s == 0 for s in scales):
        raise ValueError("zero perturbation is degenerate")
    J0, g0 = system.cost_grad(x0)[:2]
    if direction is None:
        direction = g0
    elif isinstance(direction, str) and direction == "random":
        direction = np.random.default_rng(seed).standard_normal(x0.size)
    direction = np.asarray(direction, dtype=float)
    nrm = np.linalg.norm(direction)
    if not nrm > 0:
        raise ValueError("zero perturbation is degenerate")
    direction = direction / nrm
    final0 = system.final_state(x0)
    tl = system.tlm_final(x0, direction)
    gd = float(g0 @ direction)
    out = []
    for a in scales:
        xp = x0 + a * direction
        Jp = system.cost_grad(xp)[0]
        adj_ratio = (Jp - J0) / (a * gd)
        tl_ratio = np.linalg.norm(system.final_state(xp) - final0) / np.linalg.norm(a * tl)
        out.append({
            "scale": a,
            "adj_test": float(adj_ratio),
            "tl_test": float(tl_ratio),
            "adj_dev": float(abs(adj_ratio - 1)),
            "tl_dev": float(abs(tl_ratio - 1)),
            "finite": bool(np.isfinite(adj_ratio) and np.isfinite(tl_ratio)),
        })
    return out
