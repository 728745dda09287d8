"""Run configuration, experiment orchestration and report emission.

Configuration files use INI syntax (``key = value`` lines grouped in
sections); see the README for the full grammar.  Every key is optional
except ``[mesh] nx`` and ``ny``; missing keys take the reference values of
the Grammeltvedt twin experiment.
"""

from __future__ import annotations

import configparser
import csv
import dataclasses
import gc
import json
import logging
import math
import re
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .adi import AdiConfig, SweModel
from .assimilation import (
    FullSystem,
    OptimizerConfig,
    ReducedSystem,
    full_4dvar,
    reduced_4dvar,
    twin_experiment,
    verification_suite,
)
from .pod import BasisStrategy, assemble_snapshots, build_pod_bases
from .rom import ReducedModel, RomVariant, build_deim_operators, collect_nonlinear_snapshots, deim_term_names
from .swe import PhysicalConstants, build_grid

log = logging.getLogger(__name__)

__all__ = [
    "ConfigError",
    "RunConfig",
    "Report",
    "parse_config",
    "config_from_mapping",
    "build_model",
    "run_assimilation",
    "online_step_time",
    "build_rom",
    "verification_report",
    "run_benchmark",
    "emit_report",
    "RUN_COLUMNS",
    "HISTORY_COLUMNS",
]

VARIANTS = ("full",) + tuple(v.value for v in RomVariant)


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending key and line."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


# section -> key -> (RunConfig attribute, parser)
_SCHEMA = {
    "mesh": {"nx": ("nx", int), "ny": ("ny", int), "length": ("length", float), "width": ("width", float)},
    "time": {"t_final": ("t_final", float), "nt": ("nt", int), "dt": ("dt", float)},
    "model": {
        "g": ("g", float), "f_hat": ("f_hat", float), "beta": ("beta", float),
        "h0": ("h0", float), "h1": ("h1", float), "h2": ("h2", float),
        "linear_solver": ("linear_solver", str), "newton_tol": ("newton_tol", float),
    },
    "reduction": {
        "variant": ("variant", str), "strategy": ("strategy", str), "k": ("k", int), "m": ("m", int),
    },
    "optimizer": {name: (name, t) for name, t in (
        ("eps1", float), ("eps2", float), ("eps3", float), ("eps4", float), ("mxfun", int),
        ("n_out", int), ("c1", float), ("c2", float), ("full_gtol", float), ("full_maxfun", int),
    )},
    "experiment": {
        "seed": ("seed", int), "truth_amplitude": ("truth_amplitude", float),
        "background_amplitude": ("background_amplitude", float), "perturbation": ("perturbation", str),
        "perturbation_scope": ("perturbation_scope", str), "background_mode": ("background_mode", str),
        "compute_optimum": ("compute_optimum", "bool"),
    },
    "output": {"out_dir": ("out_dir", str), "format": ("format", str)},
}


@dataclass
class RunConfig:
    """One experiment: mesh, time window, model variant and optimizer settings."""

    nx: int
    ny: int
    length: float = 6.0e6
    width: float = 4.4e6
    t_final: float = 3 * 3600.0
    nt: int = 91
    dt: float | None = None  # derived from t_final and nt when absent
    g: float = 10.0
    f_hat: float = 1e-4
    beta: float = 1.5e-11
    h0: float = 2000.0
    h1: float = 220.0
    h2: float = 133.0
    linear_solver: str = "direct"
    newton_tol: float = 1e-10
    variant: str = "tensorial"
    strategy: str = "ARRA"
    k: int = 50
    m: int = 50
    eps1: float = 1e-14
    eps2: float = 1e-5
    eps3: float = 1e-15
    eps4: float = 1e-5
    mxfun: int = 25
    n_out: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    full_gtol: float = 1e-14
    full_maxfun: int = 200
    seed: int = 0
    truth_amplitude: float = 0.10
    background_amplitude: float = 0.05
    perturbation: str = "multiplicative"
    perturbation_scope: str = "field"
    background_mode: str = "consistent"
    compute_optimum: bool = False
    out_dir: str = "results"
    format: str = "csv"
    source: str = field(default="<defaults>", compare=False)

    def __post_init__(self):
        self.validate()

    # derived quantities -------------------------------------------------
    @property
    def n_active(self) -> int:
        """Active rows per variable (the number of control values)."""
        return (self.nx - 1) * (self.ny - 2)

    @property
    def snapshot_count(self) -> int:
        nt = self.nt
        return 2 * nt - 1 if self.strategy == "AR" else 6 * nt - 3

    def constants(self) -> PhysicalConstants:
        return PhysicalConstants(g=self.g, f_hat=self.f_hat, beta=self.beta, H0=self.h0, H1=self.h1, H2=self.h2)

    def adi(self) -> AdiConfig:
        return AdiConfig.from_window(self.t_final, self.nt, linear_solver=self.linear_solver,
                                     newton_tol=self.newton_tol)

    def optimizer(self) -> OptimizerConfig:
        return OptimizerConfig(
            eps1=self.eps1, eps2=self.eps2, eps3=self.eps3, eps4=self.eps4, mxfun=self.mxfun,
            n_out=self.n_out, c1=self.c1, c2=self.c2, full_gtol=self.full_gtol, full_maxfun=self.full_maxfun,
        )

    def label(self) -> str:
        if self.variant == "full":
            return f"full {self.nx}x{self.ny}"
        return f"{self.variant} {self.strategy} {self.nx}x{self.ny} k={self.k} m={self.m}"

    def as_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name != "source"}

    # validation ---------------------------------------------------------
    def validate(self):
        def bad(key, msg):
            raise ConfigError(f"{self.source}: {key}: {msg}", key=key)

        if self.dt is not None:
            if not self.dt > 0:
                bad("dt", f"time step must be positive, got {self.dt}")
            self.t_final = self.dt * (self.nt - 1)
        for key in ("nx", "ny"):
            if getattr(self, key) < 3:
                bad(key, "at least 3 points per direction are needed")
        if self.nt < 2:
            bad("nt", "need at least two time levels")
        for key in ("length", "width", "t_final", "g"):
            v = getattr(self, key)
            if not (math.isfinite(v) and v > 0):
                bad(key, f"must be positive and finite, got {v}")
        for key in ("f_hat", "beta", "h0", "h1", "h2"):
            if not math.isfinite(getattr(self, key)):
                bad(key, "must be finite")
        if self.variant not in VARIANTS:
            bad("variant", f"expected one of {', '.join(VARIANTS)}, got {self.variant!r}")
        if self.strategy not in ("AR", "ARRA"):
            bad("strategy", f"expected AR or ARRA, got {self.strategy!r}")
        if self.linear_solver not in ("direct", "gmres"):
            bad("linear_solver", f"expected direct or gmres, got {self.linear_solver!r}")
        if self.perturbation not in ("multiplicative", "additive"):
            bad("perturbation", f"expected multiplicative or additive, got {self.perturbation!r}")
        if self.perturbation_scope not in ("field", "pointwise"):
            bad("perturbation_scope", f"expected field or pointwise, got {self.perturbation_scope!r}")
        if self.background_mode not in ("consistent", "independent"):
            bad("background_mode", f"expected consistent or independent, got {self.background_mode!r}")
        if self.format not in ("csv", "json"):
            bad("format", f"expected csv or json, got {self.format!r}")
        for key in ("truth_amplitude", "background_amplitude"):
            if not 0 <= getattr(self, key) < 1:
                bad(key, "perturbation amplitude must lie in [0, 1)")
        if self.variant != "full":
            cap = min(self.n_active, self.snapshot_count)
            if not 1 <= self.k <= cap:
                bad("k", f"basis size {self.k} outside [1, {cap}] (snapshot capacity)")
            if RomVariant(self.variant).needs_deim:
                mcap = min(self.n_active, 2 * self.nt - 1)
                if not 1 <= self.m <= mcap:
                    bad("m", f"DEIM size {self.m} outside [1, {mcap}]")
        try:
            self.optimizer()
            self.adi()
        except ValueError as exc:
            bad("optimizer" if "eps" in str(exc) or "line-search" in str(exc) else "model", str(exc))


def _key_lines(text: str) -> dict:
    """``(section, key) -> line number`` for error messages."""
    out, section = {}, None
    for no, line in enumerate(text.splitlines(), start=1):
        s = line.strip()
        if s.startswith("[") and s.endswith("]"):
            section = s[1:-1].strip().lower()
        elif s and s[0] not in "#;":
            m = re.match(r"([^=:]+?)\s*[=:]", s)
            if m:
                out[(section, m.group(1).strip().lower())] = no
    return out


def _convert(raw: str, kind, where: str):
    try:
        if kind == "bool":
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw, 10)
        return kind(raw.strip())
    except ValueError:
        name = "boolean" if kind == "bool" else kind.__name__
        raise ConfigError(f"{where}: cannot read {raw!r} as {name}") from None


def config_from_mapping(values: dict, source="<mapping>") -> RunConfig:
    """RunConfig from ``{attribute: value}``; unknown attributes are rejected."""
    known = {f.name for f in fields(RunConfig)} - {"source"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{source}: unknown keys {unknown}")
    if "nx" not in values or "ny" not in values:
        raise ConfigError(f"{source}: mesh nx and ny are required")
    return RunConfig(**values, source=source)


def parse_config(path) -> RunConfig:
    """Read and validate an INI run configuration."""
    path = Path(path)
    text = path.read_text()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    lines = _key_lines(text)
    values = {}
    for section in parser.sections():
        sec = section.lower()
        if sec not in _SCHEMA:
            raise ConfigError(f"{path}: unknown section [{section}]")
        for key, raw in parser.items(section):
            where = f"{path}:{lines.get((sec, key), '?')}: [{sec}] {key}"
            if key not in _SCHEMA[sec]:
                raise ConfigError(f"{where}: unknown key")
            attr, kind = _SCHEMA[sec][key]
            values[attr] = _convert(raw, kind, where)
    if parser.defaults():
        raise ConfigError(f"{path}: keys outside any section are not allowed")
    try:
        return config_from_mapping(values, source=str(path))
    except ConfigError as exc:
        # attribute names equal key names, so the offending line can be named
        no = next((no for (sec, key), no in lines.items() if key == exc.key), None)
        if no is None:
            raise
        raise ConfigError(str(exc).replace(f"{path}:", f"{path}:{no}:", 1), key=exc.key) from None


# orchestration ------------------------------------------------------------
def build_model(cfg: RunConfig) -> SweModel:
    grid = build_grid(cfg.nx, cfg.ny, cfg.constants(), length=cfg.length, width=cfg.width)
    return SweModel(grid, cfg.constants(), cfg.adi())


def _experiment(cfg: RunConfig, model: SweModel):
    return twin_experiment(model, seed=cfg.seed, truth_amplitude=cfg.truth_amplitude,
                           background_amplitude=cfg.background_amplitude,
                           background_mode=cfg.background_mode, perturbation=cfg.perturbation,
                           scope=cfg.perturbation_scope)


def run_assimilation(cfg: RunConfig, model: SweModel | None = None):
    """Full or reduced 4D-Var for ``cfg``; returns ``(AssimResult, TwinExperiment)``."""
    model = model or build_model(cfg)
    exp = _experiment(cfg, model)
    opt = cfg.optimizer()
    if cfg.variant == "full":
        return full_4dvar(model, exp, opt), exp
    optimum = full_4dvar(model, exp, opt).analysis if cfg.compute_optimum else None
    res = reduced_4dvar(model, exp, cfg.variant, cfg.strategy, k=cfg.k, m=cfg.m, opt=opt, optimum=optimum)
    return res, exp


def build_rom(cfg: RunConfig, model: SweModel, x0=None):
    """ROM built from the full trajectories started at ``x0`` (the first guess by default)."""
    exp = _experiment(cfg, model)
    x0 = exp.first_guess if x0 is None else x0
    strategy = BasisStrategy(cfg.strategy)
    traj = model.forward(x0)
    adj = bgrad = None
    if strategy is BasisStrategy.ARRA:
        adj = model.linearize(traj).adjoint(exp.observations.values - traj.correctors)
        bgrad = x0 - exp.background.xb
    snaps = assemble_snapshots(traj, adj, bgrad, strategy, space=model.space)
    bases = build_pod_bases(snaps, cfg.k, model.space)
    variant = RomVariant(cfg.variant)
    deim = None
    if variant.needs_deim:
        names = deim_term_names(variant)
        nl = collect_nonlinear_snapshots(traj, model.ops, rows=model.space.idx, terms=names)
        deim = build_deim_operators(bases, nl, cfg.m, terms=names)
    return ReducedModel(model, bases, variant, deim=deim), exp


def online_step_time(cfg: RunConfig, model: SweModel | None = None, repeats=3) -> float:
    """Best-of-``repeats`` wall time of one reduced ADI step (seconds)."""
    model = model or build_model(cfg)
    rom, exp = build_rom(cfg, model)
    x0 = rom.project(exp.first_guess)
    best = math.inf
    enabled = gc.isenabled()
    gc.disable()  # as timeit does: collector pauses are not part of the step
    try:
        for _ in range(repeats):
            rom._memo.clear()
            rom._jmemo.clear()
            t0 = time.perf_counter()
            rom.forward(x0)
            best = min(best, time.perf_counter() - t0)
    finally:
        if enabled:
            gc.enable()
    return best / (cfg.nt - 1)


# reports ------------------------------------------------------------------
RUN_COLUMNS = (
    ("run", ""), ("label", ""), ("status", ""), ("error", ""), ("nx", ""), ("ny", ""),
    ("variant", ""), ("strategy", ""), ("k", ""), ("m", ""), ("seed", ""),
    ("outer_iterations", ""), ("nfev", ""), ("stop_reason", ""),
    ("initial_cost", ""), ("normalized_cost", "1"), ("normalized_grad", "1"),
    ("E_u", "1"), ("E_v", "1"), ("E_phi", "1"),
    ("E_lambda_u", "1"), ("E_lambda_v", "1"), ("E_lambda_phi", "1"),
    ("Eo_u", "1"), ("Eo_v", "1"), ("Eo_phi", "1"),
    ("Estar_u", "1"), ("Estar_v", "1"), ("Estar_phi", "1"),
    ("online_step_time", "s"),
    ("t_offline_full_forward", "s"), ("t_offline_full_adjoint", "s"), ("t_svd", "s"),
    ("t_tensors_deim", "s"), ("t_online_forward", "s"), ("t_online_adjoint", "s"),
    ("t_online_other", "s"), ("t_decisional", "s"), ("t_forward", "s"), ("t_adjoint", "s"),
    ("t_other", "s"), ("t_total", "s"),
)
HISTORY_COLUMNS = (("run", ""), ("iteration", ""), ("outer", ""), ("inner", ""), ("kind", ""),
                   ("normalized_cost", "1"), ("normalized_grad", "1"))
TIMING_COLUMNS = frozenset(name for name, unit in RUN_COLUMNS if unit == "s")


@dataclass
class Report:
    """Run records and convergence histories; wall times are hardware dependent."""

    runs: list = field(default_factory=list)
    history: list = field(default_factory=list)

    def without_timings(self) -> "Report":
        """Copy with every wall-time cell removed (for determinism checks)."""
        strip = lambda rec: {k: v for k, v in rec.items() if k not in TIMING_COLUMNS}  # noqa: E731
        return Report([strip(r) for r in self.runs], [dict(h) for h in self.history])


def _ms(t):
    return round(float(t), 3)


def _run_record(index, cfg: RunConfig, res) -> dict:
    rec = {"run": index, "label": cfg.label(), "status": "ok", "error": "", "nx": cfg.nx, "ny": cfg.ny,
           "variant": cfg.variant, "strategy": cfg.strategy if cfg.variant != "full" else "",
           "k": cfg.k if cfg.variant != "full" else "", "m": cfg.m if cfg.variant in ("deim", "hybrid") else "",
           "seed": cfg.seed, "outer_iterations": res.outer_iterations, "nfev": res.nfev,
           "stop_reason": res.stop_reason, "initial_cost": res.initial_cost,
           "normalized_cost": res.normalized_cost, "normalized_grad": res.grad_norm / res.initial_grad_norm}
    for key, value in res.metrics.items():
        rec[key] = value
    for key, value in res.timings.items():
        rec[f"t_{key}"] = _ms(value)
    return rec


def run_benchmark(configs, step_timing=False) -> Report:
    """Run every configuration; failures are recorded and the sweep continues."""
    report = Report()
    for i, cfg in enumerate(configs):
        log.info("run %d: %s", i, cfg.label())
        try:
            model = build_model(cfg)
            res, _ = run_assimilation(cfg, model)
            rec = _run_record(i, cfg, res)
            if step_timing and cfg.variant != "full":
                rec["online_step_time"] = online_step_time(cfg, model)
            report.runs.append(rec)
            for it, h in enumerate(res.history):
                report.history.append({"run": i, "iteration": it, "outer": h.outer, "inner": h.inner,
                                       "kind": h.kind, "normalized_cost": h.cost,
                                       "normalized_grad": h.grad_norm})
        except Exception as exc:  # noqa: BLE001 - recorded per run by design
            log.warning("run %d failed: %s", i, exc)
            report.runs.append({"run": i, "label": cfg.label(), "status": "failed",
                                "error": f"{type(exc).__name__}: {exc}", "nx": cfg.nx, "ny": cfg.ny,
                                "variant": cfg.variant, "seed": cfg.seed})
    return report


def _finite_cells(rows):
    for row in rows:
        for key, value in row.items():
            if isinstance(value, float) and not math.isfinite(value):
                raise ValueError(f"non-finite value in column {key}")


def _header(columns, units=True):
    return [f"{name} [{unit}]" if units and unit else name for name, unit in columns]


def emit_report(report: Report, fmt="csv", out_dir=".", provenance=None) -> list:
    """Write ``runs`` and ``history`` tables; returns the written paths.

    CSV headers carry units in brackets (``[s]`` wall time, ``[1]``
    dimensionless).  JSON files hold ``{"units", "provenance", "records"}``
    with floats written in round-trip precision.
    """
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    _finite_cells(report.runs)
    _finite_cells(report.history)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rows, columns in (("runs", report.runs, RUN_COLUMNS), ("history", report.history, HISTORY_COLUMNS)):
        path = out / f"{name}.{fmt}"
        if fmt == "csv":
            with open(path, "w", newline="") as fh:
                if provenance:
                    fh.write(f"# provenance: {json.dumps(provenance, sort_keys=True)}\n")
                writer = csv.writer(fh)
                writer.writerow(_header(columns))
                for row in rows:
                    writer.writerow([_csv_cell(row.get(col, "")) for col, _ in columns])
        else:
            doc = {"units": {col: unit for col, unit in columns if unit}, "provenance": provenance or {},
                   "records": [{col: row[col] for col, _ in columns if col in row} for row in rows]}
            path.write_text(json.dumps(doc, indent=1, default=_json_default))
        written.append(path)
    return written


def _csv_cell(value):
    return repr(value) if isinstance(value, float) else value


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if dataclasses.is_dataclass(obj):
        return dataclasses.asdict(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def verification_report(cfg: RunConfig, scales=None) -> list:
    """Gradient and tangent-linear checks for the full model and the ROM of ``cfg``."""
    model = build_model(cfg)
    exp = _experiment(cfg, model)
    rows = []
    full = FullSystem(model, exp.observations, exp.background)
    # the gradient direction is boundary-consistent: E E^T g with E the lift
    g = model.space.extend(model.space.extend_transpose(full.cost_grad(exp.first_guess)[1]))
    for rec in verification_suite(full, exp.first_guess, scales, seed=cfg.seed, direction=g):
        rows.append({"system": "full", **rec})
    if cfg.variant != "full":
        rom, _ = build_rom(cfg, model)
        red = ReducedSystem(rom, exp.observations, exp.background)
        for rec in verification_suite(red, rom.project(exp.first_guess), scales, seed=cfg.seed):
            rows.append({"system": cfg.variant, **rec})
    return rows
