"""Command-line interface: ``swe4dvar {forward,rom-build,assimilate,verify,benchmark}``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 numerical
failure (nonlinear or linear solver did not converge), 4 file I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .adi import LinearSolverError, NonConvergence
from .harness import (
    ConfigError,
    Report,
    RunConfig,
    build_model,
    build_rom,
    config_from_mapping,
    emit_report,
    parse_config,
    run_benchmark,
    verification_report,
)
from .pod import save_basis
from .rom import save_rom
from .swe import grammeltvedt_initial_state

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3
EXIT_IO = 4

# command-line overrides of RunConfig fields
_OVERRIDES = (
    ("nx", int), ("ny", int), ("nt", int), ("t_final", float), ("variant", str), ("strategy", str),
    ("k", int), ("m", int), ("mxfun", int), ("n_out", int), ("seed", int),
)


def _config(args, **defaults) -> RunConfig:
    overrides = {**defaults} if not args.config else {}
    overrides |= {name: getattr(args, name) for name, _ in _OVERRIDES if getattr(args, name, None) is not None}
    if args.format is not None:
        overrides["format"] = args.format
    if args.out is not None:
        overrides["out_dir"] = args.out
    if args.config:
        base = parse_config(args.config)
        values = {**base.as_dict(), **overrides}
        # t_final was fixed by dt in the file; a new nt must not silently rescale it
        if "nt" in overrides and base.dt is not None:
            values["t_final"] = base.dt * (overrides["nt"] - 1)
        values["dt"] = None
        return config_from_mapping(values, source=str(args.config))
    return config_from_mapping(overrides, source="<command line>")


def _provenance(cfg: RunConfig) -> dict:
    return {"version": __version__, "source": cfg.source, "config": cfg.as_dict()}


def cmd_forward(args) -> int:
    cfg = _config(args, variant="full")
    model = build_model(cfg)
    w0 = model.space.close(grammeltvedt_initial_state(model.grid, model.constants, model.ops).flat)
    traj = model.forward(w0)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trajectory.npz"
    np.savez(path, correctors=traj.correctors, predictors=traj.predictors, dt=cfg.adi().dt,
             nx=cfg.nx, ny=cfg.ny)
    print(f"wrote {path} ({traj.nt} time levels, {traj.correctors.shape[1]} unknowns)")
    return EXIT_OK


def cmd_rom_build(args) -> int:
    cfg = _config(args)
    if cfg.variant == "full":
        raise ConfigError("rom-build needs a reduced variant (standard, tensorial, deim or hybrid)")
    model = build_model(cfg)
    rom, _ = build_rom(cfg, model)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, modes, sigma in zip(("u", "v", "phi"), rom.bases.modes, rom.bases.sigma):
        save_basis(out / f"basis_{name}.podb", modes, sigma)
    save_rom(out / "rom.romt", rom.tensors, rom.deim)
    print(f"wrote bases and ROM operators for {cfg.label()} to {out}")
    return EXIT_OK


def cmd_assimilate(args) -> int:
    cfg = _config(args)
    report = run_benchmark([cfg])
    paths = emit_report(report, cfg.format, cfg.out_dir, _provenance(cfg))
    _summarize(report, paths)
    return EXIT_NUMERICAL if any(r["status"] != "ok" for r in report.runs) else EXIT_OK


def cmd_verify(args) -> int:
    cfg = _config(args)
    rows = verification_report(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"verify.{cfg.format}"
    cols = ("system", "scale", "adj_test", "tl_test", "adj_dev", "tl_dev")
    if cfg.format == "json":
        path.write_text(json.dumps({"provenance": _provenance(cfg), "records": rows}, indent=1))
    else:
        lines = [",".join(cols)] + [",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols)
                                    for r in rows]
        path.write_text("\n".join(lines) + "\n")
    for r in rows:
        print(f"{r['system']:>10} scale={r['scale']:.0e} adj_test={r['adj_test']:.12f} tl_test={r['tl_test']:.12f}")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    configs = [parse_config(p) for p in args.configs]
    fmt = args.format or (configs[0].format if configs else "csv")
    out = args.out or (configs[0].out_dir if configs else "results")
    report = run_benchmark(configs, step_timing=args.step_timing) if configs else Report()
    paths = emit_report(report, fmt, out, {"configs": [str(p) for p in args.configs]})
    _summarize(report, paths)
    return EXIT_OK


def _summarize(report: Report, paths):
    for r in report.runs:
        if r["status"] == "ok":
            print(f"run {r['run']}: {r['label']}: J/J0={r['normalized_cost']:.3e} "
                  f"outer={r['outer_iterations']} stop={r['stop_reason']}")
        else:
            print(f"run {r['run']}: {r['label']}: FAILED {r['error']}")
    for p in paths:
        print(f"wrote {p}")


def _add_run_flags(p):
    p.add_argument("--config", type=Path, help="INI run configuration")
    for name, kind in _OVERRIDES:
        p.add_argument(f"--{name.replace('_', '-')}", dest=name, type=kind)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="swe4dvar", description="Reduced-order 4D-Var for shallow water equations")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, text in (
        ("forward", cmd_forward, "run the full model and dump the trajectory"),
        ("rom-build", cmd_rom_build, "build and persist POD bases and ROM operators"),
        ("assimilate", cmd_assimilate, "full or reduced 4D-Var twin experiment"),
        ("verify", cmd_verify, "gradient and tangent-linear verification"),
    ):
        p = sub.add_parser(name, help=text)
        _add_run_flags(p)
        p.set_defaults(func=fn)
    p = sub.add_parser("benchmark", help="run a sweep of configurations and emit comparative tables")
    p.add_argument("configs", nargs="*", type=Path)
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--out")
    p.add_argument("--step-timing", action="store_true", help="also time one reduced ADI step per run")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonConvergence, LinearSolverError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
