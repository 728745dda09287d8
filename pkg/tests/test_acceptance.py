"""Acceptance criteria 1-10 at their stated meshes and tolerances.

Every test prints one ``[criterion N] PASS/FAIL: ...`` line, also repeated
in the terminal summary, and then asserts the same verdict.  The long runs
(the 31x23 assimilations and the 61x45 timing study) are module fixtures so
that criteria sharing a run pay for it once.
"""
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, initial_state
from swe4dvar.harness import (
    RunConfig,
    build_model,
    build_rom,
    online_step_time,
    run_assimilation,
    run_benchmark,
    verification_report,
)

VARIANTS = ("standard", "tensorial", "deim", "hybrid")


def verdict(n, ok, text):
    line = f"[criterion {n}] {'PASS' if ok else 'FAIL'}: {text}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def _elapsed(t0):
    return time.perf_counter() - t0


def _per_variable_rmse(a, b):
    n = a.size // 3
    return [float(np.sqrt(np.mean((a[i * n:(i + 1) * n] - b[i * n:(i + 1) * n]) ** 2))) for i in range(3)]


# 1 -------------------------------------------------------------------------------
def test_criterion_1_adjoint_duality():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    cfg = RunConfig(nx=17, ny=13, nt=10, dt=120.0, k=20, m=19)
    model = build_model(cfg)
    worst = {}

    def check(name, tlm, adjoint, delta, shape):
        # forcing at a single level n pairs the n-step TLM with the adjoint sweep from n
        tl = tlm(delta)
        err = 0.0
        for n in range(1, shape[0]):
            lam = np.zeros(shape)
            lam[n] = rng.standard_normal(shape[1])
            lhs = float(tl[n] @ lam[n])
            rhs = float(delta @ adjoint(lam).correctors[0])
            err = max(err, abs(lhs - rhs) / (np.linalg.norm(delta) * np.linalg.norm(lam[n])))
        worst[name] = err

    w0 = initial_state(model)
    traj = model.forward(w0)
    lin = model.linearize(traj)
    check("full", lin.tlm, lin.adjoint, model.space.extend(rng.standard_normal(3 * model.space.n_act)),
          traj.correctors.shape)
    for v in VARIANTS:
        rom, exp = build_rom(RunConfig(**{**cfg.as_dict(), "variant": v}), model)
        rtraj = rom.forward(rom.project(exp.first_guess))
        rlin = rom.linearize(rtraj)
        check(v, rlin.tlm, rlin.adjoint, rng.standard_normal(rom.K), rtraj.correctors.shape)
    err = max(worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(1, err <= 1e-10, f"worst normalized duality gap over {model.cfg.nt - 1} steps {err:.2e} (<= 1e-10); "
                             f"{detail}; {_elapsed(t0):.1f} s")


# 2 -------------------------------------------------------------------------------
def _monotone_to_plateau(devs):
    i = int(np.argmin(devs))
    return all(devs[j + 1] < devs[j] for j in range(i)), i


def test_criterion_2_gradient_verification():
    t0 = time.perf_counter()
    scales = [10.0 ** -p for p in range(1, 8)]
    rows = verification_report(RunConfig(nx=17, ny=13, variant="hybrid", k=50, m=50), scales)
    ok = True
    parts = []
    for system in ("full", "hybrid"):
        recs = [r for r in rows if r["system"] == system]
        for key in ("adj", "tl"):
            devs = [r[f"{key}_dev"] for r in recs]
            at = devs[scales.index(1e-4)]
            mono, i = _monotone_to_plateau(devs)
            good = at <= 1e-3 and mono and scales[i] <= 1e-4
            ok &= good
            parts.append(f"{system} {key}_test |r-1| {at:.1e} at 1e-4, plateau from {scales[i]:.0e}")
    verdict(2, ok, "; ".join(parts) + f"; {_elapsed(t0):.1f} s")


# 3 and 4 -------------------------------------------------------------------------
@pytest.fixture(scope="module")
def model_17():
    return build_model(RunConfig(nx=17, ny=13))


def _trajectory_gap(model, cfg_a, cfg_b):
    a, exp = build_rom(cfg_a, model)
    b, _ = build_rom(cfg_b, model)
    x0 = a.project(exp.first_guess)
    np.testing.assert_array_equal(x0, b.project(exp.first_guess))
    ta = a.forward(x0).correctors
    tb = b.forward(x0).correctors
    return float(np.max(np.abs(ta - tb)) / np.max(np.abs(ta)))


def test_criterion_3_tensorial_matches_standard(model_17):
    t0 = time.perf_counter()
    gap = _trajectory_gap(model_17, RunConfig(nx=17, ny=13, variant="standard", k=20),
                          RunConfig(nx=17, ny=13, variant="tensorial", k=20))
    verdict(3, gap <= 1e-10, f"standard vs tensorial trajectories, 17x13 k=20 Nt=91, max relative difference "
                             f"{gap:.1e} (<= 1e-10); {_elapsed(t0):.1f} s")


def test_criterion_4_deim_saturation(model_17):
    t0 = time.perf_counter()
    m = model_17.space.n_act
    gap = _trajectory_gap(model_17, RunConfig(nx=17, ny=13, variant="standard", k=50),
                          RunConfig(nx=17, ny=13, variant="deim", k=50, m=m))
    verdict(4, gap <= 1e-8, f"DEIM with m={m} (every non-boundary row) vs standard POD, max relative difference "
                            f"{gap:.1e} (<= 1e-8); {_elapsed(t0):.1f} s")


# 5 -------------------------------------------------------------------------------
def test_criterion_5_forward_rom_accuracy(model_17):
    t0 = time.perf_counter()
    worst = 0.0
    parts = []
    for v in ("deim", "tensorial", "standard"):
        rom, exp = build_rom(RunConfig(nx=17, ny=13, variant=v, k=50, m=50), model_17)
        full = model_17.forward(exp.first_guess).final
        red = rom.lift(rom.forward(rom.project(exp.first_guess)).final)
        rmse = _per_variable_rmse(full, red)
        worst = max(worst, *rmse)
        parts.append(f"{v} u/v/phi " + "/".join(f"{e:.1e}" for e in rmse))
    verdict(5, worst <= 1e-5, "RMSE at t_f, 17x13 k=50 m=50: " + "; ".join(parts)
            + f" (each <= 1e-5); {_elapsed(t0):.1f} s")


# 6 and 7 -------------------------------------------------------------------------
@pytest.fixture(scope="module")
def runs_31():
    """AR and ARRA tensorial assimilations on 31x23, k=50, MXFUN=25, n_out=13."""
    model = build_model(RunConfig(nx=31, ny=23))
    out = {}
    for strategy in ("ARRA", "AR"):
        cfg = RunConfig(nx=31, ny=23, variant="tensorial", strategy=strategy, k=50, mxfun=25, n_out=13)
        t0 = time.perf_counter()
        res, _ = run_assimilation(cfg, model)
        out[strategy] = (res, _elapsed(t0))
    return out


def test_criterion_6_arra_vs_ar(runs_31):
    (arra, t_arra), (ar, t_ar) = runs_31["ARRA"], runs_31["AR"]
    names = ("u", "v", "phi")
    e_ar = [ar.metrics[f"E_lambda_{n}"] for n in names]
    e_arra = [arra.metrics[f"E_lambda_{n}"] for n in names]
    ratio = arra.normalized_cost / ar.normalized_cost
    ok = min(e_ar) >= 1e-2 and max(e_arra) <= 1e-5 and ratio <= 1e-6 and t_ar + t_arra < 900
    verdict(6, ok, "adjoint reconstruction AR " + "/".join(f"{e:.2e}" for e in e_ar) + " (>= 1e-2), ARRA "
            + "/".join(f"{e:.1e}" for e in e_arra) + f" (<= 1e-5); final normalized J ARRA {arra.normalized_cost:.1e}"
            f" vs AR {ar.normalized_cost:.1e}, ratio {ratio:.1e} (<= 1e-6); {t_ar + t_arra:.0f} s (< 900 s)")


def test_criterion_7_reduced_4dvar_convergence(runs_31):
    res, t = runs_31["ARRA"]
    ok = res.normalized_cost <= 1e-12 and t < 900
    verdict(7, ok, f"ARRA tensorial 31x23 k=50 final normalized J {res.normalized_cost:.1e} (<= 1e-12) after "
                   f"{res.outer_iterations} outer iterations, stop {res.stop_reason}; {t:.0f} s (< 900 s)")


# 8 -------------------------------------------------------------------------------
def test_criterion_8_suboptimal_accuracy(model_17):
    t0 = time.perf_counter()
    # the optimizer budget of the reference hybrid experiment
    res, _ = run_assimilation(RunConfig(nx=17, ny=13, variant="hybrid", k=50, m=50, mxfun=20, n_out=10), model_17)
    eo = [res.metrics[f"Eo_{n}"] for n in ("u", "v", "phi")]
    ok = max(eo) <= 1e-8
    verdict(8, ok, "hybrid DEIM 17x13 k=50 m=50 MXFUN=20 n_out=10, Eo u/v/phi " + "/".join(f"{e:.1e}" for e in eo)
            + f" (each <= 1e-8), normalized J {res.normalized_cost:.1e}; {_elapsed(t0):.0f} s")


# 9 -------------------------------------------------------------------------------
# settings of the reference timing table: k=30, 50 DEIM points, MXFUN=15
TIMING = dict(k=30, m=50, mxfun=15)


def test_criterion_9_timing_scaling():
    t0 = time.perf_counter()
    step = {}
    for nx, ny in ((31, 23), (61, 45)):
        model = build_model(RunConfig(nx=nx, ny=ny))
        for v in ("tensorial", "deim", "standard"):
            step[v, nx] = online_step_time(RunConfig(nx=nx, ny=ny, variant=v, **TIMING), model, repeats=5)
    growth = {v: step[v, 61] / step[v, 31] for v in ("tensorial", "deim", "standard")}
    ok_a = growth["tensorial"] <= 1.5 and growth["deim"] <= 1.5
    ok_b = growth["standard"] >= 2.0

    # the close pair is run in alternation, best of two, so that slow drifts
    # in machine load hit both
    total = dict.fromkeys(("hybrid", "tensorial", "standard"), np.inf)
    for v in ("hybrid", "tensorial", "hybrid", "tensorial", "standard"):
        t1 = time.perf_counter()
        run_assimilation(RunConfig(nx=61, ny=45, variant=v, **TIMING), model)
        total[v] = min(total[v], _elapsed(t1))
    ok_c = total["hybrid"] <= total["tensorial"] <= total["standard"]
    t = _elapsed(t0)
    verdict(9, ok_a and ok_b and ok_c and t < 1800,
            "k=30 m=50 MXFUN=15; "
            f"(a) per-step growth 31x23 -> 61x45 tensorial {growth['tensorial']:.2f}, deim {growth['deim']:.2f}"
            f" (<= 1.5) {'ok' if ok_a else 'fails'}; (b) standard {growth['standard']:.2f} (>= 2)"
            f" {'ok' if ok_b else 'fails'}; (c) 61x45 totals hybrid {total['hybrid']:.0f} s, tensorial "
            f"{total['tensorial']:.0f} s, standard {total['standard']:.0f} s {'ok' if ok_c else 'fails'}; "
            f"{t:.0f} s (< 1800 s)")


# 10 ------------------------------------------------------------------------------
def _accepted_costs_monotone(history):
    runs = {}
    for h in history:
        if h.kind == "inner":
            runs.setdefault(h.outer, []).append(h.cost)
    return all(all(b <= a for a, b in zip(c, c[1:])) for c in runs.values())


def test_criterion_10_monotonicity_and_determinism(runs_31):
    t0 = time.perf_counter()
    configs = [RunConfig(nx=17, ny=13, variant="deim", k=30, m=30, n_out=3),
               RunConfig(nx=17, ny=13, variant="full", full_maxfun=15)]
    results = [[run_assimilation(c)[0] for c in configs] for _ in range(2)]
    same = all(
        np.array_equal(a.analysis, b.analysis)
        and a.history == b.history and a.metrics == b.metrics and a.nfev == b.nfev
        for a, b in zip(*results)
    )
    reports = [run_benchmark(configs[:1]).without_timings() for _ in range(2)]
    same &= reports[0] == reports[1]
    checked = [r for pair in results for r in pair] + [r for r, _ in runs_31.values()]
    mono = all(_accepted_costs_monotone(r.history) for r in checked)
    verdict(10, same and mono, f"accepted BFGS costs monotone in {len(checked)} runs {'ok' if mono else 'fails'}; "
                               f"fixed-seed reruns bit-identical outside timings {'ok' if same else 'fails'}; "
                               f"{_elapsed(t0):.0f} s")
