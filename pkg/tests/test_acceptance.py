"""Acceptance criteria, each at its stated tolerance.

Seeds are fixed per criterion (1000 + criterion number) and were chosen
before any run.  A summary line per criterion is printed at the end of the
pytest session.
"""

import numpy as np

from conftest import (
    ACCEPTANCE_RESULTS,
    EXCITED,
    MIXED,
    PLUS,
    decay_counting,
    decay_homodyne,
    driven_mixed,
    qnd,
)
import oracles
from contmeas import (
    MeasurementModel,
    TestFunction,
    TimeGrid,
    check_quasi_complete,
    classical_information,
    evolve_characteristic,
    evolve_master,
    info_report,
    mc_characteristic,
    mean_outputs,
    pauli,
    pure_state,
    run_trajectories,
    second_moment,
    sigma_minus,
    summarize,
    trace_distance,
)
from contmeas.info import entropy_balance
from contmeas.moments import mc_output_moments
from contmeas.trajectories import _run_linear, _run_posterior, trajectory_rng

# ensembles produced by the other criteria are re-checked for the entropy balance
BALANCE_SAMPLES = []


def record(k, ok, detail):
    ACCEPTANCE_RESULTS[k] = (bool(ok), detail)
    print(f"criterion {k}: {'PASS' if ok else 'FAIL'}  {detail}")


def suite():
    return {"diffusive": (decay_homodyne(), EXCITED), "jump": (decay_counting(), EXCITED),
            "mixed": (driven_mixed(), EXCITED)}


def test_criterion_01_martingale():
    grid = TimeGrid(1.0, 1e-3, stride=250)
    batch = run_trajectories(decay_homodyne(), EXCITED, grid, 5000, "linear", 1001)
    w = batch.weights[:, :, 0]
    lines, ok = [], True
    for t in (0.25, 0.5, 1.0):
        col = w[:, grid.index_of(t)]
        mean, se = col.mean(), col.std(ddof=1) / np.sqrt(len(col))
        good = abs(mean - 1) <= 3 * se
        ok &= good
        lines.append(f"t={t}: {mean:.4f}+-{se:.4f}")
    BALANCE_SAMPLES.append(("martingale/linear", batch.states[:, -1, 0], w[:, -1]))
    record(1, ok, "; ".join(lines))
    assert ok


def test_criterion_02_unraveling_consistency():
    grid = TimeGrid(1.0, 1e-3, stride=1000)
    worst, parts = 0.0, []
    for name, (model, rho0) in suite().items():
        eta = evolve_master(model, rho0, 1.0)
        for engine in ("linear", "posterior"):
            batch = run_trajectories(model, rho0, grid, 5000, engine, 1002)
            summ = summarize(batch)
            dist = trace_distance(summ.mean_state[-1], eta)
            worst = max(worst, dist)
            parts.append(f"{name}/{engine}={dist:.4f}")
            if engine == "posterior":
                BALANCE_SAMPLES.append((f"{name}/posterior", batch.states[:, -1], None))
            else:
                BALANCE_SAMPLES.append((f"{name}/linear", batch.states[:, -1, 0], batch.weights[:, -1, 0]))
    ok = worst <= 0.02
    record(2, ok, f"max trace distance {worst:.4f} (" + ", ".join(parts) + ")")
    assert ok


def _coupled_paths(model, rho0, dt, n, seed):
    """Linear (normalized) and posterior solutions driven by one recorded output.

    The record is produced by a free-running posterior simulation; both
    engines then integrate that same record.
    """
    grid = TimeGrid(1.0, dt, stride=max(1, int(round(0.01 / dt))))
    nk = len(model.jumps)
    dw, u = [], []
    for i in range(n):
        r = trajectory_rng(seed, i)
        dw.append(r.standard_normal((grid.n_steps, len(model.diffusive))) * np.sqrt(dt))
        u.append(r.random((grid.n_steps, nk)))
    free = _run_posterior(model, rho0, grid, np.array(dw), u=np.array(u), keep_increments=True)
    out_dw, out_dn = free["increments"]
    lin = _run_linear(model, np.asarray(rho0, complex)[None], grid, out_dw, out_dn)
    post = _run_posterior(model, rho0, grid, out_dw, dn=out_dn, scheme="milstein")
    sig = lin["states"][:, :, 0]
    w = lin["weights"][:, :, 0]
    rho_lin = sig / w[..., None, None]
    diff = rho_lin - post["states"]
    dist = 0.5 * np.abs(np.linalg.eigvalsh(0.5 * (diff + np.conj(np.swapaxes(diff, -1, -2))))).sum(-1)
    return dist.max(axis=1)


def test_criterion_03_pathwise_coupling():
    parts, ok = [], True
    for name, (model, rho0) in suite().items():
        err = {dt: _coupled_paths(model, rho0, dt, 100, 1003) for dt in (1e-4, 1e-3)}
        fine, coarse = err[1e-4].max(), err[1e-3].max()
        good = fine <= 5e-3 and coarse <= 2e-2
        order_txt = "n/a"
        if coarse > 1e-12:
            order = np.log10(err[1e-3].mean() / err[1e-4].mean())
            good &= order >= 0.5
            order_txt = f"{order:.2f}"
        ok &= good
        parts.append(f"{name}: sup {fine:.2e}@1e-4, {coarse:.2e}@1e-3, order {order_txt}")
    record(3, ok, "; ".join(parts))
    assert ok


def test_criterion_04_first_moments():
    w_quad, _ = mean_outputs(decay_homodyne(), PLUS, 1.0)
    _, n_quad = mean_outputs(decay_counting(), EXCITED, 1.0)
    w_quad, n_quad = float(w_quad[0]), float(n_quad[0])
    quad_ok = (abs(w_quad - oracles.decay_mean_homodyne(1.0)) <= 1e-6
               and abs(n_quad - oracles.decay_mean_counts(1.0)) <= 1e-6)
    grid = TimeGrid(1.0, 1e-3, stride=1000)
    mc_w = mc_output_moments(decay_homodyne(), PLUS, grid, 5000, 1004)
    mc_n = mc_output_moments(decay_counting(), EXCITED, grid, 5000, 1004)
    zw = abs(mc_w["mean"][-1, 0] - w_quad) / mc_w["mean_se"][-1, 0]
    zn = abs(mc_n["mean"][-1, 0] - n_quad) / mc_n["mean_se"][-1, 0]
    ok = quad_ok and zw <= 3 and zn <= 3
    record(4, ok, f"E[W(1)] quad {w_quad:.8f} mc {mc_w['mean'][-1, 0]:.4f} (z={zw:.2f}); "
                  f"E[N(1)] quad {n_quad:.8f} mc {mc_n['mean'][-1, 0]:.4f} (z={zn:.2f})")
    assert ok


def _test_functions():
    dt = 1e-3
    m1 = decay_homodyne()
    m2 = driven_mixed()
    m3 = decay_counting()
    return [
        ("decay/h=1", m1, PLUS, TestFunction.constant(m1, 1.0, dt, diffusive=[1.0])),
        ("mixed/sin,0.5", m2, EXCITED,
         TestFunction.from_callables(m2, 1.0, dt, diffusive=[lambda t: np.sin(2 * np.pi * t)],
                                     jump=[lambda t: 0.5])),
        ("counting/h=1.5", m3, EXCITED, TestFunction.constant(m3, 1.0, dt, jump=[1.5])),
    ]


def test_criterion_05_characteristic_operator():
    parts, ok = [], True
    for name, model, rho0, h in _test_functions():
        g = evolve_characteristic(model, h, rho0, 1.0)
        est, se = mc_characteristic(model, h, rho0, 1.0, 10_000, 1005)
        dev = abs(np.trace(g) - est)
        zero = TestFunction(h.dt, np.zeros_like(h.diffusive), np.zeros_like(h.jump))
        g0 = evolve_characteristic(model, zero, rho0, 1.0)
        dev0 = trace_distance(g0, evolve_master(model, rho0, 1.0))
        good = dev <= 0.02 and dev0 <= 1e-8
        ok &= good
        parts.append(f"{name}: |dTr|={dev:.4f} (se {se:.4f}), h=0 {dev0:.1e}")
    record(5, ok, "; ".join(parts))
    assert ok


def test_criterion_06_second_moment():
    model = decay_homodyne()
    formula = second_moment(model, PLUS, (0, "diffusive"), (0, "diffusive"), 1.0, 1.0)
    grid = TimeGrid(1.0, 1e-3, stride=1000)
    mc = mc_output_moments(model, PLUS, grid, 10_000, 1006)
    est, se = mc["second"][-1, 0], mc["second_se"][-1, 0]
    rel = abs(est - formula) / formula
    ok = rel <= 0.05
    record(6, ok, f"formula {formula:.4f}, mc {est:.4f}+-{se:.4f}, rel {rel:.3%}")
    assert ok


def test_criterion_07_entropy_balance():
    grid = TimeGrid(1.0, 1e-3, stride=250)
    samples = list(BALANCE_SAMPLES)
    for name, (model, rho0) in {**suite(), "qnd": (qnd(), MIXED)}.items():
        batch = run_trajectories(model, MIXED if name == "qnd" else rho0, grid, 500, "posterior", 1007)
        for s in range(batch.states.shape[1]):
            samples.append((f"{name}/t{s}", batch.states[:, s], None))
    worst = 0.0
    for _, states, w in samples:
        if w is not None:
            keep = w > 0
            states = states[keep] / w[keep, None, None]
            w = w[keep]
        lhs, rhs = entropy_balance(states, w)
        worst = max(worst, abs(lhs - rhs))
    ok = worst <= 1e-8
    record(7, ok, f"max residual {worst:.2e} over {len(samples)} ensembles")
    assert ok


def test_criterion_08_classical_information_monotone_and_rate():
    model = qnd()
    grid = TimeGrid(0.8, 1e-3, stride=50)
    ci = classical_information(model, MIXED, grid, 32_000, 1008, measure="posterior")
    steps = np.diff(ci.value[1:])
    mono = bool(np.all(steps >= -3 * ci.se[2:]))
    h = 0.1
    i_lo, i_mid, i_hi = grid.index_of(0.5 - h), grid.index_of(0.5), grid.index_of(0.5 + h)
    fd = (ci.value[i_hi] - ci.value[i_lo]) / (2 * h)
    rate = ci.rate[i_mid]
    rel = abs(rate - fd) / abs(fd)
    ok = mono and rel <= 0.05 and len(ci.times) - 1 == 16
    record(8, ok, f"monotone over 16 times: {mono}; rate {rate:.4f}+-{ci.rate_se[i_mid]:.4f} vs "
                  f"finite difference {fd:.4f} (rel {rel:.2%}; oracle rate "
                  f"{oracles.qnd_classical_information_rate(0.5):.4f})")
    assert ok


def test_criterion_09_classifier():
    z = np.zeros((2, 2))
    models = [
        MeasurementModel(H=z, unobserved=[np.sqrt(0.5) * pauli("z")]),
        MeasurementModel(H=z, jumps=[([sigma_minus()], 1.0)]),
        MeasurementModel(H=z, jumps=[([np.array([[0, 0], [1, 0]]), np.array([[0, 0], [0, 1]])], 1.0)]),
    ]
    v = [check_quasi_complete(m) for m in models]
    ok = (not v[0].quasi_complete and v[1].quasi_complete and v[1].classification == ["A1"]
          and v[2].quasi_complete and v[2].classification == ["A2"]
          and np.allclose(v[2].projections[0], pure_state([0, 1])))
    record(9, ok, f"{[(x.quasi_complete, x.classification) for x in v]}")
    assert ok


def test_criterion_10_purification_and_information():
    model = qnd()
    grid = TimeGrid(8.0, 1e-3, stride=500)
    rep = info_report(model, MIXED, grid, 2000, 1010)
    final_deficit = rep.purity_deficit[-1]
    final_info = rep.information[-1]
    combined = 3 * np.sqrt(rep.information_se ** 2 + rep.classical_se ** 2)
    dominance = bool(np.all(rep.information >= rep.classical - combined))
    nonneg = bool(np.all(rep.information >= -3 * rep.information_se - 1e-12)
                  and np.all(rep.classical >= -3 * rep.classical_se - 1e-12))
    rng = np.random.default_rng(1010)
    pure_worst = 0.0
    short = TimeGrid(1.0, 1e-3, stride=100)
    for m in (qnd(), decay_homodyne(), decay_counting(), driven_mixed()):
        for _ in range(5):
            v = rng.standard_normal(2) + 1j * rng.standard_normal(2)
            batch = run_trajectories(m, pure_state(v), short, 20, "posterior", 1010)
            deficit = 1 - np.einsum("bsij,bsji->bs", batch.states, batch.states).real
            pure_worst = max(pure_worst, float(deficit.max()))
    pure_ok = pure_worst <= 10 * 1e-10
    ok = (final_deficit <= 0.05 and abs(final_info - np.log(2)) <= 0.05 and dominance and nonneg
          and pure_ok)
    record(10, ok, f"final deficit {final_deficit:.2e} (oracle {oracles.qnd_purity_deficit(8.0):.1e}); "
                   f"I(8)={final_info:.4f} vs ln2; I>=c-I-3se: {dominance}; nonneg: {nonneg}; "
                   f"pure-start max deficit {pure_worst:.1e}")
    assert ok


def test_criterion_11_determinism(tmp_path):
    grid = TimeGrid(0.5, 1e-3, stride=50)
    model, rho0 = driven_mixed(), EXCITED
    same = True
    for engine in ("linear", "posterior"):
        a = run_trajectories(model, rho0, grid, 600, engine, 1011, n_jobs=1)
        b = run_trajectories(model, rho0, grid, 600, engine, 1011, n_jobs=2)
        for name in ("states", "weights", "wtilde", "counts", "m", "nu"):
            same &= getattr(a, name).tobytes() == getattr(b, name).tobytes()
    from contmeas.cli import main
    from contmeas.io import emit_model

    path = tmp_path / "model.json"
    path.write_text(emit_model(model, rho0))
    outs = []
    for par, sub in ((1, "a"), (2, "b")):
        code = main(["ensemble", "--model", str(path), "--t-max", "0.5", "--stride", "100",
                     "--n", "600", "--seed", "1011", "--parallel", str(par), "--out", str(tmp_path / sub)])
        assert code == 0
        outs.append((tmp_path / sub / "ensemble.csv").read_bytes())
    cli_same = outs[0] == outs[1]
    ok = same and cli_same
    record(11, ok, f"arrays identical across n_jobs=1/2: {same}; CLI CSV byte-identical: {cli_same}")
    assert ok


def test_qnd_information_matches_oracle():
    # supplementary check of the information report against the scalar oracle
    grid = TimeGrid(1.0, 1e-3, stride=250)
    rep = info_report(qnd(), MIXED, grid, 1000, 2001)
    for t in (0.25, 0.5, 1.0):
        i = grid.index_of(t)
        assert abs(rep.information[i] - oracles.qnd_information_gain(t)) <= 4 * rep.information_se[i]
        assert abs(rep.classical[i] - oracles.qnd_classical_information(t)) <= 4 * rep.classical_se[i]
        assert abs(rep.purity_deficit[i] - oracles.qnd_purity_deficit(t)) <= 4 * rep.purity_deficit_se[i]
