"""Output statistics from the a priori dynamics.

The characteristic operator ``G_t(h)[rho]`` is integrated with fixed-step RK4;
first and second output moments come from quadrature over master-equation
samples and are cross-checked against Monte Carlo estimates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import cumulative_simpson, simpson

from contmeas.lindblad import generator_matrix, master_series, propagator, vec
from contmeas.operators import MeasurementModel, NumericalError, dagger, validate_state
from contmeas.trajectories import TimeGrid, run_trajectories

DIFFUSIVE, JUMP = 1, 2
_TYPES = {1: DIFFUSIVE, 2: JUMP, "diffusive": DIFFUSIVE, "jump": JUMP, "W": DIFFUSIVE, "N": JUMP}


@dataclass(frozen=True)
class TestFunction:
    """Piecewise-constant test functions on a step grid.

    ``diffusive[i, j]`` is the value for diffusive channel ``j`` on step
    ``[i dt, (i + 1) dt)``; ``jump[i, k]`` likewise for counting channel ``k``.
    """

    __test__ = False  # not a pytest class

    dt: float
    diffusive: np.ndarray
    jump: np.ndarray

    @property
    def t_max(self) -> float:
        return self.diffusive.shape[0] * self.dt

    @classmethod
    def from_callables(cls, model: MeasurementModel, t_max: float, dt: float,
                       diffusive=(), jump=()) -> "TestFunction":
        """Sample callables at the left end of each step; missing channels are zero."""
        n = TimeGrid(t_max, dt).n_steps
        ts = np.arange(n) * dt
        hd = np.zeros((n, len(model.diffusive)))
        hj = np.zeros((n, len(model.jumps)))
        for j, f in enumerate(diffusive):
            hd[:, j] = np.broadcast_to(np.vectorize(f, otypes=[float])(ts), (n,))
        for k, f in enumerate(jump):
            hj[:, k] = np.broadcast_to(np.vectorize(f, otypes=[float])(ts), (n,))
        return cls(dt=dt, diffusive=hd, jump=hj)

    @classmethod
    def constant(cls, model: MeasurementModel, t_max: float, dt: float,
                 diffusive=(), jump=()) -> "TestFunction":
        return cls.from_callables(model, t_max, dt, [lambda t, v=v: v for v in diffusive],
                                  [lambda t, v=v: v for v in jump])

    def at_step(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.diffusive[i], self.jump[i]


def _k_apply(model, lt, hd, hj, x, base):
    out = base(x)
    for j in range(len(model.diffusive)):
        if hd[j]:
            out = out + 1j * hd[j] * (lt[j] @ x + x @ dagger(lt[j])) - 0.5 * hd[j] ** 2 * x
    for k, ch in enumerate(model.jumps):
        if hj[k]:
            out = out + (np.exp(1j * hj[k]) - 1.0) * ch.apply(x)
    return out


def characteristic_series(model: MeasurementModel, h: TestFunction, rho0, t: float) -> np.ndarray:
    """``G_s(h)[rho0]`` at every step ``s = 0, dt, ..., t``."""
    rho0, _ = validate_state(rho0)
    dt = h.dt
    n = TimeGrid(t, dt).n_steps if t > 0 else 0
    if n > h.diffusive.shape[0]:
        raise ValueError("t exceeds the range of the test function")
    d = model.dim
    gen = generator_matrix(model)
    gen_norm = float(np.linalg.norm(gen, 2))

    def base(x):
        return (gen @ x.reshape(-1, order="F")).reshape(d, d, order="F")

    omegas = np.array([c.omega for c in model.diffusive])
    Ls = [c.L for c in model.diffusive]
    kraus_norm = [sum(np.linalg.norm(r, 2) ** 2 for r in c.kraus) for c in model.jumps]
    l_norm = [np.linalg.norm(L, 2) for L in Ls]

    def lt_at(s):
        return [np.exp(1j * w * s) * L for w, L in zip(omegas, Ls)]

    out = np.empty((n + 1, d, d), dtype=complex)
    out[0] = g = rho0.astype(complex)
    log_bound = 0.0
    for i in range(n):
        s = i * dt
        hd, hj = h.at_step(i)
        c = gen_norm + sum(2 * abs(a) * ln + 0.5 * a * a for a, ln in zip(hd, l_norm))
        c += sum(abs(np.exp(1j * b) - 1) * kn for b, kn in zip(hj, kraus_norm))
        if c * dt > 2.5:
            raise NumericalError(f"RK4 step unstable: |K| dt = {c * dt:.3g}; reduce dt")
        log_bound += c * dt
        k1 = _k_apply(model, lt_at(s), hd, hj, g, base)
        lm = lt_at(s + 0.5 * dt)
        k2 = _k_apply(model, lm, hd, hj, g + 0.5 * dt * k1, base)
        k3 = _k_apply(model, lm, hd, hj, g + 0.5 * dt * k2, base)
        k4 = _k_apply(model, lt_at(s + dt), hd, hj, g + dt * k3, base)
        g = g + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if np.linalg.norm(g) > np.linalg.norm(rho0) * np.exp(log_bound) * (1 + 1e-6):
            raise NumericalError(f"characteristic operator grew beyond its a priori bound at t={s + dt:.4g}")
        out[i + 1] = g
    return out


def evolve_characteristic(model: MeasurementModel, h: TestFunction, rho0, t: float) -> np.ndarray:
    """Characteristic operator ``G_t(h)[rho0]``; its trace is the characteristic functional."""
    return characteristic_series(model, h, rho0, t)[-1]


def mc_characteristic(model: MeasurementModel, h: TestFunction, rho0, t: float, n: int,
                      seed: int = 0, engine: str = "posterior", n_jobs: int = 1):
    """Monte Carlo characteristic functional and its standard error.

    Under the physical law (``engine="posterior"``, the default) the sample is
    ``exp(i Phi)``; under the reference measure (``engine="linear"``) it is
    ``exp(i Phi) ||sigma_t||``, which is unbiased as well but noisier because
    the weights are heavy-tailed.  ``Phi`` sums ``h`` against the output
    increments.
    """
    grid = TimeGrid(t, h.dt, stride=TimeGrid(t, h.dt).n_steps)
    batch = run_trajectories(model, rho0, grid, n, engine, seed, n_jobs, test_function=h)
    vals = np.exp(1j * batch.phase)
    if engine == "linear":
        vals = vals * batch.weights[:, -1, 0]
    est = complex(vals.mean())
    se = float(np.sqrt(vals.real.var(ddof=1) + vals.imag.var(ddof=1)) / np.sqrt(n)) if n > 1 else None
    return est, se


def _signal_ops(model, s):
    """Observables whose expectation gives the output intensities at time ``s``."""
    diff = [c.modulated(s) + dagger(c.modulated(s)) for c in model.diffusive]
    return diff, [c.effect for c in model.jumps]


def mean_output_series(model: MeasurementModel, rho0, t: float, dt: float = 1e-3):
    """Times and cumulative means ``E[W~_j(s)]``, ``E[N_k(s)]`` on the grid ``0..t``."""
    eta = master_series(model, rho0, t, dt) if t > 0 else validate_state(rho0)[0][None]
    ts = np.arange(eta.shape[0]) * dt
    nd, nk = len(model.diffusive), len(model.jumps)
    rates = np.empty((len(ts), nd + nk))
    for i, s in enumerate(ts):
        diff, eff = _signal_ops(model, s)
        rates[i] = [np.trace(o @ eta[i]).real for o in diff + eff]
    if len(ts) < 2:
        return ts, np.zeros((1, nd)), np.zeros((1, nk))
    cum = np.concatenate([np.zeros((1, nd + nk)), cumulative_simpson(rates, x=ts, axis=0)])
    return ts, cum[:, :nd], cum[:, nd:]


def mean_outputs(model: MeasurementModel, rho0, t: float, dt: float = 1e-3):
    """``([E W~_j(t)], [E N_k(t)])`` by composite Simpson quadrature."""
    if t == 0:
        return [0.0] * len(model.diffusive), [0.0] * len(model.jumps)
    eta = master_series(model, rho0, t, dt)
    ts = np.arange(eta.shape[0]) * dt
    nd = len(model.diffusive)
    vals = []
    for s, e in zip(ts, eta):
        diff, eff = _signal_ops(model, s)
        vals.append([np.trace(o @ e).real for o in diff + eff])
    totals = simpson(np.array(vals), x=ts, axis=0) if vals and vals[0] else []
    totals = list(map(float, totals))
    return totals[:nd], totals[nd:]


def _parse_channel(model, which):
    ch, typ = which
    typ = _TYPES[typ]
    count = len(model.diffusive) if typ == DIFFUSIVE else len(model.jumps)
    if not 0 <= ch < count:
        raise ValueError(f"channel {ch} out of range for type {typ}")
    return ch, typ


def _functional_rows(model, ch, typ, ts):
    """Row vectors ``r(s)`` with ``Tr{A(s)[X]} = r(s) @ vec(X)``."""
    rows = []
    for s in ts:
        diff, eff = _signal_ops(model, s)
        op = diff[ch] if typ == DIFFUSIVE else eff[ch]
        rows.append(vec(op.T))
    return np.array(rows)


def _applied(model, ch, typ, ts, eta):
    """``vec(A(s)[eta_s])`` for each grid time."""
    out = []
    for s, e in zip(ts, eta):
        if typ == DIFFUSIVE:
            lt = model.diffusive[ch].modulated(s)
            x = lt @ e + e @ dagger(lt)
        else:
            x = model.jumps[ch].apply(e)
        out.append(vec(x))
    return np.array(out)


def _nested(rows_outer, vecs_inner, powers, ts, t_idx, s_idx):
    """``int_0^t dt1 int_0^{min(s, t1)} dt2 r(t1) P(t1 - t2) v(t2)``."""
    inner = np.zeros(t_idx + 1)
    for i in range(1, t_idx + 1):
        u = min(i, s_idx)
        if u == 0:
            continue
        ks = np.arange(u + 1)
        f = np.einsum("a,kab,kb->k", rows_outer[i], powers[i - ks], vecs_inner[ks]).real
        inner[i] = simpson(f, x=ts[: u + 1]) if u >= 2 else 0.5 * (f[0] + f[1]) * ts[1]
    if t_idx == 0:
        return 0.0
    if t_idx == 1:
        return 0.5 * (inner[0] + inner[1]) * ts[1]
    return float(simpson(inner, x=ts[: t_idx + 1]))


def second_moment(model: MeasurementModel, rho0, a, b, t: float, s: float,
                  dt: float = 1e-3) -> float:
    """``E[X_a(t) X_b(s)]`` for outputs ``a = (channel, type)`` and ``b``.

    ``type`` is ``1``/``"diffusive"`` for the Wiener-type output and
    ``2``/``"jump"`` for the counting output.
    """
    ja, ta = _parse_channel(model, a)
    jb, tb = _parse_channel(model, b)
    if t < 0 or s < 0:
        raise ValueError("times must be non-negative")
    T = max(t, s)
    if T == 0:
        return 0.0
    eta = master_series(model, rho0, T, dt)
    n = eta.shape[0] - 1
    ts = np.arange(n + 1) * dt
    t_idx, s_idx = int(round(t / dt)), int(round(s / dt))
    step = propagator(model, dt)
    powers = np.empty((n + 1,) + step.shape, dtype=complex)
    powers[0] = np.eye(step.shape[0])
    for k in range(1, n + 1):
        powers[k] = step @ powers[k - 1]
    first = 0.0
    lo = min(t_idx, s_idx)
    if ja == jb and ta == tb and lo > 0:
        if ta == DIFFUSIVE:
            first = ts[lo]
        else:
            vals = np.array([np.trace(model.jumps[ja].apply(e)).real for e in eta[: lo + 1]])
            first = float(simpson(vals, x=ts[: lo + 1])) if lo >= 2 else 0.5 * (vals[0] + vals[1]) * dt
    rows_a, rows_b = _functional_rows(model, ja, ta, ts), _functional_rows(model, jb, tb, ts)
    vec_a, vec_b = _applied(model, ja, ta, ts, eta), _applied(model, jb, tb, ts, eta)
    second = _nested(rows_a, vec_b, powers, ts, t_idx, s_idx)
    third = _nested(rows_b, vec_a, powers, ts, s_idx, t_idx)
    return float(first + second + third)


def mc_output_moments(model: MeasurementModel, rho0, grid: TimeGrid, n: int, seed: int = 0,
                      n_jobs: int = 1):
    """Monte Carlo means and second moments of every output at the recorded times.

    Returns a dict with arrays of shape ``(samples, channels)`` under keys
    ``mean``, ``mean_se``, ``second``, ``second_se`` for the outputs ordered as
    all diffusive channels then all counting channels.
    """
    batch = run_trajectories(model, rho0, grid, n, "posterior", seed, n_jobs)
    x = np.concatenate([batch.wtilde, batch.counts.astype(float)], axis=-1)
    sq = x ** 2
    root_n = np.sqrt(n)
    return {
        "mean": x.mean(axis=0),
        "mean_se": x.std(axis=0, ddof=1) / root_n if n > 1 else None,
        "second": sq.mean(axis=0),
        "second_se": sq.std(axis=0, ddof=1) / root_n if n > 1 else None,
        "times": batch.times,
    }


def moment_table(model: MeasurementModel, rho0, grid: TimeGrid, n: int, seed: int = 0,
                 n_jobs: int = 1) -> list[dict]:
    """Rows ``(t, channel, type, mean, second_moment, mc_estimate, mc_se)``.

    ``mc_estimate``/``mc_se`` refer to the second moment; quadrature values use
    the simulation step.
    """
    mc = mc_output_moments(model, rho0, grid, n, seed, n_jobs) if n > 0 else None
    nd = len(model.diffusive)
    outputs = [(j, "diffusive") for j in range(nd)] + [(k, "jump") for k in range(len(model.jumps))]
    _, mean_w, mean_n = mean_output_series(model, rho0, grid.t_max, grid.dt)
    means = np.concatenate([mean_w, mean_n], axis=1)
    rows = []
    for s_i, (step, t) in enumerate(zip(grid.sample_steps, grid.times)):
        for c, (ch, typ) in enumerate(outputs):
            sm = second_moment(model, rho0, (ch, typ), (ch, typ), t, t, grid.dt) if t > 0 else 0.0
            rows.append({
                "t": float(t), "channel": ch, "type": typ, "mean": float(means[step, c]),
                "second_moment": sm,
                "mc_estimate": float(mc["second"][s_i, c]) if mc else float("nan"),
                "mc_se": float(mc["second_se"][s_i, c]) if mc and mc["second_se"] is not None else float("nan"),
            })
    return rows
