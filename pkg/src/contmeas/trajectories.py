"""Stochastic master equations: linear (reference measure Q) and a posteriori (P_rho).

Both engines advance a batch of trajectories in lock-step with numpy.  Every
trajectory owns an independent random stream seeded from
``(master_seed, index)``, so the result for a given index does not depend on
how trajectories are grouped into batches or spread over worker processes.

Step convention (both engines): jumps recorded in a step are applied to the
left-point state first, then the continuous increment is evaluated on the
result.  Channel phases ``exp(1j * omega * t)`` are taken at the left end of
the step.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from contmeas.operators import (
    MeasurementModel,
    NumericalError,
    dagger,
    hermitian_part,
    validate_state,
)

log = logging.getLogger(__name__)

CHUNK = 256
UNDERFLOW = 1e-300
THINNING_CAP = 0.1
REPAIR_TOL = 1e-10
TAYLOR_REPAIR_TOL = 1e-2
UNRELIABLE_FRACTION = 1e-3


@dataclass(frozen=True)
class TimeGrid:
    """Uniform step grid on ``[0, t_max]`` recorded every ``stride`` steps."""

    t_max: float
    dt: float = 1e-3
    stride: int = 1

    def __post_init__(self):
        if not (self.t_max > 0 and self.dt > 0):
            raise ValueError("t_max and dt must be positive")
        if int(self.stride) != self.stride or self.stride < 1:
            raise ValueError("stride must be a positive integer")
        n = round(self.t_max / self.dt)
        if n < 1 or abs(n * self.dt - self.t_max) > 1e-9 * self.t_max:
            raise ValueError(f"t_max={self.t_max} is not an integer multiple of dt={self.dt}")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_max / self.dt))

    @property
    def sample_steps(self) -> np.ndarray:
        steps = np.arange(0, self.n_steps + 1, self.stride)
        if steps[-1] != self.n_steps:
            steps = np.append(steps, self.n_steps)
        return steps

    @property
    def times(self) -> np.ndarray:
        return self.sample_steps * self.dt

    def index_of(self, t: float) -> int:
        """Position of time ``t`` among the recorded samples."""
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9 * max(1.0, t):
            raise ValueError(f"t={t} is not a recorded sample time")
        return i


def trajectory_rng(master_seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(int(master_seed), spawn_key=(int(index),)))


@dataclass(frozen=True)
class NoisePath:
    """Per-step driving increments of one trajectory.

    ``dw[i, j]`` is the increment of the output process of diffusive channel
    ``j`` over step ``i``; ``counts[i, k]`` the number of channel-``k`` events
    in that step.  ``jump_times`` keeps the exact event times when they are
    known (Poisson sampling under Q).
    """

    dw: np.ndarray
    counts: np.ndarray
    jump_times: tuple = ()
    seed: tuple = (None, None)

    @classmethod
    def sample_q(cls, model: MeasurementModel, grid: TimeGrid, master_seed: int = 0,
                 index: int = 0) -> "NoisePath":
        """Draw standard Wiener increments and Poisson events at the reference rates."""
        rng = trajectory_rng(master_seed, index)
        n = grid.n_steps
        dw = rng.standard_normal((n, len(model.diffusive))) * np.sqrt(grid.dt)
        counts = np.zeros((n, len(model.jumps)), dtype=np.int64)
        times = []
        for k, ch in enumerate(model.jumps):
            t_k = _poisson_times(rng, ch.rate, grid.t_max)
            times.append(t_k)
            steps = np.minimum((t_k / grid.dt).astype(np.int64), n - 1)
            counts[:, k] = np.bincount(steps, minlength=n)
        return cls(dw=dw, counts=counts, jump_times=tuple(times), seed=(master_seed, index))

    @classmethod
    def from_record(cls, record: "TrajectoryRecord", grid: TimeGrid) -> "NoisePath":
        """Increments of a record's outputs; needs a record sampled at every step."""
        if len(record.times) != grid.n_steps + 1:
            raise ValueError("record must be sampled with stride 1 to recover increments")
        return cls(dw=np.diff(record.wtilde, axis=0), counts=np.diff(record.counts, axis=0),
                   seed=record.seed)


def _poisson_times(rng, rate, t_max):
    out = []
    t = 0.0
    while True:
        gaps = rng.exponential(1.0 / rate, size=max(8, int(2 * rate * t_max) + 8))
        cand = t + np.cumsum(gaps)
        out.append(cand[cand < t_max])
        if cand[-1] >= t_max:
            return np.concatenate(out)
        t = cand[-1]


@dataclass
class TrajectoryRecord:
    """Sampled history of one trajectory.

    ``states`` holds sigma_t (linear engine) or rho_t (posterior engine);
    ``weights`` is the trace norm of sigma_t (all ones for the posterior
    engine).  ``m`` and ``nu`` are the posterior signals evaluated on the
    normalized state at each sample; ``w_shift`` is the output minus the time
    integral of ``m``.
    """

    engine: str
    times: np.ndarray
    states: np.ndarray
    weights: np.ndarray
    wtilde: np.ndarray
    counts: np.ndarray
    m: np.ndarray
    nu: np.ndarray
    w_shift: np.ndarray
    seed: tuple = (None, None)
    underflow: bool = False
    phase: complex | None = None


@dataclass
class Batch:
    """Stacked records: leading axis is the trajectory, then the sample index.

    The linear engine carries an extra component axis after the sample axis
    when several initial states share one noise stream.
    """

    engine: str
    times: np.ndarray
    states: np.ndarray
    weights: np.ndarray
    wtilde: np.ndarray
    counts: np.ndarray
    m: np.ndarray
    nu: np.ndarray
    w_shift: np.ndarray
    underflow: np.ndarray
    phase: np.ndarray | None
    indices: np.ndarray
    master_seed: int | None

    def __len__(self) -> int:
        return self.states.shape[0]

    def record(self, i: int) -> TrajectoryRecord:
        return TrajectoryRecord(
            engine=self.engine, times=self.times, states=self.states[i],
            weights=self.weights[i], wtilde=self.wtilde[i], counts=self.counts[i],
            m=self.m[i], nu=self.nu[i], w_shift=self.w_shift[i],
            seed=(self.master_seed, int(self.indices[i])), underflow=bool(self.underflow[i]),
            phase=None if self.phase is None else complex(self.phase[i]),
        )

    @staticmethod
    def concat(parts: list["Batch"]) -> "Batch":
        first = parts[0]

        def cat(name):
            return np.concatenate([getattr(p, name) for p in parts], axis=0)

        return Batch(
            engine=first.engine, times=first.times, states=cat("states"), weights=cat("weights"),
            wtilde=cat("wtilde"), counts=cat("counts"), m=cat("m"), nu=cat("nu"),
            w_shift=cat("w_shift"), underflow=cat("underflow"),
            phase=None if first.phase is None else cat("phase"),
            indices=cat("indices"), master_seed=first.master_seed,
        )


class _Kernel:
    """Model operators stacked for batched evaluation."""

    def __init__(self, model: MeasurementModel):
        d = model.dim
        self.model = model
        self.d = d
        self.H = model.H
        self.L = np.array([c.L for c in model.diffusive]).reshape(-1, d, d)
        self.omega = np.array([c.omega for c in model.diffusive], dtype=float)
        self.S = np.array(model.unobserved).reshape(-1, d, d)
        self.kraus = [np.array(c.kraus) for c in model.jumps]
        self.E = np.array([c.effect for c in model.jumps]).reshape(-1, d, d)
        self.rates = np.array([c.rate for c in model.jumps], dtype=float)
        g = np.zeros((d, d), dtype=complex)
        for a in list(self.L) + list(self.S):
            g = g + dagger(a) @ a
        g = g + self.E.sum(axis=0)
        self.K = 1j * self.H + 0.5 * g
        self.nd = len(self.L)
        self.nk = len(self.kraus)

    def modulated(self, t: float) -> np.ndarray:
        return np.exp(1j * self.omega * t)[:, None, None] * self.L

    def jump(self, k: int, x: np.ndarray) -> np.ndarray:
        out = np.zeros_like(x)
        for r in self.kraus[k]:
            out += r @ x @ dagger(r)
        return out

    def sandwich_sum(self, ops, x):
        out = np.zeros_like(x)
        for a in ops:
            out += a @ x @ dagger(a)
        return out

    def kraus_step(self, lt: np.ndarray, dwt: np.ndarray, dt: float) -> np.ndarray:
        """``1 - K dt + sum_j L_j dW_j + 1/2 sum_jl L_j L_l (dW_j dW_l - delta_jl dt)`` per trajectory."""
        B = dwt.shape[0]
        mk = np.broadcast_to(np.eye(self.d, dtype=complex) - self.K * dt, (B, self.d, self.d)).copy()
        for j in range(self.nd):
            mk += lt[j] * dwt[:, j, None, None]
            for l in range(self.nd):
                corr = dwt[:, j] * dwt[:, l] - (dt if j == l else 0.0)
                mk += 0.5 * (lt[j] @ lt[l]) * corr[:, None, None]
        return mk

    def no_jump_drift(self, x: np.ndarray) -> np.ndarray:
        """Generator without the jump images: ``-(K x + x K^dag) + sum L x L^dag + sum S x S^dag``."""
        return -(self.K @ x + x @ dagger(self.K)) + self.sandwich_sum(self.L, x) + self.sandwich_sum(self.S, x)

    def signals(self, rho: np.ndarray, t: float) -> tuple[np.ndarray, np.ndarray]:
        """``m_j`` and ``nu_k`` for states ``rho`` of shape ``(..., d, d)``."""
        lt = self.modulated(t)
        a = lt + dagger(lt)
        m = np.einsum("...ij,nji->...n", rho, a).real if self.nd else np.zeros(rho.shape[:-2] + (0,))
        nu = np.einsum("...ij,nji->...n", rho, self.E).real if self.nk else np.zeros(rho.shape[:-2] + (0,))
        return m, nu


def _trace(x):
    return np.trace(x, axis1=-2, axis2=-1)


def _trace_norms(x):
    return np.abs(np.linalg.eigvalsh(hermitian_part(x))).sum(axis=-1)


def _q_noise(model, grid, master_seed, indices):
    paths = [NoisePath.sample_q(model, grid, master_seed, i) for i in indices]
    return np.stack([p.dw for p in paths]), np.stack([p.counts for p in paths])


def _p_noise(model, grid, master_seed, indices):
    n, nd, nk = grid.n_steps, len(model.diffusive), len(model.jumps)
    dw, u = [], []
    for i in indices:
        rng = trajectory_rng(master_seed, i)
        dw.append(rng.standard_normal((n, nd)) * np.sqrt(grid.dt))
        u.append(rng.random((n, nk)))
    return np.stack(dw), np.stack(u)


def _phase_increment(test_function, step, dwt, dn):
    if test_function is None:
        return 0.0
    hd, hj = test_function.at_step(step)
    out = 0.0
    if hd.size:
        out = out + dwt @ hd
    if hj.size:
        out = out + dn @ hj
    return out


def _run_linear(model, rho0s, grid, dw, dn, scheme="kraus", test_function=None, u=None):
    """Integrate the linear equation for initial states ``rho0s`` of shape ``(C, d, d)``.

    ``scheme="kraus"`` maps ``x -> M x M^dag + dt sum S x S^dag`` with the
    second-order expansion ``M`` of the no-jump propagator (positivity
    preserving, Milstein-type); ``scheme="euler"`` is plain Euler-Maruyama.

    With ``u`` given, the output record is not drawn from the reference
    measure but from the a posteriori law of the last component: ``dw`` are
    then innovations, the output increment is ``dw + m dt`` and events are
    thinned with ``u < nu dt``.  Weight ratios between components stay exact
    while the absolute weights lose their reference-measure meaning.
    """
    kern = _Kernel(model)
    B, C, d = dw.shape[0], rho0s.shape[0], model.dim
    steps = grid.sample_steps
    S = len(steps)
    x = np.broadcast_to(rho0s, (B, C, d, d)).astype(complex).copy()
    states = np.empty((B, S, C, d, d), dtype=complex)
    weights = np.empty((B, S, C))
    wt = np.zeros((B, S, kern.nd))
    cnt = np.zeros((B, S, kern.nk), dtype=np.int64)
    m_rec = np.zeros((B, S, C, kern.nd))
    nu_rec = np.zeros((B, S, C, kern.nk))
    wsh = np.zeros((B, S, C, kern.nd))
    phase = np.zeros(B, dtype=complex) if test_function is not None else None
    cum_w = np.zeros((B, kern.nd))
    cum_n = np.zeros((B, kern.nk), dtype=np.int64)
    cum_m = np.zeros((B, C, kern.nd))
    dt = grid.dt

    s_next = 0
    for i in range(grid.n_steps + 1):
        t = i * dt
        w = _trace_norms(x)
        safe = np.where(w > 0, w, 1.0)
        m, nu = kern.signals(x / safe[..., None, None], t)
        if s_next < S and steps[s_next] == i:
            states[:, s_next], weights[:, s_next] = x, w
            m_rec[:, s_next], nu_rec[:, s_next] = m, nu
            wt[:, s_next], cnt[:, s_next] = cum_w, cum_n
            wsh[:, s_next] = cum_w[:, None, :] - cum_m
            s_next += 1
        if i == grid.n_steps:
            break
        if u is None:
            dwi, dni = dw[:, i], dn[:, i]
        else:
            dwi = dw[:, i] + m[:, -1] * dt
            dni = (u[:, i] < nu[:, -1] * dt).astype(np.int64)
            if kern.nk and np.any(nu[:, -1] * dt > THINNING_CAP):
                raise NumericalError("jump probability per step exceeds 0.1; reduce dt")
        if phase is not None:
            phase += _phase_increment(test_function, i, dwi, dni)
        for k in range(kern.nk):
            c = dni[:, k]
            for rep in range(int(c.max(initial=0))):
                sel = np.nonzero(c > rep)[0]
                x[sel] = kern.jump(k, x[sel]) / kern.rates[k]
        lt = kern.modulated(t)
        if scheme == "kraus":
            mk = kern.kraus_step(lt, dwi, dt)[:, None]
            x = (mk @ x @ dagger(mk) + kern.sandwich_sum(kern.S, x) * dt) * (1.0 + kern.rates.sum() * dt)
            x = hermitian_part(x)
        elif scheme == "euler":
            incr = (kern.no_jump_drift(x) + kern.rates.sum() * x) * dt
            for j in range(kern.nd):
                incr += (lt[j] @ x + x @ dagger(lt[j])) * dwi[:, j, None, None, None]
            x += incr
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
        cum_m += m * dt
        cum_w += dwi
        cum_n += dni
    underflow = np.any((weights < UNDERFLOW) & (weights > 0), axis=(1, 2))
    return dict(states=states, weights=weights, wtilde=wt, counts=cnt, m=m_rec, nu=nu_rec,
                w_shift=wsh, underflow=underflow, phase=phase)


def _run_posterior(model, rho0, grid, dw, u=None, dn=None, scheme="kraus",
                   repair_tol=None, test_function=None, keep_increments=False):
    """A posteriori states for a batch.

    Free-running mode (``u`` given): ``dw`` are increments of the innovation
    Wiener processes under P_rho and ``u`` uniform variates for jump thinning.
    Driven mode (``dn`` given): ``dw`` are output increments and ``dn`` event
    counts of an externally supplied record.
    """
    kern = _Kernel(model)
    B, d = dw.shape[0], model.dim
    driven = dn is not None
    if repair_tol is None:
        repair_tol = REPAIR_TOL if scheme == "kraus" else TAYLOR_REPAIR_TOL
    steps = grid.sample_steps
    S = len(steps)
    dt = grid.dt
    rho = np.broadcast_to(rho0, (B, d, d)).astype(complex).copy()
    states = np.empty((B, S, d, d), dtype=complex)
    wt = np.zeros((B, S, kern.nd))
    cnt = np.zeros((B, S, kern.nk), dtype=np.int64)
    m_rec = np.zeros((B, S, kern.nd))
    nu_rec = np.zeros((B, S, kern.nk))
    wsh = np.zeros((B, S, kern.nd))
    phase = np.zeros(B, dtype=complex) if test_function is not None else None
    inc_w = np.empty((B, grid.n_steps, kern.nd)) if keep_increments else None
    inc_n = np.empty((B, grid.n_steps, kern.nk), dtype=np.int64) if keep_increments else None
    cum_w = np.zeros((B, kern.nd))
    cum_n = np.zeros((B, kern.nk), dtype=np.int64)
    cum_shift = np.zeros((B, kern.nd))
    s_next = 0
    for i in range(grid.n_steps + 1):
        t = i * dt
        m, nu = kern.signals(rho, t)
        if s_next < S and steps[s_next] == i:
            states[:, s_next] = rho
            m_rec[:, s_next], nu_rec[:, s_next] = m, nu
            wt[:, s_next], cnt[:, s_next], wsh[:, s_next] = cum_w, cum_n, cum_shift
            s_next += 1
        if i == grid.n_steps:
            break
        if kern.nk and np.max(nu) * dt > THINNING_CAP:
            raise NumericalError(
                f"jump probability per step {np.max(nu) * dt:.3g} exceeds {THINNING_CAP}; reduce dt")
        if driven:
            dwt = dw[:, i]
            dni = dn[:, i]
        else:
            dwt = dw[:, i] + m * dt
            dni = (u[:, i] < nu * dt).astype(np.int64)
        if phase is not None:
            phase += _phase_increment(test_function, i, dwt, dni)
        if keep_increments:
            inc_w[:, i], inc_n[:, i] = dwt, dni
        cum_shift += dwt - m * dt
        cum_w += dwt
        cum_n += dni
        for k in range(kern.nk):
            c = dni[:, k]
            for rep in range(int(c.max(initial=0))):
                sel = np.nonzero(c > rep)[0]
                img = kern.jump(k, rho[sel])
                tr = _trace(img).real
                ok = tr > 0
                # events where the intensity vanishes leave the state unchanged
                rho[sel[ok]] = img[ok] / tr[ok, None, None]
        lt = kern.modulated(t)
        if scheme == "kraus":
            mk = kern.kraus_step(lt, dwt, dt)
            new = mk @ rho @ dagger(mk) + kern.sandwich_sum(kern.S, rho) * dt
            new = hermitian_part(new)
            rho = new / _trace(new).real[:, None, None]
        elif scheme in ("euler", "milstein"):
            rho = _repair(_taylor_step(kern, rho, lt, t, dwt, dt, scheme == "milstein"), repair_tol)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    out = dict(states=states, weights=np.ones((B, S)), wtilde=wt, counts=cnt, m=m_rec,
               nu=nu_rec, w_shift=wsh, underflow=np.zeros(B, dtype=bool), phase=phase)
    if keep_increments:
        out["increments"] = (inc_w, inc_n)
    return out


def _taylor_step(kern, rho, lt, t, dwt, dt, milstein):
    """Ito-Taylor step of the nonlinear equation in innovation form.

    Coefficients are evaluated on the (post-jump) left-point state; the
    innovation increment is ``dW_j = dW~_j - m_j dt``.
    """
    m, nu = kern.signals(rho, t)
    dw = dwt - m * dt
    new = rho + (kern.no_jump_drift(rho) + nu.sum(axis=-1)[:, None, None] * rho) * dt
    a_ops = lt + dagger(lt)
    b = []
    for j in range(kern.nd):
        b.append(lt[j] @ rho + rho @ dagger(lt[j]) - m[:, j, None, None] * rho)
        new += b[j] * dw[:, j, None, None]
    if milstein:
        for j in range(kern.nd):
            for l in range(kern.nd):
                corr = dw[:, j] * dw[:, l] - (dt if j == l else 0.0)
                ab = lt[j] @ b[l] + b[l] @ dagger(lt[j])
                tr_ab = np.einsum("bij,ji->b", b[l], a_ops[j]).real
                deriv = ab - tr_ab[:, None, None] * rho - m[:, j, None, None] * b[l]
                new += 0.5 * deriv * corr[:, None, None]
    return new


def _repair(x, tol):
    x = hermitian_part(x)
    evals, evecs = np.linalg.eigh(x)
    worst = evals[..., 0].min()
    if worst < -tol:
        raise NumericalError(f"state repair {-worst:.3g} exceeds tolerance {tol:.3g}; reduce dt")
    evals = np.clip(evals, 0.0, None)
    evals /= evals.sum(axis=-1, keepdims=True)
    return (evecs * evals[..., None, :]) @ dagger(evecs)


def _chunk_task(args):
    (engine, model, rho0, grid, master_seed, indices, opts) = args
    if engine == "linear" and opts.get("measure", "reference") == "posterior":
        dw, u = _p_noise(model, grid, master_seed, indices)
        out = _run_linear(model, rho0, grid, dw, None, scheme=opts.get("scheme", "kraus"),
                          test_function=opts.get("test_function"), u=u)
    elif engine == "linear":
        dw, dn = _q_noise(model, grid, master_seed, indices)
        out = _run_linear(model, rho0, grid, dw, dn, scheme=opts.get("scheme", "kraus"),
                          test_function=opts.get("test_function"))
    else:
        dw, u = _p_noise(model, grid, master_seed, indices)
        out = _run_posterior(model, rho0, grid, dw, u=u, scheme=opts.get("scheme", "kraus"),
                             repair_tol=opts.get("repair_tol"),
                             test_function=opts.get("test_function"))
    return Batch(engine=engine, times=grid.times, indices=np.asarray(indices),
                 master_seed=master_seed, **out)


def run_trajectories(model: MeasurementModel, rho0, grid: TimeGrid, n: int,
                     engine: str = "posterior", master_seed: int = 0, n_jobs: int = 1,
                     components=None, **opts) -> Batch:
    """Simulate trajectories ``0..n-1`` and return the stacked records.

    For ``engine="linear"`` the initial condition may be a stack of states
    (``components``) sharing each noise path; the resulting arrays carry a
    component axis.  Work is split into fixed chunks of ``CHUNK``
    trajectories, so ``n_jobs`` only affects wall time.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    if engine not in ("linear", "posterior"):
        raise ValueError("engine must be 'linear' or 'posterior'")
    if engine == "linear":
        init = np.asarray(components if components is not None else [rho0], dtype=complex)
        for c in init:
            validate_state(c)
    else:
        init, _ = validate_state(rho0)
    chunks = [list(range(a, min(a + CHUNK, n))) for a in range(0, n, CHUNK)]
    tasks = [(engine, model, init, grid, master_seed, idx, opts) for idx in chunks]
    if n_jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as pool:
            parts = list(pool.map(_chunk_task, tasks))
    else:
        parts = [_chunk_task(t) for t in tasks]
    return Batch.concat(parts)


def _single(batch: Batch) -> TrajectoryRecord:
    rec = batch.record(0)
    if batch.engine == "linear":
        rec.states, rec.weights = rec.states[:, 0], rec.weights[:, 0]
        rec.m, rec.nu, rec.w_shift = rec.m[:, 0], rec.nu[:, 0], rec.w_shift[:, 0]
    return rec


def simulate_linear(model: MeasurementModel, rho0, grid: TimeGrid, noise: NoisePath | None = None,
                    seed: int = 0, index: int = 0, scheme: str = "kraus") -> TrajectoryRecord:
    """One path of the linear equation under the reference measure.

    ``noise`` defaults to ``NoisePath.sample_q(model, grid, seed, index)``.
    """
    rho0, _ = validate_state(rho0)
    if noise is None:
        noise = NoisePath.sample_q(model, grid, seed, index)
    out = _run_linear(model, rho0[None], grid, noise.dw[None], noise.counts[None], scheme=scheme)
    batch = Batch(engine="linear", times=grid.times, indices=np.array([noise.seed[1] or 0]),
                  master_seed=noise.seed[0], **out)
    rec = _single(batch)
    if rec.underflow:
        log.warning("trajectory %s: weight underflow", noise.seed)
    return rec


def simulate_posterior(model: MeasurementModel, rho0, grid: TimeGrid, seed: int = 0,
                       index: int = 0, noise: NoisePath | None = None, scheme: str = "kraus",
                       repair_tol: float | None = None, return_noise: bool = False):
    """One a posteriori trajectory.

    Without ``noise`` the output is sampled under the physical law (innovation
    increments plus jump thinning with probability ``nu_k dt``).  With
    ``noise`` the state is driven by the given output record, which is how
    the filter is coupled to a path of the linear equation.
    """
    rho0, _ = validate_state(rho0)
    if noise is not None:
        out = _run_posterior(model, rho0, grid, noise.dw[None], dn=noise.counts[None],
                             scheme=scheme, repair_tol=repair_tol, keep_increments=return_noise)
        seed_tuple = noise.seed
    else:
        dw, u = _p_noise(model, grid, seed, [index])
        out = _run_posterior(model, rho0, grid, dw, u=u, scheme=scheme, repair_tol=repair_tol,
                             keep_increments=return_noise)
        seed_tuple = (seed, index)
    incs = out.pop("increments", None)
    batch = Batch(engine="posterior", times=grid.times, indices=np.array([seed_tuple[1] or 0]),
                  master_seed=seed_tuple[0], **out)
    rec = batch.record(0)
    if return_noise:
        return rec, NoisePath(dw=incs[0][0], counts=incs[1][0], seed=seed_tuple)
    return rec


def normalize_path(record: TrajectoryRecord) -> TrajectoryRecord:
    """Divide each sampled linear state by its trace norm."""
    if record.engine != "linear":
        raise ValueError("normalize_path expects a linear-engine record")
    w = np.asarray(record.weights)
    if np.any(w <= 0):
        raise ValueError("cannot normalize a path with zero weight")
    states = record.states / w.reshape(w.shape + (1, 1))
    return replace(record, engine="normalized", states=states)


@dataclass
class EnsembleSummary:
    """Means over trajectories at each recorded time.

    ``measure`` is ``"Q"`` for the linear engine and ``"P"`` for the posterior
    engine.  Purity and entropy means are always expectations under the
    physical law; under Q they are reweighted by the trace norm.  Standard
    errors are ``None`` for a single trajectory.
    """

    measure: str
    n: int
    times: np.ndarray
    mean_state: np.ndarray
    se_state: np.ndarray | None
    mean_weight: np.ndarray
    se_weight: np.ndarray | None
    mean_purity: np.ndarray
    se_purity: np.ndarray | None
    mean_entropy: np.ndarray
    se_entropy: np.ndarray | None
    n_excluded: int = 0
    unreliable: bool = False
    master_seed: int | None = None


def _mean_se(values: np.ndarray):
    n = values.shape[0]
    mean = values.mean(axis=0)
    if n < 2:
        return mean, None
    return mean, values.std(axis=0, ddof=1) / np.sqrt(n)


def summarize(batch: Batch) -> EnsembleSummary:
    from contmeas.info import entropy_batch

    keep = ~batch.underflow
    n_excl = int(np.sum(~keep))
    if batch.engine == "linear":
        states = batch.states[keep][:, :, 0]
        w = batch.weights[keep][:, :, 0]
    else:
        states = batch.states[keep]
        w = batch.weights[keep]
    if states.shape[0] == 0:
        raise NumericalError("every trajectory was excluded")
    safe = np.where(w > 0, w, 1.0)[..., None, None]
    rho = states / safe
    purity = np.einsum("...ij,...ji->...", rho, rho).real
    ent = entropy_batch(rho)
    mean_state, se_state = _mean_se(states)
    if se_state is not None:
        se_state = _mean_se(states.real)[1] + 1j * _mean_se(states.imag)[1]
    mw, sw = _mean_se(w)
    mp, sp = _mean_se(w * purity)
    me, se = _mean_se(w * ent)
    frac = n_excl / len(batch)
    if n_excl:
        log.warning("%d of %d trajectories excluded after weight underflow", n_excl, len(batch))
    return EnsembleSummary(
        measure="Q" if batch.engine == "linear" else "P", n=int(states.shape[0]),
        times=batch.times, mean_state=mean_state, se_state=se_state, mean_weight=mw,
        se_weight=sw, mean_purity=mp, se_purity=sp, mean_entropy=me, se_entropy=se,
        n_excluded=n_excl, unreliable=frac > UNRELIABLE_FRACTION, master_seed=batch.master_seed,
    )


def run_ensemble(model: MeasurementModel, rho0, grid: TimeGrid, n: int, engine: str = "posterior",
                 master_seed: int = 0, n_jobs: int = 1, **opts) -> EnsembleSummary:
    """Simulate ``n`` trajectories and aggregate them."""
    return summarize(run_trajectories(model, rho0, grid, n, engine, master_seed, n_jobs, **opts))


def instrument_estimate(model: MeasurementModel, rho0, grid: TimeGrid, predicate, t: float,
                        n: int, master_seed: int = 0, batch: Batch | None = None):
    """Monte Carlo estimate of the instrument on the event ``predicate`` at time ``t``.

    ``predicate`` receives a :class:`TrajectoryRecord` (linear engine) and must
    only look at data up to time ``t``.  Returns the operator estimate
    ``mean_Q[1_F sigma_t]`` and the probability estimate ``mean_Q[1_F ||sigma_t||]``.
    """
    if batch is None:
        batch = run_trajectories(model, rho0, grid, n, "linear", master_seed)
    s = grid.index_of(t)
    d = model.dim
    total = np.zeros((d, d), dtype=complex)
    prob = 0.0
    for i in range(len(batch)):
        rec = _single_from(batch, i)
        if predicate(rec):
            total = total + batch.states[i, s, 0]
            prob += batch.weights[i, s, 0]
    return total / len(batch), prob / len(batch)


def _single_from(batch: Batch, i: int) -> TrajectoryRecord:
    sub = Batch(**{**batch.__dict__})
    rec = sub.record(i)
    rec.states, rec.weights = rec.states[:, 0], rec.weights[:, 0]
    rec.m, rec.nu, rec.w_shift = rec.m[:, 0], rec.nu[:, 0], rec.w_shift[:, 0]
    return rec
