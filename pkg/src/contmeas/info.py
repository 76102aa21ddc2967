"""Entropies, information gain and the classical amount of information."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from contmeas.operators import (
    MeasurementModel,
    NumericalError,
    hermitian_part,
    spectral_decompose,
)

log = logging.getLogger(__name__)

EIG_FLOOR = 1e-14
SUPPORT_TOL = 1e-10


def _spectrum(x: np.ndarray) -> np.ndarray:
    return np.clip(np.linalg.eigvalsh(hermitian_part(np.asarray(x, dtype=complex))), 0.0, None)


def _xlogx(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    return np.where(p > EIG_FLOOR, p * np.log(np.where(p > EIG_FLOOR, p, 1.0)), 0.0)


def entropy_batch(x: np.ndarray) -> np.ndarray:
    """Von Neumann entropy of each matrix in a stack ``(..., d, d)``."""
    return np.maximum(-_xlogx(_spectrum(x)).sum(axis=-1), 0.0)


def von_neumann_entropy(x) -> float:
    """``-Tr{x ln x}`` with ``0 ln 0 = 0``; eigenvalues are clamped at zero."""
    return float(entropy_batch(np.asarray(x, dtype=complex)))


def relative_entropy(x, y) -> float:
    """``Tr{x ln x - x ln y}``; ``inf`` when the support of x is not inside that of y."""
    x = hermitian_part(np.asarray(x, dtype=complex))
    y = hermitian_part(np.asarray(y, dtype=complex))
    if x.shape != y.shape:
        raise ValueError("states must have the same dimension")
    py, vy = np.linalg.eigh(y)
    outside = vy[:, py <= SUPPORT_TOL]
    if outside.size and np.real(np.trace(outside.conj().T @ x @ outside)) > SUPPORT_TOL:
        return float("inf")
    inside = py > SUPPORT_TOL
    log_y = (vy[:, inside] * np.log(py[inside])) @ vy[:, inside].conj().T
    value = -von_neumann_entropy(x) - np.real(np.trace(x @ log_y))
    return max(float(value), 0.0) if value > -1e-12 else float(value)


def purity_deficit(x) -> float:
    """Linear entropy ``Tr{x} - Tr{x^2}``."""
    x = np.asarray(x, dtype=complex)
    return float(np.real(np.trace(x) - np.trace(x @ x)))


def relative_entropy_batch(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """``S[x_i | y]`` for a stack ``x`` against one full-rank-or-not state ``y``."""
    py, vy = np.linalg.eigh(hermitian_part(np.asarray(y, dtype=complex)))
    inside = py > SUPPORT_TOL
    x = hermitian_part(np.asarray(x, dtype=complex))
    out = -entropy_batch(x)
    if np.any(~inside):
        outside = vy[:, ~inside]
        leak = np.einsum("ia,...ij,ja->...", outside.conj(), x, outside).real
    else:
        leak = np.zeros(x.shape[:-2])
    log_y = (vy[:, inside] * np.log(py[inside])) @ vy[:, inside].conj().T
    out = out - np.einsum("...ij,ji->...", x, log_y).real
    return np.where(leak > SUPPORT_TOL, np.inf, out)


def _mean_se(values: np.ndarray):
    n = values.shape[0]
    mean = values.mean(axis=0)
    se = values.std(axis=0, ddof=1) / np.sqrt(n) if n > 1 else None
    return mean, se


def _wlogw(w: np.ndarray) -> np.ndarray:
    return np.where(w > 0, w * np.log(np.where(w > 0, w, 1.0)), 0.0)


def jump_bracket(nu_alpha, nu):
    """``nu (1 - r + r ln r)`` with ``r = nu_alpha / nu``; equals ``nu`` when ``nu_alpha = 0``.

    Points with ``nu = 0`` and ``nu_alpha > 0`` return ``nan``; with both
    zero the term vanishes.
    """
    nu_alpha = np.asarray(nu_alpha, dtype=float)
    nu = np.asarray(nu, dtype=float)
    pos = nu > 0
    r = np.where(pos, nu_alpha / np.where(pos, nu, 1.0), 0.0)
    val = np.where(pos, nu * (1.0 - r + _wlogw(r)), 0.0)
    return np.where(~pos & (nu_alpha > 0), np.nan, val)


@dataclass
class ClassicalInformation:
    """Classical amount of information along the recorded times.

    ``value`` is the reference-measure estimator, ``value_p`` the same sample
    rewritten as a mixture of expectations under the component laws; ``rate``
    is the time derivative estimated from the posterior signals.
    """

    times: np.ndarray
    value: np.ndarray
    se: np.ndarray | None
    value_p: np.ndarray
    se_p: np.ndarray | None
    rate: np.ndarray
    rate_se: np.ndarray | None
    rate_excluded: int
    weights: np.ndarray
    vectors: np.ndarray
    n: int
    consistency: float


def _coupled_linear(model, rho0, grid, n, master_seed, n_jobs=1, measure="reference"):
    from contmeas.trajectories import run_trajectories

    if measure not in ("reference", "posterior"):
        raise ValueError("measure must be 'reference' or 'posterior'")
    dec = spectral_decompose(rho0)
    comps = np.concatenate([dec.components, np.asarray(rho0, dtype=complex)[None]])
    batch = run_trajectories(model, rho0, grid, n, "linear", master_seed, n_jobs,
                             components=comps, measure=measure)
    return dec, batch


def _ci_from_batch(dec, batch, measure="reference") -> ClassicalInformation:
    keep = ~batch.underflow
    w_alpha = dec.weights
    na = len(w_alpha)
    sig_a = batch.states[keep][:, :, :na]
    norms_a = batch.weights[keep][:, :, :na]
    sigma = np.einsum("a,bsaij->bsij", w_alpha, sig_a)
    direct = batch.states[keep][:, :, na]
    scale = np.maximum(np.abs(direct).max(axis=(-2, -1)), 1e-300)
    consistency = float((np.abs(sigma - direct).max(axis=(-2, -1)) / scale).max())
    if consistency > 1e-10:
        raise NumericalError(f"pathwise linearity violated by {consistency:.3g}")
    norm = np.abs(np.linalg.eigvalsh(hermitian_part(sigma))).sum(axis=-1)
    safe = np.where(norm > 0, norm, 1.0)
    # posterior probability of each component given the record
    post = w_alpha * norms_a / safe[..., None]
    ratio = norms_a / safe[..., None]
    log_ratio = np.log(np.where(ratio > 0, ratio, 1.0))
    if measure == "reference":
        per = np.einsum("a,bsa->bs", w_alpha, _wlogw(norms_a)) - _wlogw(norm)
        per_alt = np.einsum("a,bsa->bs", w_alpha, norms_a * log_ratio)
        mix = norm
    else:
        per = (post * log_ratio).sum(axis=-1)
        per_alt = per
        mix = np.ones_like(norm)
    value, se = _mean_se(per)
    value_p, se_p = _mean_se(per_alt)

    # posterior signals of the mixture from the summed state
    m_a = batch.m[keep][:, :, :na]
    nu_a = batch.nu[keep][:, :, :na]
    m_mix = np.einsum("bsa,bsaj->bsj", post, m_a)
    nu_mix = np.einsum("bsa,bsak->bsk", post, nu_a)
    diff_term = 0.5 * ((m_a - m_mix[:, :, None, :]) ** 2).sum(axis=-1)
    jump_term = jump_bracket(nu_a, nu_mix[:, :, None, :]).sum(axis=-1)
    bad = np.isnan(jump_term) & (post > 0)
    contrib = np.where(bad | (post == 0), 0.0, post * (diff_term + np.nan_to_num(jump_term)))
    per_rate = mix * contrib.sum(axis=-1)
    excluded = int(bad.sum())
    if excluded:
        log.warning("%d points with vanishing mixture intensity excluded from the rate", excluded)
    rate, rate_se = _mean_se(per_rate)
    return ClassicalInformation(
        times=batch.times, value=value, se=se, value_p=value_p, se_p=se_p, rate=rate,
        rate_se=rate_se, rate_excluded=excluded, weights=w_alpha, vectors=dec.vectors,
        n=int(keep.sum()), consistency=consistency,
    )


def classical_information(model: MeasurementModel, rho0, grid, n: int, master_seed: int = 0,
                          n_jobs: int = 1, measure: str = "reference") -> ClassicalInformation:
    """Estimate the classical amount of information at every recorded time.

    The spectral components of ``rho0`` and ``rho0`` itself are propagated by
    the linear equation on shared noise; the mixture path is the weighted sum
    of the component paths (checked against the directly simulated one).

    Parameters
    ----------
    measure : {"reference", "posterior"}
        ``"reference"`` samples records from the reference measure and
        weights by trace norms.  ``"posterior"`` samples records from the a
        posteriori law of ``rho0`` and averages the relative entropy between
        the posterior and prior component probabilities; the integrand is
        bounded by the Shannon entropy of the weights, which makes this form
        far less noisy.
    """
    dec, batch = _coupled_linear(model, rho0, grid, n, master_seed, n_jobs, measure)
    return _ci_from_batch(dec, batch, measure)


def classical_information_rate(model: MeasurementModel, rho0, t: float, n: int,
                               master_seed: int = 0, dt: float = 1e-3, measure: str = "reference"):
    """Time derivative of the classical information at ``t`` and its standard error."""
    from contmeas.trajectories import TimeGrid

    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        dec = spectral_decompose(rho0)
        from contmeas.trajectories import _Kernel

        kern = _Kernel(model)
        m_a, nu_a = kern.signals(dec.components, 0.0)
        m, nu = kern.signals(np.asarray(rho0, dtype=complex), 0.0)
        per = 0.5 * ((m_a - m) ** 2).sum(axis=-1) + np.nan_to_num(jump_bracket(nu_a, nu)).sum(axis=-1)
        return float(dec.weights @ per), 0.0
    grid = TimeGrid(t, dt, stride=TimeGrid(t, dt).n_steps)
    ci = classical_information(model, rho0, grid, n, master_seed, measure=measure)
    return float(ci.rate[-1]), None if ci.rate_se is None else float(ci.rate_se[-1])


@dataclass
class InfoReport:
    """Entropy and information quantities at each recorded time.

    Monte Carlo quantities carry standard errors (``None`` for ``n = 1``).
    ``balance_residual`` is the largest violation of the empirical entropy
    balance computed against the ensemble-mean state.
    """

    times: np.ndarray
    initial_entropy: float
    entropy_prior: np.ndarray
    mean_entropy: np.ndarray
    mean_entropy_se: np.ndarray | None
    mean_entropy_q: np.ndarray
    mean_entropy_q_se: np.ndarray | None
    mean_relative_entropy: np.ndarray
    mean_relative_entropy_se: np.ndarray | None
    information: np.ndarray
    information_se: np.ndarray | None
    classical: np.ndarray
    classical_se: np.ndarray | None
    classical_rate: np.ndarray
    classical_rate_se: np.ndarray | None
    purity_deficit: np.ndarray
    purity_deficit_se: np.ndarray | None
    entropy_mean_state: np.ndarray
    balance_residual: float
    decomposition_weights: np.ndarray
    decomposition_vectors: np.ndarray
    n: int
    master_seed: int

    def rows(self) -> list[dict]:
        def pick(arr, i):
            return float("nan") if arr is None else float(arr[i])

        out = []
        for i, t in enumerate(self.times):
            out.append({
                "t": float(t),
                "entropy_prior": pick(self.entropy_prior, i),
                "mean_entropy": pick(self.mean_entropy, i),
                "mean_entropy_se": pick(self.mean_entropy_se, i),
                "mean_relative_entropy": pick(self.mean_relative_entropy, i),
                "mean_relative_entropy_se": pick(self.mean_relative_entropy_se, i),
                "information": pick(self.information, i),
                "information_se": pick(self.information_se, i),
                "classical_information": pick(self.classical, i),
                "classical_information_se": pick(self.classical_se, i),
                "classical_rate": pick(self.classical_rate, i),
                "classical_rate_se": pick(self.classical_rate_se, i),
                "purity_deficit": pick(self.purity_deficit, i),
                "purity_deficit_se": pick(self.purity_deficit_se, i),
            })
        return out


def entropy_balance(states: np.ndarray, weights: np.ndarray | None = None):
    """Both sides of the empirical entropy balance for a sample of states.

    With ``eta`` the (weighted) sample mean, returns
    ``(S[eta] - mean S[rho_i], mean S[rho_i | eta])``.
    """
    states = np.asarray(states, dtype=complex)
    w = np.ones(states.shape[0]) if weights is None else np.asarray(weights, dtype=float)
    w = w / w.sum()
    eta = np.einsum("b,bij->ij", w, states)
    lhs = von_neumann_entropy(eta) - float(w @ entropy_batch(states))
    rhs = float(w @ relative_entropy_batch(states, eta))
    return lhs, rhs


def info_report(model: MeasurementModel, rho0, grid, n: int, master_seed: int = 0,
                n_jobs: int = 1, scheme: str = "kraus") -> InfoReport:
    from contmeas.lindblad import master_series
    from contmeas.trajectories import run_trajectories

    rho0 = np.asarray(rho0, dtype=complex)
    post = run_trajectories(model, rho0, grid, n, "posterior", master_seed, n_jobs, scheme=scheme)
    eta_all = master_series(model, rho0, grid.t_max, grid.dt)
    eta = eta_all[grid.sample_steps]
    states = post.states
    ent = entropy_batch(states)
    mean_s, se_s = _mean_se(ent)
    rel = np.stack([relative_entropy_batch(states[:, i], eta[i]) for i in range(len(grid.times))], axis=1)
    mean_rel, se_rel = _mean_se(rel)
    purity = 1.0 - np.einsum("bsij,bsji->bs", states, states).real
    mean_pd, se_pd = _mean_se(purity)
    residual = 0.0
    for i in range(len(grid.times)):
        lhs, rhs = entropy_balance(states[:, i])
        residual = max(residual, abs(lhs - rhs))
    entropy_hat = np.array([von_neumann_entropy(states[:, i].mean(axis=0)) for i in range(len(grid.times))])

    dec, lin = _coupled_linear(model, rho0, grid, n, master_seed, n_jobs)
    ci = _ci_from_batch(dec, lin)
    # reference-measure form of the mean a posteriori entropy
    keep = ~lin.underflow
    sig = lin.states[keep][:, :, -1]
    nrm = lin.weights[keep][:, :, -1]
    per_q = _wlogw(nrm) - _sigma_log_sigma(sig)
    mean_q, se_q = _mean_se(per_q)
    s0 = von_neumann_entropy(rho0)
    return InfoReport(
        times=grid.times, initial_entropy=s0, entropy_prior=entropy_batch(eta),
        mean_entropy=mean_s, mean_entropy_se=se_s, mean_entropy_q=mean_q, mean_entropy_q_se=se_q,
        mean_relative_entropy=mean_rel, mean_relative_entropy_se=se_rel,
        information=s0 - mean_s, information_se=se_s, classical=ci.value, classical_se=ci.se,
        classical_rate=ci.rate, classical_rate_se=ci.rate_se, purity_deficit=mean_pd,
        purity_deficit_se=se_pd, entropy_mean_state=entropy_hat, balance_residual=residual,
        decomposition_weights=dec.weights, decomposition_vectors=dec.vectors, n=n,
        master_seed=master_seed,
    )


def _sigma_log_sigma(sig: np.ndarray) -> np.ndarray:
    """``Tr{sigma ln sigma}`` for positive unnormalized operators."""
    return _xlogx(_spectrum(sig)).sum(axis=-1)
