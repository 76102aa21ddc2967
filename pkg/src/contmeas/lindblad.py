"""Generators of the a priori dynamics and master-equation evolution.

Superoperators act on column-stacked vectors: ``vec(X) = X.reshape(-1, order="F")``
so that ``vec(A X B) = kron(B.T, A) @ vec(X)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import expm, null_space

from contmeas.operators import (
    DEFAULT_TOL,
    MeasurementModel,
    StateValidationError,
    dagger,
    hermitian_part,
    validate_state,
)

PARTS = ("L0", "L1", "L")
DEFAULT_DT = 1e-3
PROPAGATOR_MAX_D2 = 1024


def vec(x: np.ndarray) -> np.ndarray:
    return np.asarray(x).reshape(-1, order="F")


def unvec(v: np.ndarray, d: int) -> np.ndarray:
    return np.asarray(v).reshape(d, d, order="F")


def _dissipator(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    ad = dagger(a)
    ada = ad @ a
    return a @ x @ ad - 0.5 * (ada @ x + x @ ada)


def _l0(model: MeasurementModel, x: np.ndarray) -> np.ndarray:
    out = -1j * (model.H @ x - x @ model.H)
    for c in model.diffusive:
        out = out + _dissipator(c.L, x)
    for c in model.jumps:
        out = out + (c.apply(x) - 0.5 * (c.effect @ x + x @ c.effect))
    return out


def _l1(model: MeasurementModel, x: np.ndarray) -> np.ndarray:
    out = np.zeros(np.shape(x), dtype=complex)
    for s in model.unobserved:
        out = out + _dissipator(s, x)
    return out


def apply_generator(model: MeasurementModel, x, part: str = "L") -> np.ndarray:
    """Apply ``L0``, ``L1`` or ``L = L0 + L1`` to ``x`` (leading batch axes allowed).

    The phases of the diffusive channels cancel in these generators, so the
    unmodulated operators are used.
    """
    if part not in PARTS:
        raise ValueError(f"part must be one of {PARTS}")
    x = np.asarray(x, dtype=complex)
    if x.shape[-2:] != (model.dim, model.dim):
        raise ValueError(f"dimension mismatch: model d={model.dim}, input shape {x.shape}")
    if part == "L0":
        return _l0(model, x)
    if part == "L1":
        return _l1(model, x)
    return _l0(model, x) + _l1(model, x)


def superop_left_right(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix of ``X -> a X b``."""
    return np.kron(b.T, a)


def generator_matrix(model: MeasurementModel, part: str = "L") -> np.ndarray:
    """``d^2 x d^2`` matrix of the chosen generator (column stacking)."""
    if part not in PARTS:
        raise ValueError(f"part must be one of {PARTS}")
    d = model.dim
    eye = np.eye(d, dtype=complex)

    def diss(a):
        ada = dagger(a) @ a
        return (
            superop_left_right(a, dagger(a))
            - 0.5 * superop_left_right(ada, eye)
            - 0.5 * superop_left_right(eye, ada)
        )

    m0 = -1j * (superop_left_right(model.H, eye) - superop_left_right(eye, model.H))
    for c in model.diffusive:
        m0 = m0 + diss(c.L)
    for c in model.jumps:
        for k in c.kraus:
            m0 = m0 + superop_left_right(k, dagger(k))
        m0 = m0 - 0.5 * (superop_left_right(c.effect, eye) + superop_left_right(eye, c.effect))
    m1 = np.zeros((d * d, d * d), dtype=complex)
    for s in model.unobserved:
        m1 = m1 + diss(s)
    return {"L0": m0, "L1": m1, "L": m0 + m1}[part]


def propagator(model: MeasurementModel, tau: float) -> np.ndarray:
    """Superoperator matrix of ``exp(L tau)``."""
    if tau < 0:
        raise ValueError("tau must be non-negative")
    return expm(generator_matrix(model) * tau)


def _rk4_step(model, x, dt):
    k1 = apply_generator(model, x)
    k2 = apply_generator(model, x + 0.5 * dt * k1)
    k3 = apply_generator(model, x + 0.5 * dt * k2)
    k4 = apply_generator(model, x + dt * k3)
    return x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)


def _n_steps(t: float, dt: float) -> int:
    n = int(round(t / dt))
    if n == 0 or abs(n * dt - t) > 1e-9 * max(1.0, t):
        raise ValueError(f"t={t} is not an integer multiple of dt={dt}")
    return n


def master_series(model: MeasurementModel, rho0, t: float, dt: float = DEFAULT_DT,
                  method: str = "auto", tol: float = DEFAULT_TOL) -> np.ndarray:
    """A priori states on the grid ``0, dt, ..., t``; shape ``(n + 1, d, d)``.

    ``method`` is ``"expm"`` (one-step propagator applied repeatedly),
    ``"rk4"`` (fixed-step Runge-Kutta) or ``"auto"`` (propagator when
    ``d**2 <= 1024``).
    """
    rho0, _ = validate_state(rho0, tol)
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return rho0[None].copy()
    n = _n_steps(t, dt)
    d = model.dim
    if method == "auto":
        method = "expm" if d * d <= PROPAGATOR_MAX_D2 else "rk4"
    out = np.empty((n + 1, d, d), dtype=complex)
    out[0] = rho0
    if method == "expm":
        step = propagator(model, dt)
        v = vec(rho0)
        for i in range(1, n + 1):
            v = step @ v
            out[i] = unvec(v, d)
    elif method == "rk4":
        x = rho0
        for i in range(1, n + 1):
            x = _rk4_step(model, x, dt)
            out[i] = x
    else:
        raise ValueError(f"unknown method {method!r}")
    # positivity/trace guard on the final state; a failure means dt is too large
    try:
        validate_state(hermitian_part(out[-1]), max(tol, 1e-8))
    except StateValidationError as exc:
        raise StateValidationError(f"master-equation step left the state space ({exc}); reduce dt") from exc
    return out


def evolve_master(model: MeasurementModel, rho0, t: float, dt: float = DEFAULT_DT,
                  method: str = "auto", tol: float = DEFAULT_TOL) -> np.ndarray:
    """A priori state at time ``t`` solving ``d eta/dt = L[eta]``."""
    return master_series(model, rho0, t, dt, method, tol)[-1]


@dataclass(frozen=True)
class Equilibrium:
    """Stationary states of the generator.

    ``state`` is the unique stationary state when ``unique`` is true; otherwise
    a representative (the projection of the maximally mixed state onto the
    stationary subspace, when that is positive) and ``basis`` spans the
    Hermitian stationary operators.
    """

    unique: bool
    state: np.ndarray | None
    basis: np.ndarray


def _hermitian_basis(vecs: np.ndarray, d: int, tol: float) -> np.ndarray:
    mats = []
    for k in range(vecs.shape[1]):
        x = unvec(vecs[:, k], d)
        mats.append(hermitian_part(x))
        mats.append(hermitian_part(-1j * x))
    real = np.array([np.concatenate([m.real.ravel(), m.imag.ravel()]) for m in mats]).T
    u, s, _ = np.linalg.svd(real, full_matrices=False)
    rank = int(np.sum(s > tol * max(1.0, s[0])))
    basis = []
    for k in range(rank):
        col = u[:, k]
        basis.append(col[: d * d].reshape(d, d) + 1j * col[d * d:].reshape(d, d))
    return np.array(basis)


def equilibrium_state(model: MeasurementModel, tol: float = DEFAULT_TOL) -> Equilibrium:
    d = model.dim
    m = generator_matrix(model)
    scale = max(1.0, float(np.linalg.norm(m, 2)))
    kernel = null_space(m, rcond=max(tol, 1e-12) * 10 / scale) if np.any(m) else np.eye(d * d)
    if kernel.shape[1] == 0:
        raise StateValidationError("generator has no stationary operator (numerically)")
    basis = _hermitian_basis(kernel, d, 1e-8)
    traces = np.array([np.trace(b).real for b in basis])
    if basis.shape[0] == 1:
        x = basis[0] / traces[0]
        state, _ = validate_state(hermitian_part(x), max(tol, 1e-8))
        return Equilibrium(unique=True, state=state, basis=basis)
    # project identity/d onto the real span of the basis (basis is orthonormal)
    mixed = np.eye(d) / d
    coeff = np.array([np.vdot(b, mixed).real for b in basis])
    x = np.einsum("a,aij->ij", coeff, basis)
    try:
        state, _ = validate_state(hermitian_part(x / np.trace(x).real), 1e-8)
    except (StateValidationError, ZeroDivisionError):
        state = None
    return Equilibrium(unique=False, state=state, basis=basis)
