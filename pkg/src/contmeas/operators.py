"""Finite-dimensional operators with quantum-state semantics.

States are plain ``numpy`` arrays of shape ``(d, d)``; the measurement model
and its channels are small frozen dataclasses holding such arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEFAULT_TOL = 1e-9


class StateValidationError(ValueError):
    """Raised when a matrix is not a density operator within tolerance."""


class NumericalError(RuntimeError):
    """An integration step left its validity region; usually ``dt`` is too large."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=complex)
    if a.ndim != 2 or a.shape[0] != a.shape[1] or a.shape[0] < 1:
        raise ValueError(f"{name} must be a non-empty square matrix, got shape {a.shape}")
    return a


def dagger(a: np.ndarray) -> np.ndarray:
    return np.swapaxes(a, -1, -2).conj()


def hermitian_part(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + dagger(a))


def is_hermitian(a: np.ndarray, tol: float = DEFAULT_TOL) -> bool:
    return bool(np.max(np.abs(a - dagger(a)), initial=0.0) <= tol)


def trace_norm(a) -> float:
    """Sum of the singular values of a square matrix."""
    a = as_matrix(a)
    if np.allclose(a, dagger(a), rtol=0.0, atol=1e-14):
        return float(np.sum(np.abs(np.linalg.eigvalsh(hermitian_part(a)))))
    return float(np.sum(np.linalg.svd(a, compute_uv=False)))


def trace_distance(a, b) -> float:
    """Half the trace norm of ``a - b``."""
    return 0.5 * trace_norm(np.asarray(a, dtype=complex) - np.asarray(b, dtype=complex))


def validate_state(x, tol: float = DEFAULT_TOL) -> tuple[np.ndarray, float]:
    """Check that ``x`` is a density operator and return a repaired copy.

    Eigenvalues in ``[-tol, 0)`` are clamped to zero and the trace is
    renormalized to one.  The second return value is the trace-norm size of
    the repair.

    Raises
    ------
    StateValidationError
        On a Hermiticity violation, a negative eigenvalue or a trace
        deviation larger than ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    x = as_matrix(x, "state")
    herm_err = float(np.max(np.abs(x - dagger(x))))
    if herm_err > tol:
        raise StateValidationError(f"not Hermitian: max |x - x^dag| = {herm_err:.3g}")
    h = hermitian_part(x)
    evals, evecs = np.linalg.eigh(h)
    if evals[0] < -tol:
        raise StateValidationError(f"negative eigenvalue {evals[0]:.3g}")
    tr = float(np.sum(evals))
    if abs(tr - 1.0) > tol:
        raise StateValidationError(f"trace deviation: Tr = {tr!r}")
    clamped = np.clip(evals, 0.0, None)
    clamped = clamped / clamped.sum()
    repaired = (evecs * clamped) @ dagger(evecs)
    return repaired, trace_norm(repaired - x)


def pure_state(vec) -> np.ndarray:
    v = np.asarray(vec, dtype=complex).ravel()
    v = v / np.linalg.norm(v)
    return np.outer(v, v.conj())


@dataclass(frozen=True, eq=False)
class DiffusiveChannel:
    """Homodyne-type output channel with operator ``L`` and phase rate ``omega``.

    The operator seen by the measurement at time ``t`` is
    ``exp(1j * omega * t) * L``.
    """

    L: np.ndarray
    omega: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "L", as_matrix(self.L, "L"))
        object.__setattr__(self, "omega", float(self.omega))

    def modulated(self, t: float) -> np.ndarray:
        return np.exp(1j * self.omega * t) * self.L


@dataclass(frozen=True, eq=False)
class JumpChannel:
    """Counting channel: completely positive map in Kraus form plus a reference rate."""

    kraus: tuple
    rate: float = 1.0
    effect: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        ops = self.kraus
        if isinstance(ops, np.ndarray) and ops.ndim == 2:
            ops = [ops]
        ops = tuple(as_matrix(k, "Kraus operator") for k in ops)
        if not ops:
            raise ValueError("a jump channel needs at least one Kraus operator")
        if len({k.shape for k in ops}) != 1:
            raise ValueError("Kraus operators have inconsistent shapes")
        if not self.rate > 0:
            raise ValueError(f"jump rate must be positive, got {self.rate}")
        object.__setattr__(self, "kraus", ops)
        object.__setattr__(self, "rate", float(self.rate))
        object.__setattr__(self, "effect", sum(dagger(k) @ k for k in ops))

    @property
    def dim(self) -> int:
        return self.kraus[0].shape[0]

    @property
    def stacked(self) -> np.ndarray:
        return np.stack(self.kraus)

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Image ``sum_m R_m x R_m^dag``; ``x`` may carry leading batch axes."""
        out = np.zeros(np.shape(x), dtype=complex)
        for k in self.kraus:
            out += k @ x @ dagger(k)
        return out


def cp_apply(channel: JumpChannel, x) -> tuple[np.ndarray, np.ndarray]:
    """Return the image of ``x`` under the channel and the channel's effect operator."""
    x = as_matrix(x)
    if x.shape[0] != channel.dim:
        raise ValueError(f"dimension mismatch: channel d={channel.dim}, input d={x.shape[0]}")
    return channel.apply(x), channel.effect


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """Hamiltonian plus diffusive, unobserved and counting channels on C^d."""

    H: np.ndarray
    diffusive: tuple = ()
    unobserved: tuple = ()
    jumps: tuple = ()
    name: str = ""
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        H = as_matrix(self.H, "H")
        d = H.shape[0]
        if not is_hermitian(H, self.tol):
            raise ValueError("H is not Hermitian")
        diffusive = tuple(
            c if isinstance(c, DiffusiveChannel) else DiffusiveChannel(*_pair(c))
            for c in self.diffusive
        )
        unobserved = tuple(as_matrix(s, "S") for s in self.unobserved)
        jumps = tuple(
            c if isinstance(c, JumpChannel) else JumpChannel(*_pair(c)) for c in self.jumps
        )
        shapes = [c.L.shape for c in diffusive] + [s.shape for s in unobserved]
        shapes += [c.kraus[0].shape for c in jumps]
        if any(s != (d, d) for s in shapes):
            raise ValueError(f"all operators must be {d}x{d}")
        object.__setattr__(self, "H", H)
        object.__setattr__(self, "diffusive", diffusive)
        object.__setattr__(self, "unobserved", unobserved)
        object.__setattr__(self, "jumps", jumps)

    @property
    def dim(self) -> int:
        return self.H.shape[0]

    @classmethod
    def empty(cls, dim: int) -> "MeasurementModel":
        return cls(H=np.zeros((dim, dim), dtype=complex))

    def __eq__(self, other):
        if not isinstance(other, MeasurementModel):
            return NotImplemented
        from contmeas.io import model_to_dict

        return model_to_dict(self) == model_to_dict(other)

    __hash__ = object.__hash__


def _pair(c):
    if isinstance(c, dict):
        return tuple(c.values())
    return tuple(c) if isinstance(c, (tuple, list)) else (c,)


@dataclass(frozen=True)
class SpectralDecomposition:
    """Orthogonal decomposition of a state into weighted rank-one projectors."""

    weights: np.ndarray
    components: np.ndarray
    vectors: np.ndarray

    def reconstruct(self) -> np.ndarray:
        return np.einsum("a,aij->ij", self.weights, self.components)

    def __len__(self) -> int:
        return len(self.weights)


def _fix_phase(vecs: np.ndarray) -> np.ndarray:
    # first component with modulus above 1e-8 made real positive
    out = vecs.copy()
    for k in range(out.shape[1]):
        v = out[:, k]
        idx = int(np.argmax(np.abs(v) > 1e-8))
        out[:, k] = v * (abs(v[idx]) / v[idx])
    return out


def spectral_decompose(rho, tol: float = DEFAULT_TOL) -> SpectralDecomposition:
    """Split ``rho`` into orthogonal pure states, weights sorted descending.

    Eigenvalues below ``tol`` are dropped and the remaining weights
    renormalized.  For degenerate spectra the eigenbasis returned by LAPACK
    is used after a phase convention (first significant entry real and
    positive), which makes the result reproducible but not canonical.
    """
    rho, _ = validate_state(rho, max(tol, DEFAULT_TOL))
    evals, evecs = np.linalg.eigh(rho)
    order = np.argsort(-evals, kind="stable")
    evals, evecs = evals[order], _fix_phase(evecs[:, order])
    keep = evals >= tol
    weights = evals[keep] / evals[keep].sum()
    vecs = evecs[:, keep]
    comps = np.einsum("ia,ja->aij", vecs, vecs.conj())
    return SpectralDecomposition(weights=weights, components=comps, vectors=vecs)


def sigma_minus() -> np.ndarray:
    """Lowering operator in the (e, g) basis: maps e to g."""
    return np.array([[0, 0], [1, 0]], dtype=complex)


def pauli(which: str) -> np.ndarray:
    return {
        "x": np.array([[0, 1], [1, 0]], dtype=complex),
        "y": np.array([[0, -1j], [1j, 0]], dtype=complex),
        "z": np.array([[1, 0], [0, -1]], dtype=complex),
    }[which]
