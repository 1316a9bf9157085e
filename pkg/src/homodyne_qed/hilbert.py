"""Truncated joint space of a two-level atom and one cavity mode.

Basis index is ``atom * n_fock + fock`` with atom 0 = ground ``|g>`` and
atom 1 = excited ``|e>``.  All operators are dense complex arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy.special import gammaln

from .errors import DimensionMismatch, TruncationError


def margin_levels(amp: float) -> int:
    """Smallest Fock cutoff that holds a coherent state of modulus ``amp``."""
    r = abs(amp)
    return int(math.ceil(r * r + 6.0 * r + 10.0))


@dataclass(frozen=True)
class SystemParams:
    """Physical constants and truncation of the driven atom-cavity model.

    Parameters
    ----------
    g : float
        Atom-cavity coupling rate.
    E : float
        Coherent drive strength.
    beta : complex
        Local-oscillator amplitude mixed into the photodetectors.
    gamma : float
        Cavity field decay rate, the natural unit.
    n_fock : int, optional
        Number of field levels kept.  Defaults to the smallest value that
        passes the truncation margin for the steady-state amplitude.
    tol : float
        Tolerance for Hermiticity, trace and positivity checks.
    leak_tol : float
        Largest coherent-state probability allowed above the cutoff.

    Raises
    ------
    TruncationError
        If ``n_fock`` is below ``|alpha|^2 + 6|alpha| + 10``.
    """

    g: float
    E: float
    beta: complex = 0.0
    gamma: float = 1.0
    n_fock: int | None = None
    tol: float = 1e-10
    leak_tol: float = 1e-9
    _alpha: complex = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValueError(f"gamma must be positive, got {self.gamma}")
        for name in ("g", "E", "gamma", "tol", "leak_tol"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        object.__setattr__(self, "beta", complex(self.beta))
        alpha = complex(2.0 * self.E, self.g) / self.gamma
        object.__setattr__(self, "_alpha", alpha)
        need = margin_levels(alpha)
        if self.n_fock is None:
            object.__setattr__(self, "n_fock", max(need, 2))
        n = self.n_fock
        if int(n) != n or n < 2:
            raise ValueError(f"n_fock must be an integer >= 2, got {n}")
        object.__setattr__(self, "n_fock", int(n))
        if n < need:
            raise TruncationError(
                f"n_fock={n} is below the margin {need} for |alpha|={abs(alpha):.4g}")

    @property
    def alpha(self) -> complex:
        """Steady-state field amplitude ``(2E + i g) / gamma``."""
        return self._alpha

    @property
    def dim(self) -> int:
        return 2 * self.n_fock

    def replace(self, **changes) -> "SystemParams":
        """Copy with some fields changed; ``n_fock`` is re-derived unless given."""
        kw = dict(g=self.g, E=self.E, beta=self.beta, gamma=self.gamma,
                  tol=self.tol, leak_tol=self.leak_tol)
        if "n_fock" not in changes and not ({"g", "E", "gamma"} & changes.keys()):
            kw["n_fock"] = self.n_fock
        kw.update(changes)
        return SystemParams(**kw)


# Field-only building blocks ------------------------------------------------

def field_annihilator(n: int) -> np.ndarray:
    return np.diag(np.sqrt(np.arange(1, n, dtype=float)), 1).astype(complex)


def field_number(n: int) -> np.ndarray:
    return np.diag(np.arange(n, dtype=float)).astype(complex)


def lift_field(op: np.ndarray) -> np.ndarray:
    """Field operator acting trivially on the atom."""
    return np.kron(np.eye(2), op)


def lift_atom(op: np.ndarray, n: int) -> np.ndarray:
    """Atomic 2x2 operator acting trivially on the field."""
    return np.kron(op, np.eye(n))


def make_annihilator(params: SystemParams) -> np.ndarray:
    """Cavity annihilation operator on the joint space."""
    return lift_field(field_annihilator(params.n_fock))


# |+> and |-> as columns; sigma_y |+-> = +-|+->.
PM_BASIS = np.array([[1.0, 1.0], [1.0j, -1.0j]]) / math.sqrt(2.0)

SIGMA = np.array([[0, 1], [0, 0]], dtype=complex)   # |g><e|
SIGMA_X = SIGMA + SIGMA.conj().T
SIGMA_Y = 1j * (SIGMA.conj().T - SIGMA)
SIGMA_Z = 1j * SIGMA_Y @ SIGMA_X


class AtomicOps(NamedTuple):
    sigma: np.ndarray
    sigma_x: np.ndarray
    sigma_y: np.ndarray
    sigma_z: np.ndarray
    pm_basis: np.ndarray
    """Joint-space unitary whose columns are ``|+,n>`` then ``|-,n>``."""


def make_atomic_ops(params: SystemParams) -> AtomicOps:
    """Lowering and Pauli operators of the atom, lifted to the joint space.

    Uses ``sigma_y = i(sigma^dag - sigma)`` and ``sigma_z = i sigma_y sigma_x``,
    which puts ``sigma_z |g> = +|g>``.
    """
    n = params.n_fock
    return AtomicOps(*(lift_atom(op, n) for op in (SIGMA, SIGMA_X, SIGMA_Y, SIGMA_Z, PM_BASIS)))


def to_pm(op: np.ndarray, n: int) -> np.ndarray:
    """Rewrite a joint operator in the ``{|+>, |->}`` atomic basis."""
    u = lift_atom(PM_BASIS, n)
    return u.conj().T @ op @ u


def from_pm(op: np.ndarray, n: int) -> np.ndarray:
    u = lift_atom(PM_BASIS, n)
    return u @ op @ u.conj().T


def product_state(atom: np.ndarray, field_vec: np.ndarray) -> np.ndarray:
    return np.kron(np.asarray(atom, dtype=complex), field_vec)


def coherent_amplitudes(amp: complex, n: int) -> np.ndarray:
    """Unnormalized Fock amplitudes of ``|amp>`` up to level ``n - 1``."""
    k = np.arange(n)
    amp = complex(amp)
    if amp == 0:
        out = np.zeros(n, dtype=complex)
        out[0] = 1.0
        return out
    logmag = -0.5 * abs(amp) ** 2 + k * math.log(abs(amp)) - 0.5 * gammaln(k + 1)
    return np.exp(logmag) * np.exp(1j * k * np.angle(amp))


class CoherentState(NamedTuple):
    vector: np.ndarray
    leakage: float


def coherent_state(amp: complex, params: SystemParams) -> CoherentState:
    """Truncated, renormalized field coherent state.

    Returns
    -------
    CoherentState
        Field-only amplitudes (length ``n_fock``) and the probability
        ``1 - sum |c_n|^2`` lost above the cutoff before renormalization.

    Raises
    ------
    TruncationError
        If the cutoff is below the margin for ``|amp|`` or the leakage exceeds
        ``params.leak_tol``.
    """
    n = params.n_fock
    if margin_levels(amp) > n:
        raise TruncationError(f"|amp|={abs(amp):.4g} needs {margin_levels(amp)} levels, have {n}")
    c = coherent_amplitudes(amp, n)
    kept = float(np.vdot(c, c).real)
    leakage = max(0.0, 1.0 - kept)
    if leakage > params.leak_tol:
        raise TruncationError(f"coherent-state leakage {leakage:.3g} exceeds {params.leak_tol:g}")
    return CoherentState(c / math.sqrt(kept), leakage)


def matrix_exponential(A: np.ndarray, t: float = 1.0, max_norm: float = 1e5) -> np.ndarray:
    """``exp(A t)`` by scaling and squaring with a Pade core.

    Raises
    ------
    OverflowError
        If the 1-norm of ``A t`` exceeds ``max_norm``.
    """
    At = np.asarray(A, dtype=complex) * t
    if not np.all(np.isfinite(At)):
        raise ValueError("matrix has non-finite entries")
    nrm = np.linalg.norm(At, 1) if At.size else 0.0
    if nrm > max_norm:
        raise OverflowError(f"||A t||_1 = {nrm:.3g} exceeds {max_norm:g}")
    return scipy.linalg.expm(At)


# Density-matrix utilities -------------------------------------------------

def trace_distance(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Half the sum of absolute eigenvalues of ``rho - sigma``."""
    diff = rho - sigma
    diff = 0.5 * (diff + diff.conj().T)
    return 0.5 * float(np.abs(np.linalg.eigvalsh(diff)).sum())


def ket_to_dm(psi: np.ndarray) -> np.ndarray:
    return np.outer(psi, psi.conj())


def check_density_matrix(rho: np.ndarray, tol: float, dim: int | None = None) -> None:
    """Raise ``ValueError`` unless ``rho`` is Hermitian, unit trace and PSD."""
    if rho.ndim != 2 or rho.shape[0] != rho.shape[1]:
        raise DimensionMismatch(f"not a square matrix: {rho.shape}")
    if dim is not None and rho.shape[0] != dim:
        raise DimensionMismatch(f"dimension {rho.shape[0]} != {dim}")
    herm = np.linalg.norm(rho - rho.conj().T)
    if herm > tol:
        raise ValueError(f"Hermiticity residual {herm:.3g}")
    tr = np.trace(rho).real
    if abs(tr - 1.0) > tol:
        raise ValueError(f"trace {tr!r} differs from 1")
    lo = np.linalg.eigvalsh(0.5 * (rho + rho.conj().T)).min()
    if lo < -tol:
        raise ValueError(f"negative eigenvalue {lo:.3g}")


def expect(op: np.ndarray, rho: np.ndarray) -> complex:
    return complex(np.einsum("ij,ji->", op, rho))


def purity(rho: np.ndarray) -> float:
    return float(np.einsum("ij,ji->", rho, rho).real)


class Hamiltonians(NamedTuple):
    H_int: np.ndarray
    H0: np.ndarray
    H1: np.ndarray


def make_hamiltonians(params: SystemParams) -> Hamiltonians:
    """Interaction Hamiltonian ``i g (a^dag sigma - a sigma^dag)`` and its split.

    ``H0 = -g (a^dag + a) sigma_y / 2`` is the part kept by the slow-time
    approximation and ``H1 = i g (a^dag - a) sigma_x / 2`` the part dropped.
    """
    a = make_annihilator(params)
    ad = a.conj().T
    ops = make_atomic_ops(params)
    s = ops.sigma
    g = params.g
    H_int = 1j * g * (ad @ s - a @ s.conj().T)
    H0 = -0.5 * g * (ad + a) @ ops.sigma_y
    H1 = 0.5j * g * (ad - a) @ ops.sigma_x
    return Hamiltonians(H_int, H0, H1)
