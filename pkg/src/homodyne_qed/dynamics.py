"""Unconditional master-equation dynamics, the steady state, and the RWA residual.

Density matrices may carry leading batch axes: every routine here accepts
arrays of shape ``(..., 2 n, 2 n)`` and treats the trailing two as the joint
atom-field indices.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import CostError, DimensionMismatch, StepSizeError
from .hilbert import (
    PM_BASIS,
    SIGMA_X,
    SIGMA_Y,
    SIGMA_Z,
    SystemParams,
    coherent_state,
    field_annihilator,
    make_annihilator,
    make_hamiltonians,
)


# Banded actions of a, a^dag on the (..., 2, n, 2, n) view ------------------

def _view(rho: np.ndarray, n: int) -> np.ndarray:
    return rho.reshape(rho.shape[:-2] + (2, n, 2, n))


def _a_left(r: np.ndarray, sq: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    out[..., :-1, :, :] = sq[1:, None, None] * r[..., 1:, :, :]
    return out


def _ad_left(r: np.ndarray, sq: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    out[..., 1:, :, :] = sq[1:, None, None] * r[..., :-1, :, :]
    return out


def _a_right(r: np.ndarray, sq: np.ndarray) -> np.ndarray:
    # (rho a)[.., n] = sqrt(n) rho[.., n-1]
    out = np.zeros_like(r)
    out[..., 1:] = sq[1:] * r[..., :-1]
    return out


def _ad_right(r: np.ndarray, sq: np.ndarray) -> np.ndarray:
    out = np.zeros_like(r)
    out[..., :-1] = sq[1:] * r[..., 1:]
    return out


DENSE_DIM = 96
"""Up to this dimension dense products beat the banded updates."""


@dataclass(frozen=True)
class LindbladGenerator:
    """Right-hand side of the driven, damped atom-cavity master equation.

    ``L rho = [-i H_int + E(a^dag - a), rho] + (gamma/2)(2 a rho a^dag
    - a^dag a rho - rho a^dag a)`` with ``H_int = i g (a^dag sigma - a sigma^dag)``.
    """

    params: SystemParams
    _sq: np.ndarray = field(init=False, repr=False, compare=False)
    _num: np.ndarray = field(init=False, repr=False, compare=False)
    _dense: tuple | None = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        p = self.params
        n = p.n_fock
        object.__setattr__(self, "_sq", np.sqrt(np.arange(n, dtype=float)))
        object.__setattr__(self, "_num", np.arange(n, dtype=float))
        dense = None
        if p.dim <= DENSE_DIM:
            # L rho = K rho + rho K^dag + gamma a rho a^dag
            a = make_annihilator(p)
            ad = a.conj().T
            K = -1j * make_hamiltonians(p).H_int + p.E * (ad - a) - 0.5 * p.gamma * ad @ a
            dense = (K, K.conj().T, a, ad)
        object.__setattr__(self, "_dense", dense)

    @property
    def dim(self) -> int:
        return self.params.dim

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        return lindblad_rhs(rho, self)

    def spectral_bound(self) -> float:
        """Rough bound on the magnitude of the generator's eigenvalues."""
        p = self.params
        n = p.n_fock
        return p.gamma * (n - 1) + 4.0 * (abs(p.g) + abs(p.E)) * math.sqrt(n)


def lindblad_rhs(rho: np.ndarray, gen: LindbladGenerator) -> np.ndarray:
    """Apply the master-equation generator to ``rho`` (any leading batch shape)."""
    p = gen.params
    n = p.n_fock
    if rho.shape[-2:] != (2 * n, 2 * n):
        raise DimensionMismatch(f"expected trailing shape {(2 * n, 2 * n)}, got {rho.shape}")
    if gen._dense is not None:
        K, Kd, a, ad = gen._dense
        return K @ rho + rho @ Kd + p.gamma * (a @ rho @ ad)
    sq, num = gen._sq, gen._num
    r = _view(np.asarray(rho, dtype=complex), n)
    g, E, gam = p.g, p.E, p.gamma

    # H rho: g-row gets i g a^dag rho_e, e-row gets -i g a rho_g.
    h_left = np.empty_like(r)
    h_left[..., 0, :, :, :] = 1j * g * _ad_left(r[..., 1, :, :, :], sq)
    h_left[..., 1, :, :, :] = -1j * g * _a_left(r[..., 0, :, :, :], sq)
    # rho H: g-column gets -i g rho_e a, e-column gets i g rho_g a^dag.
    h_right = np.empty_like(r)
    h_right[..., 0, :] = -1j * g * _a_right(r[..., 1, :], sq)
    h_right[..., 1, :] = 1j * g * _ad_right(r[..., 0, :], sq)

    a_r = _a_left(r, sq)
    out = -1j * (h_left - h_right)
    out += E * (_ad_left(r, sq) - a_r - _ad_right(r, sq) + _a_right(r, sq))
    out += gam * _ad_right(a_r, sq)
    out -= 0.5 * gam * (num[:, None, None] * r + num * r)
    return out.reshape(rho.shape)


# Integration ----------------------------------------------------------------

class EvolutionResult(NamedTuple):
    rho: np.ndarray
    t: float
    steps: int
    error_estimate: float
    """Step-halving estimate of the global error (Frobenius norm)."""
    checkpoints: dict
    max_trace_drift: float
    max_hermiticity: float
    stopped_early: bool


def _rk4(rho, h, gen):
    k1 = lindblad_rhs(rho, gen)
    k2 = lindblad_rhs(rho + 0.5 * h * k1, gen)
    k3 = lindblad_rhs(rho + 0.5 * h * k2, gen)
    k4 = lindblad_rhs(rho + h * k3, gen)
    return rho + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def check_step(dt_step: float, gen: LindbladGenerator) -> None:
    """Raise ``StepSizeError`` if ``dt_step`` does not resolve the fast scales.

    Besides ``dt <= min(0.02/g, 0.02/gamma)`` the step must keep the largest
    generator eigenvalues inside the RK4 stability region; the damping of
    high Fock levels grows like ``gamma * n_fock``.
    """
    p = gen.params
    limit = 0.02 / p.gamma
    if p.g:
        limit = min(limit, 0.02 / abs(p.g))
    if dt_step > limit * (1 + 1e-12):
        raise StepSizeError(f"dt_step={dt_step:g} exceeds min(0.02/g, 0.02/gamma)={limit:g}")
    if dt_step * gen.spectral_bound() > 2.5:
        raise StepSizeError(
            f"dt_step={dt_step:g} outside RK4 stability (bound {2.5 / gen.spectral_bound():.3g})")


def available_memory() -> int:
    try:
        return os.sysconf("SC_AVPHYS_PAGES") * os.sysconf("SC_PAGE_SIZE")
    except (ValueError, OSError, AttributeError):
        return 1 << 62


def projected_cost(dt_total: float, dt_step: float, gen: LindbladGenerator,
                   calib_levels: int = 64) -> tuple[float, int]:
    """Projected wall time (s) and peak bytes of an RK4 run.

    Time is measured on a small instance and scaled with the squared
    dimension, which is how the banded right-hand side scales.
    """
    p = gen.params
    d_small = 2 * calib_levels
    probe = SystemParams(g=0.0, E=0.0, gamma=p.gamma, n_fock=calib_levels)
    pg = LindbladGenerator(probe)
    rho = np.eye(d_small, dtype=complex) / d_small
    reps = 5
    t0 = time.perf_counter()
    for _ in range(reps):
        rho = _rk4(rho, 1e-4, pg)
    per_step = (time.perf_counter() - t0) / reps
    steps = max(1, math.ceil(dt_total / dt_step - 1e-9))
    scale = (gen.dim / d_small) ** 2
    peak = 12 * 16 * gen.dim**2
    return per_step * scale * steps, peak


def evolve_unconditional(rho0: np.ndarray, dt_total: float, dt_step: float,
                         gen: LindbladGenerator, checkpoints=(), callback: Callable | None = None,
                         time_budget: float | None = None) -> EvolutionResult:
    """Fixed-step RK4 integration of the master equation.

    Each step is followed by symmetric re-Hermitization and trace
    renormalization.  The drift removed by these two operations is
    recorded before it is removed.

    Parameters
    ----------
    checkpoints : sequence of float
        Times at which copies of the state are kept (rounded to the grid).
    callback : callable, optional
        ``callback(t, rho)`` after each step; a truthy return stops early.
    time_budget : float, optional
        Seconds allowed; a projected overrun raises ``CostError`` up front.

    Raises
    ------
    StepSizeError
        If ``dt_step`` is too coarse (see ``check_step``).
    CostError
        If the projected memory or wall time is over the limit.
    """
    check_step(dt_step, gen)
    if rho0.shape != (gen.dim, gen.dim):
        raise DimensionMismatch(f"rho0 has shape {rho0.shape}, expected {(gen.dim, gen.dim)}")
    rho = np.array(rho0, dtype=complex)
    if dt_total <= 0:
        return EvolutionResult(rho, 0.0, 0, 0.0, {0.0: rho.copy()} if checkpoints else {},
                               0.0, 0.0, False)
    steps = max(1, math.ceil(dt_total / dt_step - 1e-9))
    h = dt_total / steps

    peak = 12 * 16 * gen.dim**2
    if peak > available_memory():
        raise CostError(f"integration needs ~{peak / 2**30:.1f} GiB, "
                        f"{available_memory() / 2**30:.1f} GiB available")
    if time_budget is not None:
        est, _ = projected_cost(dt_total, dt_step, gen)
        if est > time_budget:
            raise CostError(f"projected run time {est:.3g} s exceeds budget {time_budget:g} s")

    marks = {}
    for tc in checkpoints:
        marks.setdefault(int(round(tc / h)), []).append(float(tc))
    kept = {tc: rho.copy() for tc in marks.get(0, [])}

    # Step-halving estimate from the first step, scaled to the whole run.
    full = _rk4(rho, h, gen)
    half = _rk4(_rk4(rho, 0.5 * h, gen), 0.5 * h, gen)
    err = float(np.linalg.norm(full - half)) * 16.0 / 15.0 * steps

    drift = herm = 0.0
    stopped = False
    for i in range(1, steps + 1):
        rho = half if i == 1 else _rk4(rho, h, gen)
        herm = max(herm, float(np.linalg.norm(rho - rho.conj().T)))
        rho = 0.5 * (rho + rho.conj().T)
        tr = np.trace(rho).real
        drift = max(drift, abs(tr - 1.0))
        rho /= tr
        for tc in marks.get(i, []):
            kept[tc] = rho.copy()
        if callback is not None and callback(i * h, rho):
            stopped = True
            break
    return EvolutionResult(rho, i * h, i, err, kept, drift, herm, stopped)


# Steady state -----------------------------------------------------------------

def steady_state_factors(params: SystemParams):
    """Orthonormal vectors ``|+, alpha>``, ``|-, alpha*>`` and their weights."""
    alpha = params.alpha
    plus = np.kron(PM_BASIS[:, 0], coherent_state(alpha, params).vector)
    minus = np.kron(PM_BASIS[:, 1], coherent_state(alpha.conjugate(), params).vector)
    return np.stack([plus, minus], axis=1), np.array([0.5, 0.5])


def build_rho_ss(params: SystemParams) -> np.ndarray:
    """``(|alpha><alpha| (x) |+><+| + |alpha*><alpha*| (x) |-><-|) / 2``."""
    vecs, w = steady_state_factors(params)
    return (vecs * w) @ vecs.conj().T


# RWA residual -------------------------------------------------------------------

class RWAResidual(NamedTuple):
    norm: float
    """Spectral norm of X(t)."""
    mean_norm: float
    """Spectral norm of the time average of X over [0, t]."""


def _osc_integrals(w: np.ndarray, T: float):
    """``int_0^T cos(ws), sin(ws), s cos(ws), s sin(ws) ds`` elementwise."""
    out = np.empty((4,) + w.shape)
    small = np.abs(w * T) < 1e-3
    ws = np.where(small, 1.0, w)
    x = ws * T
    out[0] = np.sin(x) / ws
    out[1] = (1 - np.cos(x)) / ws
    out[2] = (np.cos(x) + x * np.sin(x) - 1) / ws**2
    out[3] = (np.sin(x) - x * np.cos(x)) / ws**2
    # Series for |w T| -> 0.
    w0 = w[small]
    out[0][small] = T - w0**2 * T**3 / 6
    out[1][small] = w0 * T**2 / 2 - w0**3 * T**4 / 24
    out[2][small] = T**2 / 2 - w0**2 * T**4 / 8
    out[3][small] = w0 * T**3 / 3 - w0**3 * T**5 / 30
    return out


def rwa_residual(t: float, params: SystemParams) -> RWAResidual:
    """Size of the oscillating term dropped by the slow-time approximation.

    ``2X(t) = g (a^dag - a - i g sigma_y t)(sigma_x cos[g t (a^dag + a)]
    - sigma_z sin[g t (a^dag + a)])``.  Functions of ``a^dag + a`` are
    evaluated through its eigendecomposition in the truncated space, and the
    time average is integrated in closed form.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    n = params.n_fock
    g = params.g
    a = field_annihilator(n)
    lam, V = np.linalg.eigh(a + a.conj().T)
    f = lambda d: (V * d) @ V.conj().T   # noqa: E731
    minus = a.conj().T - a

    def assemble(c0, s0, c1, s1):
        # (g/2)[(a^dag - a) (x)(sx C - sz S) - i g t sy (x)(sx C1 - sz S1)]
        return 0.5 * g * (np.kron(SIGMA_X, minus @ c0) - np.kron(SIGMA_Z, minus @ s0)
                          - 1j * g * (np.kron(SIGMA_Y @ SIGMA_X, c1) - np.kron(SIGMA_Y @ SIGMA_Z, s1)))

    X = assemble(f(np.cos(g * t * lam)), f(np.sin(g * t * lam)),
                 t * f(np.cos(g * t * lam)), t * f(np.sin(g * t * lam)))
    if t == 0:
        return RWAResidual(float(np.linalg.norm(X, 2)), float(np.linalg.norm(X, 2)))
    ic, is_, isc, iss = _osc_integrals(g * lam, t)
    avg = assemble(f(ic), f(is_), f(isc), f(iss)) / t
    return RWAResidual(float(np.linalg.norm(X, 2)), float(np.linalg.norm(avg, 2)))
