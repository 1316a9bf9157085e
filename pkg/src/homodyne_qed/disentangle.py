"""Normal-ordered factorization of the slow-time smooth propagator.

All generators handled here are diagonal in ``sigma_y``.  On the eigenblock
``sigma_y = s`` the operator ``M(t) = exp[i g s (a^dag + a) t/2 + E(a^dag - a) t
- gamma t a^dag a / 2]`` is a single-mode exponential, and it factorizes as

    M = exp(Z1) exp(-gamma t a^dag a / 2) exp(Z2 a^dag) exp(Z3 a)

with scalar ``Z1, Z2, Z3``.  Matrix elements of the product are evaluated
through generalized Laguerre polynomials, which keeps them accurate at
Fock levels where the literal two-factor product cancels catastrophically.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import scipy.linalg
from scipy.special import gammaln

from .errors import OracleBudgetError, TruncationError
from .hilbert import (
    SystemParams,
    field_annihilator,
    field_number,
    from_pm,
    make_annihilator,
    make_atomic_ops,
    make_hamiltonians,
    matrix_exponential,
)

BLOCKS = (1, -1)


@dataclass(frozen=True)
class FactoredPropagator:
    """Scalar coefficients of ``M(t)`` on the two ``sigma_y`` eigenblocks."""

    t: float
    z1: float
    z2_plus: complex
    z2_minus: complex
    z3_plus: complex
    z3_minus: complex
    beta_damp: float
    gamma: float = 1.0

    @property
    def decay(self) -> float:
        """Exponent ``gamma t / 2`` of the number-operator factor."""
        return 0.5 * self.gamma * self.t

    def z2(self, s: int) -> complex:
        return self.z2_plus if s > 0 else self.z2_minus

    def z3(self, s: int) -> complex:
        return self.z3_plus if s > 0 else self.z3_minus


def factorize_M(t: float, params: SystemParams) -> FactoredPropagator:
    """Coefficients of the four-factor form of ``M(t)``.

    ``Z2 = (2E + i g s)(e^{gamma t/2} - 1)/gamma``,
    ``Z3 = (2E - i g s)(e^{-gamma t/2} - 1)/gamma`` and
    ``Z1 = (4E^2 + g^2)(1 - e^{-gamma t/2} - gamma t/2)/gamma^2``.
    """
    if t < 0:
        raise ValueError("t must be non-negative")
    g, E, gam = params.g, params.E, params.gamma
    h = 0.5 * gam * t
    up = math.expm1(h)
    down = math.expm1(-h)
    z1 = (4 * E * E + g * g) / gam**2 * (-down - h)
    zp = complex(2 * E, g) / gam
    zm = complex(2 * E, -g) / gam
    damp = math.exp(-0.5 * gam * abs(params.beta) ** 2 * t)
    return FactoredPropagator(t, z1, zp * up, zm * up, zm * down, zp * down, damp, gam)


# Matrix elements ---------------------------------------------------------

def _laguerre_table(x: complex, d_max: int, k_max: int):
    """``L_k^{(d)}(x)`` for ``d <= d_max``, ``k <= k_max`` with log scales.

    Forward three-term recurrence in ``k``; each offset ``d`` carries its own
    running scale so that values stay inside floating-point range.
    """
    d = np.arange(d_max + 1, dtype=float)
    vals = np.empty((d_max + 1, k_max + 1), dtype=complex)
    logs = np.zeros((d_max + 1, k_max + 1))
    prev = np.ones(d_max + 1, dtype=complex)
    vals[:, 0] = prev
    if k_max == 0:
        return vals, logs
    cur = 1.0 + d - x
    vals[:, 1] = cur
    scale = np.zeros(d_max + 1)
    for k in range(1, k_max):
        nxt = ((2 * k + 1 + d - x) * cur - (k + d) * prev) / (k + 1)
        prev, cur = cur, nxt
        mag = np.maximum(np.abs(cur), np.abs(prev))
        resc = (mag > 1e100) | ((mag < 1e-100) & (mag > 0))
        if resc.any():
            f = np.where(resc, mag, 1.0)
            cur = cur / f
            prev = prev / f
            scale = scale + np.log(f)
        vals[:, k + 1] = cur
        logs[:, k + 1] = scale
    return vals, logs


def factored_block(z1: complex, z2: complex, z3: complex, decay: float,
                   n_rows: int, n_cols: int | None = None) -> np.ndarray:
    """Fock-basis block of ``e^{z1} e^{-decay N} e^{z2 a^dag} e^{z3 a}``.

    For row ``m`` and column ``n`` with ``m >= n`` the element is
    ``e^{z1 - decay m} sqrt(n!/m!) z2^(m-n) L_n^{(m-n)}(-z2 z3)``; the upper
    triangle swaps the roles of ``z2`` and ``z3``.  These are exact matrix
    elements of the untruncated operator.
    """
    if n_cols is None:
        n_cols = n_rows
    x = -complex(z2) * complex(z3)
    m = np.arange(n_rows)[:, None]
    n = np.arange(n_cols)[None, :]
    diff = m - n
    d = np.abs(diff)
    k = np.minimum(m, n)
    vals, logs = _laguerre_table(x, max(n_rows, n_cols) - 1, min(n_rows, n_cols) - 1)
    lv = vals[d, k]
    zz = np.where(diff >= 0, complex(z2), complex(z3))
    with np.errstate(divide="ignore", invalid="ignore"):
        logz = np.where(d > 0, d * np.log(zz.astype(complex)), 0.0)
        lg = gammaln(np.arange(max(n_rows, n_cols)) + 1.0)
        big = np.maximum(m, n)
        logpref = (complex(z1) - decay * m + 0.5 * (lg[k] - lg[big]) + logz + logs[d, k])
        logpref = logpref + np.log(lv)
        out = np.exp(logpref)
    out[~np.isfinite(out)] = 0.0
    out[lv == 0] = 0.0
    return out


def block_matrices(fp: FactoredPropagator, n: int):
    """The two field blocks of ``M`` (sigma_y = +1 first)."""
    return [factored_block(fp.z1, fp.z2(s), fp.z3(s), fp.decay, n) for s in BLOCKS]


def _join_blocks(blocks, n: int) -> np.ndarray:
    pm = np.zeros((2 * n, 2 * n), dtype=complex)
    pm[:n, :n] = blocks[0]
    pm[n:, n:] = blocks[1]
    return from_pm(pm, n)


def _guard_top(blocks, n: int, tol: float) -> None:
    """Population pushed from the lower half into the top two levels."""
    if n < 8:
        return
    for b in blocks:
        ref = np.linalg.norm(b[: n // 2, : n // 2])
        leak = np.linalg.norm(b[n - 2:, : n // 2])
        if ref > 0 and leak > tol * ref:
            raise TruncationError(
                f"top two Fock rows carry relative weight {leak / ref:.3g} > {tol:g}")


def materialize(fp: FactoredPropagator, params: SystemParams, guard: bool = True) -> np.ndarray:
    """Dense joint-space matrix of the factored ``M(t)``.

    Raises
    ------
    TruncationError
        If the top two Fock rows receive more than ``params.tol`` of the
        weight of the lower half of the columns.
    """
    n = params.n_fock
    blocks = block_matrices(fp, n)
    if guard:
        _guard_top(blocks, n, params.tol)
    return _join_blocks(blocks, n)


def build_N(t: float, params: SystemParams, guard: bool = True) -> np.ndarray:
    """Approximate smooth propagator ``N(t) = e^{-gamma |beta|^2 t/2} M(t)``."""
    fp = factorize_M(t, params)
    return fp.beta_damp * materialize(fp, params, guard=guard)


# Generators on the joint space ---------------------------------------------

def smooth_generator(params: SystemParams, exact: bool) -> np.ndarray:
    """``-i H + E(a^dag - a) - gamma(a^dag a + |beta|^2)/2``.

    ``H`` is the full interaction when ``exact`` and ``H0`` otherwise.
    """
    a = make_annihilator(params)
    ad = a.conj().T
    hs = make_hamiltonians(params)
    H = hs.H_int if exact else hs.H0
    gam = params.gamma
    return (-1j * H + params.E * (ad - a)
            - 0.5 * gam * (ad @ a + abs(params.beta) ** 2 * np.eye(params.dim)))


def build_N0(t: float, params: SystemParams) -> np.ndarray:
    """Exact smooth (no-count) propagator by dense matrix exponential."""
    if t < 0:
        raise ValueError("t must be non-negative")
    return matrix_exponential(smooth_generator(params, exact=True), t)


def corollary_factor(t: float, params: SystemParams) -> np.ndarray:
    """``e^{-g^2 t^2/8} e^{i g t sigma_y a^dag/2} e^{i g t sigma_y a/2}``, dense."""
    n = params.n_fock
    g = params.g
    blocks = [factored_block(-g * g * t * t / 8, 0.5j * g * t * s, 0.5j * g * t * s, 0.0, n)
              for s in BLOCKS]
    _guard_top(blocks, n, params.tol)
    return _join_blocks(blocks, n)


def jump_prefactor(k: int) -> complex:
    """``exp(i pi (k - 1) / 2)``; multiply by ``sqrt(gamma/2)`` for ``f_k``."""
    if k not in (1, 2):
        raise ValueError("detector label must be 1 or 2")
    return 1.0 if k == 1 else 1.0j


def commuted_jump_factor(k: int, t: float, params: SystemParams) -> np.ndarray:
    """``A_k(t)`` with ``C_k M(t) = M(t) A_k(t)``.

    ``A_k = f_k [e^{-gamma t/2} a + (1 - e^{-gamma t/2})(2E + i g sigma_y)/gamma
    + (-1)^k beta]``.
    """
    gam = params.gamma
    f = math.sqrt(gam / 2) * jump_prefactor(k)
    p = math.exp(-0.5 * gam * t)
    a = make_annihilator(params)
    sy = make_atomic_ops(params).sigma_y
    one = np.eye(params.dim)
    return f * (p * a + (-math.expm1(-0.5 * gam * t)) / gam * (2 * params.E * one + 1j * params.g * sy)
                + (-1) ** k * params.beta * one)


# Identity checks against a dense exponential -------------------------------

class IdentityCheck(NamedTuple):
    """Worst relative Frobenius residual over the two eigenblocks."""

    residual: float
    levels: int
    columns: int
    mode: str


def block_generator(c: complex, decay_rate: float, n: int) -> np.ndarray:
    """Single-mode ``c a^dag - conj(c) a - decay_rate a^dag a``."""
    a = field_annihilator(n)
    return c * a.conj().T - np.conj(c) * a - decay_rate * field_number(n)


def _plan(radius: float, shift: float, n_levels_cap: int, window: int):
    """Choose checked columns and oracle size.

    The band plan checks every column with ``sqrt(n) <= radius``; a coherent
    component inside that disk never leaves it under ``M``, so an oracle with
    ``(radius + 6)^2`` levels is free of truncation effects there.  If that is
    too large, a low window of columns is checked with an oracle that covers
    the window displaced by ``shift``.
    """
    n_band = int(math.ceil((radius + 6.0) ** 2))
    if n_band <= n_levels_cap:
        return n_band, int(math.floor(radius * radius)) + 1, "band"
    n_win = int(math.ceil((math.sqrt(window) + shift + 6.0) ** 2))
    if n_win <= n_levels_cap:
        return n_win, window, "window"
    raise OracleBudgetError(
        f"reference exponential needs {min(n_band, n_win)} levels, limit {n_levels_cap}")


def _rel(a: np.ndarray, b: np.ndarray) -> float:
    nb = np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / nb) if nb > 0 else float(np.linalg.norm(a))


def _check_top(oracle: np.ndarray, cols: int) -> None:
    sub = oracle[:, :cols]
    top = np.linalg.norm(sub[-2:])
    if top > 1e-12 * np.linalg.norm(sub):
        raise TruncationError("reference exponential reaches the top Fock levels")


class _Oracle:
    """Cache of dense single-block exponentials keyed by generator data."""

    def __init__(self):
        self._store = {}

    def get(self, c: complex, decay_rate: float, t: float, n: int) -> np.ndarray:
        key = (complex(c), float(decay_rate), float(t), int(n))
        if key not in self._store:
            # a and a^dag a are real, so conjugating c conjugates the exponential.
            twin = (key[0].conjugate(),) + key[1:]
            if twin in self._store:
                self._store[key] = self._store[twin].conj()
            else:
                self._store[key] = matrix_exponential(block_generator(c, decay_rate, n), t)
        return self._store[key]

    def clear(self):
        self._store.clear()


ORACLE = _Oracle()


def _m_plan(t: float, params: SystemParams, max_levels: int, window: int):
    amp = abs(params.alpha)
    shift = amp * (-math.expm1(-0.5 * params.gamma * t))
    return _plan(max(amp, 4.0), shift, max_levels, window)


def check_theorem1(t: float, params: SystemParams, max_levels: int = 1500,
                   window: int = 64, cache: _Oracle | None = ORACLE) -> IdentityCheck:
    """Factored ``M(t)`` against ``exp(t * generator)`` on each eigenblock.

    Raises
    ------
    OracleBudgetError
        If no column plan fits within ``max_levels`` field levels.
    """
    levels, cols, mode = _m_plan(t, params, max_levels, window)
    fp = factorize_M(t, params)
    worst = 0.0
    for s in BLOCKS:
        c = complex(params.E, 0.5 * params.g * s)
        ref = (cache or _Oracle()).get(c, 0.5 * params.gamma, t, levels)
        _check_top(ref, cols)
        fac = factored_block(fp.z1, fp.z2(s), fp.z3(s), fp.decay, levels, cols)
        worst = max(worst, _rel(fac, ref[:, :cols]))
    return IdentityCheck(worst, levels, cols, mode)


def check_theorem2(k: int, t: float, params: SystemParams, max_levels: int = 1500,
                   window: int = 64, cache: _Oracle | None = ORACLE) -> IdentityCheck:
    """``C_k M(t)`` against ``M(t) A_k(t)`` with ``M`` from the dense exponential."""
    levels, cols, mode = _m_plan(t, params, max_levels, window)
    gam = params.gamma
    f = math.sqrt(gam / 2) * jump_prefactor(k)
    sign = (-1) ** k
    p = math.exp(-0.5 * gam * t)
    a = field_annihilator(levels)
    worst = 0.0
    for s in BLOCKS:
        c = complex(params.E, 0.5 * params.g * s)
        ref = (cache or _Oracle()).get(c, 0.5 * gam, t, levels)
        _check_top(ref, cols)
        Ck = f * (a + sign * params.beta * np.eye(levels))
        const = (-math.expm1(-0.5 * gam * t)) * complex(2 * params.E, params.g * s) / gam
        Ak = f * (p * a + (const + sign * params.beta) * np.eye(levels))
        lhs = Ck @ ref[:, :cols]
        rhs = ref @ Ak[:, :cols]
        worst = max(worst, _rel(rhs, lhs))
    return IdentityCheck(worst, levels, cols, mode)


def check_corollary(t: float, params: SystemParams, max_levels: int = 1500,
                    window: int = 64, cache: _Oracle | None = ORACLE) -> IdentityCheck:
    """Factored ``exp(-i H0 t)`` against its dense exponential."""
    shift = 0.5 * abs(params.g) * t
    levels, cols, mode = _plan(math.sqrt(window), shift, max_levels, window)
    if mode == "band":
        # A unitary displacement moves every column, so the band plan must
        # also leave room for the shift.
        levels = int(math.ceil((math.sqrt(window) + shift + 6.0) ** 2))
        cols = window
        if levels > max_levels:
            raise OracleBudgetError(f"reference exponential needs {levels} levels")
    g = params.g
    worst = 0.0
    for s in BLOCKS:
        ref = (cache or _Oracle()).get(0.5j * g * s, 0.0, t, levels)
        _check_top(ref, cols)
        z = 0.5j * g * t * s
        fac = factored_block(-g * g * t * t / 8, z, z, 0.0, levels, cols)
        worst = max(worst, _rel(fac, ref[:, :cols]))
    return IdentityCheck(worst, levels, cols, "window")


# Faithful three-dimensional representation ----------------------------------
#
# a^dag a -> diag(0, 1, 0), a -> E_01, a^dag -> E_12 and the central unit
# -> E_02 preserve every commutator of the oscillator algebra, and the image of
# the group is faithful, so identities among exponentials of its elements can
# be checked exactly with 3x3 matrices.  Scalars such as e^{Z1} are exponentials
# of the central unit and map to I + Z1 E_02.

def oscillator_rep(number: complex = 0, create: complex = 0, annihilate: complex = 0,
                   one: complex = 0) -> np.ndarray:
    r = np.zeros((3, 3), dtype=complex)
    r[1, 1] = number
    r[0, 1] = annihilate
    r[1, 2] = create
    r[0, 2] = one
    return r


def _expm3(r: np.ndarray) -> np.ndarray:
    return scipy.linalg.expm(r)


def rep_theorem1(t: float, params: SystemParams) -> float:
    """Largest entry-wise mismatch of the factorization in the 3x3 image."""
    fp = factorize_M(t, params)
    worst = 0.0
    for s in BLOCKS:
        c = complex(params.E, 0.5 * params.g * s)
        lhs = _expm3(t * oscillator_rep(-0.5 * params.gamma, c, -np.conj(c)))
        rhs = (_expm3(oscillator_rep(one=fp.z1)) @ _expm3(oscillator_rep(-fp.decay))
               @ _expm3(oscillator_rep(create=fp.z2(s))) @ _expm3(oscillator_rep(annihilate=fp.z3(s))))
        worst = max(worst, float(np.abs(lhs - rhs).max() / np.abs(lhs).max()))
    return worst


def rep_theorem2(k: int, t: float, params: SystemParams) -> float:
    gam = params.gamma
    f = math.sqrt(gam / 2) * jump_prefactor(k)
    sign = (-1) ** k
    p = math.exp(-0.5 * gam * t)
    worst = 0.0
    for s in BLOCKS:
        c = complex(params.E, 0.5 * params.g * s)
        m = _expm3(t * oscillator_rep(-0.5 * gam, c, -np.conj(c)))
        ck = oscillator_rep(annihilate=f, one=f * sign * params.beta)
        const = (1 - p) * complex(2 * params.E, params.g * s) / gam
        ak = oscillator_rep(annihilate=f * p, one=f * (const + sign * params.beta))
        lhs = np.linalg.solve(m, ck @ m)
        worst = max(worst, float(np.abs(lhs - ak).max() / max(np.abs(ak).max(), 1e-300)))
    return worst


def rep_corollary(t: float, params: SystemParams) -> float:
    g = params.g
    worst = 0.0
    for s in BLOCKS:
        z = 0.5j * g * t * s
        lhs = _expm3(t * oscillator_rep(create=0.5j * g * s, annihilate=0.5j * g * s))
        rhs = (_expm3(oscillator_rep(one=-g * g * t * t / 8)) @ _expm3(oscillator_rep(create=z))
               @ _expm3(oscillator_rep(annihilate=z)))
        worst = max(worst, float(np.abs(lhs - rhs).max() / np.abs(lhs).max()))
    return worst
