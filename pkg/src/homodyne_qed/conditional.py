"""Closed-form conditional states under the slow-time approximation.

Between counts the state evolves with ``N(t)``; a count on detector ``k`` at
time ``t`` contributes ``C_k N(t) = N(t) A_k(t)`` where
``A_k(t) = f_k [x a + (1 - x) B + (-1)^k beta]``, ``x = e^{-gamma t/2}``,
``B = (2E + i g sigma_y)/gamma`` and ``|f_k|^2 = gamma/2``.  The operators
``a`` and ``sigma_y`` commute, so every ``A_k(t)`` commutes with every other
and the conditional state is ``N(dt) G N(dt)^dag`` with ``G`` built from
time integrals of ``A_k rho A_k^dag``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import flint
import numpy as np
import scipy.linalg

from .disentangle import build_N, factorize_M
from .dynamics import _a_left, _ad_right, _view, build_rho_ss
from .errors import CostError, DomainError, TruncationError, ZeroProbability
from .extended import (MAX_PREC, InputPrecisionError, LowRankState, count_step, propagate, tail,
                       steady_low_rank)
from .hilbert import PM_BASIS, SIGMA_Y, SystemParams, trace_distance
from .jumps import ConditionalResult, PhotocountRecord

# c_i(x) for x = e^{-gamma t/2}, as coefficients of 1, x, x^2.
_BASIS = (np.array([0.0, 1.0, 0.0]),    # x        multiplies a
          np.array([1.0, -1.0, 0.0]),   # 1 - x    multiplies B
          np.array([1.0, 0.0, 0.0]))    # 1        multiplies (-1)^k beta


def _poly_mul(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    return np.convolve(p, q)[:3]


def exp_poly_integral(coeffs: Sequence[float], h: float) -> float:
    """``int_0^h sum_j c_j e^{-j s} ds`` without cancellation at small ``h``."""
    c = np.asarray(coeffs, dtype=float)
    j = np.arange(len(c), dtype=float)
    if h < 0.5:
        total, term_h = 0.0, h
        for n in range(40):
            moment = float(np.sum(c * (-j) ** n))
            total += moment * term_h
            term_h *= h / (n + 2)
            if abs(term_h) < 1e-18 * max(abs(total), 1e-300) and n > 3:
                break
        return total
    out = c[0] * h
    for jj in range(1, len(c)):
        out += c[jj] * (-math.expm1(-jj * h)) / jj
    return float(out)


def coefficient_table(dt_total: float, gamma: float) -> np.ndarray:
    """``T_ij = int_0^dt c_i(t) c_j(t) dt`` for ``c = (x, 1 - x, 1)``."""
    h = 0.5 * gamma * dt_total
    T = np.empty((3, 3))
    for i in range(3):
        for j in range(3):
            T[i, j] = 2.0 / gamma * exp_poly_integral(_poly_mul(_BASIS[i], _BASIS[j]), h)
    return T


def _sy_left(r):
    return np.einsum("ab,...bncm->...ancm", SIGMA_Y, r)


def _sy_right(r):
    return np.einsum("...ancm,cd->...andm", r, SIGMA_Y)


@dataclass(frozen=True)
class CountSuperop:
    """``rho -> int_0^dt A'_k(t) rho A'_k(t)^dag dt`` with ``A'_k = A_k / f_k``.

    ``table[i, j]`` multiplies ``X_i rho X_j^dag`` with ``X = (a, B, (-1)^k beta)``.
    """

    k: int
    dt_total: float
    table: np.ndarray
    params: SystemParams

    def _left(self, i: int, r: np.ndarray) -> np.ndarray:
        p = self.params
        if i == 0:
            return _a_left(r, _sqrt_levels(p.n_fock))
        if i == 1:
            return (2 * p.E * r + 1j * p.g * _sy_left(r)) / p.gamma
        return (-1) ** self.k * p.beta * r

    def _right_dag(self, j: int, r: np.ndarray) -> np.ndarray:
        p = self.params
        if j == 0:
            return _ad_right(r, _sqrt_levels(p.n_fock))
        if j == 1:
            return (2 * p.E * r - 1j * p.g * _sy_right(r)) / p.gamma
        return (-1) ** self.k * np.conj(p.beta) * r

    def __call__(self, rho: np.ndarray) -> np.ndarray:
        return apply_table(self, self.table, rho)


def apply_table(op: CountSuperop, table: np.ndarray, rho: np.ndarray) -> np.ndarray:
    """``sum_ij table[i, j] X_i rho X_j^dag``."""
    n = op.params.n_fock
    r = _view(np.asarray(rho, dtype=complex), n)
    right = [op._right_dag(j, r) for j in range(3)]
    out = np.zeros_like(r)
    for i in range(3):
        inner = sum(table[i, j] * right[j] for j in range(3) if table[i, j] != 0)
        if not isinstance(inner, np.ndarray):
            continue
        out += op._left(i, inner)
    return out.reshape(rho.shape)


def _sqrt_levels(n: int) -> np.ndarray:
    return np.sqrt(np.arange(n, dtype=float))


def count_superop(k: int, dt_total: float, params: SystemParams) -> CountSuperop:
    """Per-count map of the symmetrized engine (closed-form coefficients)."""
    if k not in (1, 2):
        raise ValueError("detector label must be 1 or 2")
    if not dt_total > 0:
        raise ValueError("dt_total must be positive")
    return CountSuperop(k, float(dt_total), coefficient_table(dt_total, params.gamma), params)


def _monomial_tables():
    """``P[l]`` with ``c_i c_j = sum_l P[l][i, j] x^l``."""
    P = np.zeros((3, 3, 3))
    for i in range(3):
        for j in range(3):
            P[:, i, j] = _poly_mul(_BASIS[i], _BASIS[j])
    return P


def ordered_exponential_integral(rates: Sequence[float], T: float) -> float:
    """``int_{0<t1<..<tm<T} exp(-sum_p rates[p] t_p) dt``.

    With ``R_p = sum_{q>=p} rates[q]`` the nested integrals obey a linear
    system with constant lower-bidiagonal matrix (diagonal ``-R_{p+1}``,
    unit subdiagonal), so the value is one entry of its exponential.
    """
    m = len(rates)
    if m == 0:
        return 1.0
    tail = np.append(np.cumsum(np.asarray(rates, dtype=float)[::-1])[::-1], 0.0)
    A = np.diag(-tail) + np.diag(np.ones(m), -1)
    return float(scipy.linalg.expm(A * T)[m, 0])


# Conditional state ---------------------------------------------------------------

def _log_prefactor(m: int, gamma: float, ordering: str) -> float:
    out = m * math.log(gamma / 2)
    if ordering == "symmetric":
        out -= math.lgamma(m + 1)
    return out


def _check_top(unnorm: np.ndarray, params: SystemParams) -> None:
    n = params.n_fock
    d = np.real(np.diagonal(unnorm)).reshape(2, n)
    tr = d.sum()
    top = d[:, n - 2:].sum()
    if tr > 0 and top > params.leak_tol * tr:
        raise TruncationError(f"conditional state puts {top / tr:.3g} of its weight "
                              "in the top two Fock levels")


def _symmetric_G(rho0, labels, dt_total, params):
    G = np.array(rho0, dtype=complex)
    log_scale = 0.0
    for k in labels:
        G = count_superop(k, dt_total, params)(G)
        s = float(np.trace(G).real)
        if not s > 0:
            raise ZeroProbability(f"record {labels} has vanishing weight")
        G /= s
        log_scale += math.log(s)
    return G, log_scale


def _ordered_G(rho0, labels, dt_total, params, max_terms):
    m = len(labels)
    if 3**m > max_terms:
        raise CostError(f"ordered engine needs 3^{m} terms, budget {max_terms}")
    P = _monomial_tables()
    ops = [CountSuperop(k, dt_total, np.zeros((3, 3)), params) for k in labels]
    lam = 0.5 * params.gamma
    G = np.zeros_like(np.asarray(rho0, dtype=complex))

    def walk(p, state, ls):
        nonlocal G
        if p == m:
            G += ordered_exponential_integral([lam * l for l in ls], dt_total) * state
            return
        for l in range(3):
            walk(p + 1, apply_table(ops[p], P[l], state), ls + (l,))

    walk(0, np.asarray(rho0, dtype=complex), ())
    s = float(np.trace(G).real)
    if not s > 0:
        raise ZeroProbability(f"record {labels} has vanishing weight")
    return G / s, math.log(s)


TAIL_LEVELS = 4


def _check_input_tail(state, out, dt_total, params):
    """Raise if the top input levels matter after propagation.

    ``N`` can shrink the bulk of a displaced state by many orders of
    magnitude while amplifying its highest Fock components, so a cutoff that
    holds the input well can still be too low for the output.  The image of
    the top ``TAIL_LEVELS`` input levels stands in for that of the levels
    the truncation already dropped; one significant figure is enough.
    """
    top = tail(state, TAIL_LEVELS)
    if top is None:
        return
    ratio = float((propagate(top, dt_total, params, bits=8).trace() / out.trace()).mid())
    if ratio > params.leak_tol:
        raise TruncationError(f"the top {TAIL_LEVELS} input Fock levels carry {ratio:.3g} "
                              "of the propagated weight; raise n_fock")


def _extended_sandwich(rho0, labels, dt_total, params):
    """``N G N^dag`` (unnormalized, factored) and ``log`` of the per-count scales.

    Counts are applied at ``prec`` bits; when the propagation reports that its
    input is the accuracy bottleneck the whole chain is redone with four
    times the bits, rebuilding ``rho0`` if it knows how.
    """
    base = rho0 if isinstance(rho0, LowRankState) else LowRankState.from_density(rho0, params)
    table = coefficient_table(dt_total, params.gamma) if labels else None
    prec = 256
    while True:
        state = base if prec == 256 or base.rebuild is None else base.rebuild(prec)
        log_g = 0.0
        try:
            with flint.ctx.workprec(prec):
                for k in labels:
                    state = count_step(state, k, table, params, prec)
                    s = state.trace()
                    if not s > 0:
                        raise ZeroProbability(f"record {labels} has vanishing weight")
                    state = state.scaled(1 / s.sqrt())
                    log_g += float(s.log().mid())
            out = propagate(state, dt_total, params)
            _check_input_tail(state, out, dt_total, params)
            return out, log_g
        except InputPrecisionError:
            if prec >= MAX_PREC or (base.rebuild is None and not labels):
                raise
            prec *= 4


def conditional_state(rho0, record_labels: Sequence[int], dt_total: float,
                      params: SystemParams, ordering: str = "symmetric",
                      max_terms: int = 3**7, precision: str = "double") -> ConditionalResult:
    """Conditional state and probability of a label sequence.

    Parameters
    ----------
    ordering : {"symmetric", "ordered"}
        ``"symmetric"`` integrates every count over the whole interval and
        divides by ``m!``, i.e. ``p rho_c = gamma^m/(2^m m!) N G N^dag`` with
        ``G`` a product of per-count maps.  This is exact when the record's
        labels are all equal or ``rho0`` is permutation-insensitive (such as
        the steady state); in general it returns the average over label
        orders.  ``"ordered"`` integrates over ``t1 < ... < tm`` with labels
        attached in order, which is the exact probability of the sequence.
    precision : {"double", "extended"}
        ``"extended"`` keeps the state as block-factored vectors in ball
        arithmetic and applies ``N`` with adaptive precision; it is needed
        when ``gamma |alpha|^2 dt_total`` is large, where ``N`` cancels
        catastrophically in double precision.  Only the symmetric ordering
        is available there.  ``rho0`` may be a ``LowRankState`` (preferred for
        displaced states, see ``steady_low_rank``) or a dense matrix.

    Raises
    ------
    TruncationError
        If the result reaches the top Fock levels.
    ZeroProbability
        If the weight underflows.
    """
    labels = tuple(int(k) for k in record_labels)
    if any(k not in (1, 2) for k in labels):
        raise ValueError("labels must be 1 or 2")
    m = len(labels)
    if dt_total < 0:
        raise ValueError("dt_total must be non-negative")
    if m and dt_total == 0:
        raise ZeroProbability("counts in an empty interval")
    if precision == "extended":
        if ordering != "symmetric":
            raise ValueError("extended precision supports only the symmetric ordering")
        out, log_g = _extended_sandwich(rho0, labels, dt_total, params)
        tr = out.trace()
        if not tr > 0:
            raise ZeroProbability(f"record {labels} has vanishing weight")
        rho_c = out.scaled(1 / tr.sqrt()).to_dm()
        _check_top(rho_c, params)
        log_w = log_g + float(tr.log().mid()) + _log_prefactor(m, params.gamma, ordering)
        return _finish(rho_c, log_w, labels, dt_total)
    if precision != "double":
        raise ValueError(f"unknown precision {precision!r}")
    if isinstance(rho0, LowRankState):
        rho0 = rho0.to_dm()
    if ordering == "symmetric":
        G, log_g = _symmetric_G(rho0, labels, dt_total, params)
    elif ordering == "ordered":
        G, log_g = _ordered_G(rho0, labels, dt_total, params, max_terms)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    N = build_N(dt_total, params)
    unnorm = N @ G @ N.conj().T
    _check_top(unnorm, params)
    tr = float(np.trace(unnorm).real)
    if not tr > 0:
        raise ZeroProbability(f"record {labels} has vanishing weight")
    log_w = log_g + math.log(tr) + _log_prefactor(m, params.gamma, ordering)
    return _finish(unnorm / tr, log_w, labels, dt_total)


def _finish(rho_c, log_w, labels, dt_total) -> ConditionalResult:
    if log_w < math.log(np.finfo(float).tiny):
        raise ZeroProbability(f"record {labels} has weight exp({log_w:.4g})")
    rho_c = 0.5 * (rho_c + rho_c.conj().T)
    return ConditionalResult(rho_c, math.exp(log_w), PhotocountRecord(labels, dt_total), log_w)


def total_weight(rho0: np.ndarray, dt_total: float, params: SystemParams, m_max: int,
                 ordering: str = "symmetric") -> float:
    """Sum of record probabilities over every label sequence with ``m <= m_max``."""
    total = 0.0
    for m in range(m_max + 1):
        for labels in itertools.product((1, 2), repeat=m):
            total += conditional_state(rho0, labels, dt_total, params, ordering).weight
    return total


# Steady-state specializations ----------------------------------------------------

class SmoothCheck(NamedTuple):
    proportionality: float
    """``tr[N rho_ss N^dag]``."""
    residual: float
    """``|| N rho_ss N^dag / c - rho_ss ||_F``."""
    scalar_residual: float
    """``|(alpha + Z2+) e^{-gamma dt/2} - alpha|``."""


def smooth_on_steady(dt_total: float, params: SystemParams,
                     precision: str = "extended") -> SmoothCheck:
    """Invariance of the steady state under smooth evolution.

    The default ``precision="extended"`` propagates the two coherent factors
    of ``rho_ss`` in ball arithmetic; ``"double"`` uses the dense ``N``,
    which loses all accuracy once ``gamma |alpha|^2 dt_total`` is a few tens.
    """
    if dt_total < 0:
        raise ValueError("dt_total must be non-negative")
    ss = build_rho_ss(params)
    if precision == "extended":
        out, _ = _extended_sandwich(steady_low_rank(params), (), dt_total, params)
        tr = out.trace()
        c = float(tr.mid())
        residual = float(np.linalg.norm(out.scaled(1 / tr.sqrt()).to_dm() - ss))
    elif precision == "double":
        N = build_N(dt_total, params)
        out = N @ ss @ N.conj().T
        c = float(np.trace(out).real)
        residual = float(np.linalg.norm(out / c - ss))
    else:
        raise ValueError(f"unknown precision {precision!r}")
    fp = factorize_M(dt_total, params)
    alpha = params.alpha
    scalar = abs((alpha + fp.z2_plus) * math.exp(-0.5 * params.gamma * dt_total) - alpha)
    return SmoothCheck(c, residual, scalar)


class InvarianceCheck(NamedTuple):
    distance: float
    """Trace distance between the conditional state and ``rho_ss``."""
    scalar_error: float
    """Relative Frobenius error of ``G`` against its scalar closed form."""
    weight: float


def steady_scalar(record_labels: Sequence[int], dt_total: float, params: SystemParams) -> float:
    """``dt^m prod_p [(4E^2 + g^2)/gamma^2 + (-1)^k 4 E beta/gamma + beta^2]``."""
    g, E, gam, b = params.g, params.E, params.gamma, params.beta.real
    out = 1.0
    for k in record_labels:
        out *= dt_total * ((4 * E * E + g * g) / gam**2 + (-1) ** k * 4 * E * b / gam + b * b)
    return out


def real_beta_invariance(record_labels: Sequence[int], dt_total: float,
                         params: SystemParams, precision: str = "extended") -> InvarianceCheck:
    """For real ``beta`` every record leaves the steady state unchanged.

    The distance uses ``conditional_state`` at the given precision; the
    scalar form is checked on the double-precision ``G``.

    Raises
    ------
    DomainError
        If ``beta`` has a non-zero imaginary part.
    """
    if params.beta.imag != 0:
        raise DomainError(f"beta must be real, got {params.beta}")
    ss = build_rho_ss(params)
    start = steady_low_rank(params) if precision == "extended" else ss
    res = conditional_state(start, record_labels, dt_total, params, precision=precision)
    G, log_g = _symmetric_G(ss, tuple(record_labels), dt_total, params)
    scalar = steady_scalar(record_labels, dt_total, params)
    err = np.linalg.norm(G * math.exp(log_g) - scalar * ss) / (abs(scalar) * np.linalg.norm(ss))
    return InvarianceCheck(trace_distance(res.rho_c, ss), float(err), res.weight)


def _imag_beta(params: SystemParams) -> float:
    beta0 = params.beta.imag
    if params.beta.real != 0:
        raise DomainError(f"beta must be purely imaginary, got {params.beta}")
    if beta0 == 0 or params.g == 0:
        raise DomainError("ratio undefined for beta0 = 0 or g = 0")
    return beta0


def ratio_parameter(params: SystemParams) -> float:
    """``b = (4E^2 + g^2 + gamma^2 beta0^2) / (2 g gamma beta0)`` for ``beta = i beta0``."""
    beta0 = _imag_beta(params)
    g, E, gam = params.g, params.E, params.gamma
    return (4 * E * E + g * g + gam * gam * beta0 * beta0) / (2 * g * gam * beta0)


def eigenvalue_ratio(record_labels: Sequence[int], dt_total: float, params: SystemParams,
                     form: str = "printed") -> float:
    """``lambda_1 / lambda_2`` of the steady state conditioned on a record.

    ``form="printed"`` is the product
    ``prod_p (b + e_p) / (b + e_p (1 - 4 (1 - e^{-gamma dt/2}) / (gamma dt)))``
    with ``e_p = (-1)^{k_p}``.  ``form="corrected"`` is
    ``prod_p (b + e_p) / (b - e_p)``, which keeps the ``sigma_y`` term of
    ``A_k A_k^dag`` that the printed product drops; the two agree as
    ``dt -> 0``.

    Raises
    ------
    DomainError
        If ``beta`` is not purely imaginary and non-zero, or ``g = 0``.
    """
    b = ratio_parameter(params)
    out = 1.0
    if form == "printed":
        if not dt_total > 0:
            raise DomainError("dt_total must be positive")
        h = 0.5 * params.gamma * dt_total
        shrink = 1.0 - 2.0 * (-math.expm1(-h)) / h
        for k in record_labels:
            e = (-1) ** k
            out *= (b + e) / (b + e * shrink)
    elif form == "corrected":
        for k in record_labels:
            e = (-1) ** k
            out *= (b + e) / (b - e)
    else:
        raise ValueError(f"unknown form {form!r}")
    return out


def eigenvalue_weights(record_labels: Sequence[int], dt_total: float, params: SystemParams,
                       form: str = "printed") -> tuple[float, float]:
    """``(lambda_1, lambda_2) = (r/(1 + r), 1/(1 + r))``."""
    r = eigenvalue_ratio(record_labels, dt_total, params, form)
    return r / (1 + r), 1 / (1 + r)


def block_traces(rho: np.ndarray, n: int) -> tuple[float, float]:
    """Traces of the ``sigma_y = +1`` and ``sigma_y = -1`` blocks."""
    r = _view(rho, n)
    out = []
    for s in range(2):
        v = PM_BASIS[:, s]
        block = np.einsum("a,anbn->", v.conj(), r * v[None, None, :, None])
        out.append(float(block.real))
    return out[0], out[1]


def block_trace_ratio(rho: np.ndarray, n: int) -> float:
    plus, minus = block_traces(rho, n)
    return plus / minus
