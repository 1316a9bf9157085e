"""Ball-arithmetic evaluation of the approximate smooth propagator on low-rank states.

``N(t)`` shrinks a coherent state of amplitude ``alpha`` by roughly
``exp(-gamma |alpha|^2 t / 2)`` while its Fock-basis entries stay of order
one, so the double-precision product ``N @ psi`` cancels catastrophically once
``gamma |alpha|^2 t`` reaches a few tens.  Here states are kept as factor
vectors in the ``sigma_y`` eigenbasis and ``N`` is applied one factor at a
time in arbitrary-precision interval arithmetic.  The factors ``e^{z3 a}`` and
``e^{z2 a^dag}`` are triangular in the Fock basis, so their truncated product
equals the truncated ``N`` exactly, and in factorial-scaled coordinates each
is a polynomial product.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from flint import acb, acb_poly, arb, ctx

from .disentangle import BLOCKS, factorize_M
from .hilbert import PM_BASIS, SystemParams, to_pm

RESULT_BITS = 60
"""Relative accuracy (in bits) demanded of every propagated block."""
MAX_PREC = 1 << 15


class InputPrecisionError(ArithmeticError):
    """The input vector's own error radius caps the attainable accuracy."""


@dataclass(frozen=True)
class LowRankState:
    """``rho = sum_r v_r v_r^dag`` with each ``v_r`` split into ``sigma_y`` blocks.

    ``factors[r][s]`` is block ``s`` (0 for ``sigma_y = +1``, 1 for ``-1``) of
    ``v_r`` as a list of ``acb`` Fock amplitudes, or ``None`` when that block
    vanishes.
    """

    factors: tuple
    n_fock: int
    rebuild: Callable[[int], "LowRankState"] | None = field(default=None, compare=False)
    """Recreates the state with entries accurate to the given number of bits."""

    @classmethod
    def from_density(cls, rho: np.ndarray, params: SystemParams, cutoff: float = 1e-14):
        """Eigen-factors of a dense state.

        Eigenvectors carry absolute rather than entrywise rounding errors, so
        this gains nothing over double precision for strongly displaced
        states; build those with ``steady_low_rank``.
        """
        n = params.n_fock
        w, V = np.linalg.eigh(to_pm(0.5 * (rho + rho.conj().T), n))
        keep = w > cutoff * max(w.max(), 0.0)
        facs = []
        for lam, v in zip(w[keep], V[:, keep].T):
            v = math.sqrt(lam) * v
            facs.append(tuple(_from_complex(v[s * n:(s + 1) * n]) for s in range(2)))
        return cls(tuple(facs), n)

    def trace(self) -> arb:
        return sum((_norm2(b) for fac in self.factors for b in fac if b is not None), arb(0))

    def scaled(self, c) -> "LowRankState":
        return LowRankState(tuple(tuple(None if b is None else [c * x for x in b] for b in fac)
                                  for fac in self.factors), self.n_fock)

    def to_dm(self) -> np.ndarray:
        """Dense joint-space matrix in the ``g/e`` atomic basis."""
        n = self.n_fock
        v = np.zeros((len(self.factors), 2, n), dtype=complex)
        for r, fac in enumerate(self.factors):
            for s, b in enumerate(fac):
                if b is not None:
                    v[r, s] = [complex(x) for x in b]
        joint = np.einsum("as,rsn->ran", PM_BASIS, v).reshape(len(self.factors), -1)
        return joint.T @ joint.conj()


def _from_complex(v) -> list | None:
    if not np.any(v):
        return None
    return [acb(complex(x).real, complex(x).imag) for x in v]


def _norm2(v) -> arb:
    return sum((abs(x) ** 2 for x in v), arb(0))


def coherent_block(amp: complex, n: int, prec: int = 256) -> list:
    """Renormalized truncated coherent amplitudes."""
    with ctx.workprec(prec):
        amp = acb(amp.real, amp.imag)
        c = [acb(1)]
        for k in range(1, n):
            c.append(c[-1] * amp / arb(k).sqrt())
        norm = _norm2(c).sqrt()
        return [x / norm for x in c]


def steady_low_rank(params: SystemParams, prec: int = 256) -> LowRankState:
    """``rho_ss`` as the block vectors ``|alpha>`` on ``+`` and ``|alpha*>`` on ``-``."""
    n = params.n_fock
    alpha = complex(params.alpha)
    with ctx.workprec(prec):
        half = arb(0.5).sqrt()
        plus = [half * x for x in coherent_block(alpha, n, prec)]
        minus = [half * x for x in coherent_block(alpha.conjugate(), n, prec)]
    return LowRankState(((plus, None), (None, minus)), n,
                        rebuild=lambda p: steady_low_rank(params, p))


def lower(v: list) -> list:
    """``a v`` on one Fock block."""
    return [arb(k + 1).sqrt() * v[k + 1] for k in range(len(v) - 1)] + [acb(0)]


def _scaled_apply(v, z2: complex, z3: complex, n: int) -> list:
    """``e^{z2 a^dag} e^{z3 a} v`` as two polynomial products."""
    z2 = acb(z2.real, z2.imag)
    z3 = acb(z3.real, z3.imag)
    fact = [arb(1)]
    for k in range(1, n):
        fact.append(fact[-1] * k)
    sq = [f.sqrt() for f in fact]
    c, d = [acb(1)], [acb(1)]
    for j in range(1, n):
        c.append(c[-1] * z3 / j)
        d.append(d[-1] * z2 / j)
    # y_m = sqrt(m!) (e^{z3 a} v)_m = sum_j c_j sqrt((m+j)!) v_{m+j}
    u_rev = acb_poly([v[k] * sq[k] for k in range(n - 1, -1, -1)])
    corr = (acb_poly(c) * u_rev).coeffs()
    corr += [acb(0)] * (n - len(corr))
    s = [corr[n - 1 - m] / fact[m] for m in range(n)]
    # (e^{z2 a^dag} w)_m / sqrt(m!) = sum_j d_j w_{m-j} / sqrt((m-j)!)
    conv = (acb_poly(d) * acb_poly(s)).coeffs()
    conv += [acb(0)] * (n - len(conv))
    return [conv[m] * sq[m] for m in range(n)]


def _radius_ratio(blocks) -> float:
    """Root-sum-square error radius over the Frobenius size of a set of blocks."""
    sq = sum((_norm2(b) for b in blocks), arb(0))
    if not sq.is_finite():
        return math.inf
    size = abs(sq.mid()).sqrt()
    rad = sum((x.rad() ** 2 for b in blocks for x in b), arb(0)).sqrt()
    if size == 0:
        return math.inf
    rel = float(rad / size)
    return rel if math.isfinite(rel) else math.inf


def _apply_block(v, sign: int, fp, n: int, prec: int) -> list:
    with ctx.workprec(prec):
        out = _scaled_apply(v, fp.z2(sign), fp.z3(sign), n)
        scale = acb(fp.z1).exp() * fp.beta_damp
        decay = (-arb(fp.decay)).exp()
        return [o * scale * decay ** m for m, o in enumerate(out)]


def propagate(state: LowRankState, t: float, params: SystemParams,
              bits: int = RESULT_BITS) -> LowRankState:
    """``N(t) rho N(t)^dag`` on a factored state.

    The working precision is raised until the combined error radius of all
    propagated blocks is below ``2^-bits`` of their combined norm.

    Raises
    ------
    InputPrecisionError
        If more working precision stops helping because the input blocks
        themselves are not accurate enough.
    ArithmeticError
        If the accuracy is not reached by ``MAX_PREC`` bits.
    """
    n = params.n_fock
    fp = factorize_M(t, params)
    where = [(r, s) for r, fac in enumerate(state.factors) for s, b in enumerate(fac)
             if b is not None]
    inputs = [state.factors[r][s] for r, s in where]
    r_in = _radius_ratio(inputs)
    in_bits = -math.log2(r_in) if r_in > 0 else math.inf
    prec = 128
    last = math.inf
    while True:
        outs = [_apply_block(state.factors[r][s], BLOCKS[s], fp, n, prec) for r, s in where]
        rel = _radius_ratio(outs)
        if rel <= 2.0 ** -bits:
            break
        if prec >= MAX_PREC:
            raise ArithmeticError(f"propagated state reached only {rel:.3g} relative accuracy")
        if rel >= 2.0 ** -8:
            # Every digit cancelled; the radius says nothing about how many
            # bits are missing.
            if prec > in_bits + 64:
                raise InputPrecisionError(f"input accurate to {in_bits:.0f} bits is not enough")
            prec = min(MAX_PREC, 2 * prec)
            continue
        if rel > last * 2.0 ** -32:
            raise InputPrecisionError(f"input accuracy limits the propagated state to {rel:.3g}")
        last = rel
        prec = min(MAX_PREC, int(prec + math.log2(rel) + bits + 32))
    facs = [list(fac) for fac in state.factors]
    for (r, s), o in zip(where, outs):
        facs[r][s] = o
    return LowRankState(tuple(tuple(f) for f in facs), n)


def tail(state: LowRankState, width: int) -> LowRankState | None:
    """The part of ``state`` on its top ``width`` Fock levels, or ``None`` if it vanishes.

    Entries are taken at their midpoints, so the result counts as exact input.
    """
    n = state.n_fock
    facs = []
    for fac in state.factors:
        blocks = []
        for b in fac:
            if b is None or all(x.is_zero() for x in b[n - width:]):
                blocks.append(None)
            else:
                blocks.append([acb(0)] * (n - width) + [acb(x.mid()) for x in b[n - width:]])
        if any(b is not None for b in blocks):
            facs.append(tuple(blocks))
    return LowRankState(tuple(facs), n) if facs else None


def count_step(state: LowRankState, k: int, table: np.ndarray, params: SystemParams,
               prec: int = 128) -> LowRankState:
    """``sum_ij table[i, j] X_i rho X_j^dag`` with ``X = (a, B, (-1)^k beta)``.

    ``table`` is factored as ``Q diag(w) Q^T`` so that the image is again a
    sum of rank-one terms; the rank grows by at most a factor of three.
    """
    w, Q = np.linalg.eigh(0.5 * (table + table.T))
    facs = []
    beta = complex((-1) ** k * params.beta)
    with ctx.workprec(prec):
        for fac in state.factors:
            for lam, q in zip(w, Q.T):
                if not lam > 0:
                    continue
                amp = math.sqrt(lam)
                blocks = []
                for s, b in enumerate(fac):
                    if b is None:
                        blocks.append(None)
                        continue
                    bs = complex(2 * params.E, BLOCKS[s] * params.g) / params.gamma
                    scal = amp * (q[1] * bs + q[2] * beta)
                    ab = lower(b)
                    blocks.append([amp * q[0] * x + acb(scal.real, scal.imag) * y
                                   for x, y in zip(ab, b)])
                facs.append(tuple(blocks))
    return LowRankState(tuple(facs), state.n_fock)
