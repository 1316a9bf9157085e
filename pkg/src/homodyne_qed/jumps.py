"""Photodetection unraveling: jump operators, the Dyson oracle, record sampling.

Detector ``k`` (1 or 2) mixes the cavity output with the local oscillator
``(-1)^k beta`` and has jump operator
``C_k = sqrt(gamma/2) e^{i pi (k-1)/2} (a + (-1)^k beta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import scipy.sparse
import scipy.sparse.linalg

from .disentangle import jump_prefactor, smooth_generator
from .dynamics import LindbladGenerator, lindblad_rhs
from .errors import CostError, DimensionMismatch, StepSizeError, ZeroProbability
from .hilbert import SystemParams, make_annihilator, matrix_exponential


@dataclass(frozen=True)
class PhotocountRecord:
    """Ordered detector labels over an interval, with optional jump times."""

    labels: tuple
    dt_total: float
    times: tuple | None = None

    def __post_init__(self):
        labels = tuple(int(k) for k in self.labels)
        if any(k not in (1, 2) for k in labels):
            raise ValueError(f"labels must be 1 or 2, got {labels}")
        object.__setattr__(self, "labels", labels)
        if self.dt_total < 0:
            raise ValueError("dt_total must be non-negative")
        if self.times is not None:
            times = tuple(float(t) for t in self.times)
            if len(times) != len(labels):
                raise ValueError("labels and times differ in length")
            if any(not 0 < t < self.dt_total for t in times) or any(
                    b <= a for a, b in zip(times, times[1:])):
                raise ValueError("times must be strictly increasing inside (0, dt_total)")
            object.__setattr__(self, "times", times)

    @property
    def m(self) -> int:
        return len(self.labels)

    def to_json(self) -> list:
        ts = self.times if self.times is not None else (None,) * self.m
        return [{"k": k, "t": t} for k, t in zip(self.labels, ts)]


class ConditionalResult(NamedTuple):
    rho_c: np.ndarray
    weight: float
    """Probability of the label sequence (integrated over jump times)."""
    record: PhotocountRecord
    log_weight: float


# Jump operators --------------------------------------------------------------

def jump_operator(k: int, params: SystemParams) -> np.ndarray:
    """``C_k`` on the joint space."""
    f = math.sqrt(params.gamma / 2) * jump_prefactor(k)
    a = make_annihilator(params)
    return f * (a + (-1) ** k * params.beta * np.eye(params.dim))


def apply_jump(k: int, rho: np.ndarray, params: SystemParams) -> np.ndarray:
    """``J_k rho = C_k rho C_k^dag``."""
    c = jump_operator(k, params)
    return c @ rho @ c.conj().T


def _sparse_smooth(params: SystemParams, exact: bool = True):
    return scipy.sparse.csr_matrix(smooth_generator(params, exact))


def lemma1_residual(tau: float, rho: np.ndarray, params: SystemParams) -> float:
    """``|| S0(tau) rho - (1 + tau (L - J1 - J2)) rho ||_F``.

    ``S0(tau) rho = N0 rho N0^dag`` with the exact no-count propagator; the
    action of ``N0`` is computed with a Krylov-free truncated Taylor
    exponential of the sparse generator.
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    K = _sparse_smooth(params)
    half = scipy.sparse.linalg.expm_multiply(tau * K, rho)
    s0 = scipy.sparse.linalg.expm_multiply(tau * K, half.conj().T).conj().T
    gen = LindbladGenerator(params)
    lin = lindblad_rhs(rho, gen) - apply_jump(1, rho, params) - apply_jump(2, rho, params)
    return float(np.linalg.norm(s0 - rho - tau * lin))


# Dyson oracle ------------------------------------------------------------------

class _Propagators:
    """``N0(tau)`` (or its slow-time counterpart) cached by ``tau``.

    Large spaces use one eigendecomposition of the generator when it is
    well conditioned; otherwise each ``tau`` gets a dense exponential.
    """

    def __init__(self, params: SystemParams, exact: bool, eig_cond: float = 1e8):
        self.K = smooth_generator(params, exact)
        self.cache: dict[float, np.ndarray] = {}
        self.eig = None
        if params.dim > 120:
            lam, V = np.linalg.eig(self.K)
            if np.linalg.cond(V) < eig_cond:
                self.eig = (lam, V, np.linalg.inv(V))

    def __call__(self, tau: float) -> np.ndarray:
        key = float(tau)
        out = self.cache.get(key)
        if out is None:
            if self.eig is not None:
                lam, V, Vi = self.eig
                out = (V * np.exp(lam * key)) @ Vi
            else:
                out = matrix_exponential(self.K, key)
            self.cache[key] = out
        return out


def _sandwich(N: np.ndarray, rho: np.ndarray) -> np.ndarray:
    return N @ rho @ N.conj().T


def dyson_flops(m: int, quad_points: int, dim: int) -> float:
    """Rough floating-point cost of ``dyson_oracle``."""
    q = quad_points
    props = 1 + sum(q**j for j in range(1, m + 1)) * 2
    sandwiches = 1 + sum(2 * q**j for j in range(1, m + 1))
    return 8.0 * dim**3 * (20 * props + 2 * sandwiches)


def dyson_oracle(rho0: np.ndarray, record_labels: Sequence[int], dt_total: float,
                 quad_points: int, params: SystemParams, use_exact: bool,
                 max_nodes: int = 100_000, max_flops: float = 2e12) -> ConditionalResult:
    """Time-ordered Dyson integral for one label sequence.

    Evaluates ``int_{0<t1<..<tm<dt} S0(dt - tm) J_km ... J_k1 S0(t1) rho0``
    with tensor-product Gauss-Legendre nodes mapped onto the ordered simplex
    by ``t_p = t_{p+1} u_p``.  ``S0`` uses the full interaction when
    ``use_exact`` and the slow-time interaction otherwise, both through
    dense exponentials of the generator.

    Raises
    ------
    CostError
        If ``quad_points^m`` exceeds ``max_nodes`` or the projected work
        exceeds ``max_flops``.
    """
    labels = tuple(int(k) for k in record_labels)
    m = len(labels)
    if m > 3:
        raise CostError(f"Dyson oracle limited to m <= 3, got {m}")
    if quad_points < 8:
        raise ValueError("quad_points must be at least 8")
    if quad_points**m > max_nodes:
        raise CostError(f"{quad_points}^{m} nodes exceed budget {max_nodes}")
    flops = dyson_flops(m, quad_points, params.dim)
    if flops > max_flops:
        raise CostError(f"projected {flops:.3g} flops exceed budget {max_flops:.3g} "
                        f"(dimension {params.dim})")
    if rho0.shape != (params.dim, params.dim):
        raise DimensionMismatch(f"rho0 has shape {rho0.shape}")
    prop = _Propagators(params, use_exact)
    jumps = [jump_operator(k, params) for k in labels]
    x, w = np.polynomial.legendre.leggauss(quad_points)
    u, w = 0.5 * (x + 1.0), 0.5 * w

    def nested(p: int, t_top: float) -> np.ndarray:
        """``int_{0<t1<..<tp<t_top} S0(t_top - tp) J_kp ... J_k1 S0(t1) rho0``."""
        if p == 0:
            return _sandwich(prop(t_top), rho0)
        acc = np.zeros_like(rho0, dtype=complex)
        for uj, wj in zip(u, w):
            tp = t_top * uj
            inner = nested(p - 1, tp)
            c = jumps[p - 1]
            acc += (wj * t_top) * _sandwich(prop(t_top - tp), c @ inner @ c.conj().T)
        return acc

    unnorm = nested(m, dt_total)
    record = PhotocountRecord(labels, dt_total)
    p = float(np.trace(unnorm).real)
    if not p > 0:
        raise ZeroProbability(f"record {labels} has weight {p!r}")
    rho_c = unnorm / p
    rho_c = 0.5 * (rho_c + rho_c.conj().T)
    return ConditionalResult(rho_c, p, record, math.log(p))


# Record sampling -----------------------------------------------------------------

class _Banded:
    """Banded actions on state factors of shape ``(..., 2, n_fock)``."""

    def __init__(self, params: SystemParams):
        self.p = params
        n = params.n_fock
        self.sq = np.sqrt(np.arange(1, n, dtype=float))
        self.damp = 0.5 * params.gamma * (np.arange(n, dtype=float) + abs(params.beta) ** 2)
        self.f = [math.sqrt(params.gamma / 2) * jump_prefactor(k) for k in (1, 2)]

    def a(self, psi):
        out = np.empty_like(psi)
        np.multiply(self.sq, psi[..., 1:], out=out[..., :-1])
        out[..., -1] = 0
        return out

    def ad(self, psi):
        out = np.empty_like(psi)
        np.multiply(self.sq, psi[..., :-1], out=out[..., 1:])
        out[..., 0] = 0
        return out

    def K(self, psi):
        """No-count generator ``-i H_int + E(a^dag - a) - gamma(N + |beta|^2)/2``."""
        p = self.p
        A = self.a(psi)
        D = self.ad(psi)
        out = D - A
        out *= p.E
        out[..., 0, :] += p.g * D[..., 1, :]
        out[..., 1, :] -= p.g * A[..., 0, :]
        out -= self.damp * psi
        return out

    def jump(self, k, psi):
        return self.f[k - 1] * (self.a(psi) + (-1) ** k * self.p.beta * psi)

    def rk4(self, psi, h, k1=None):
        """One RK4 step; ``h`` broadcasts against the leading axis."""
        h = np.asarray(h, dtype=float).reshape(np.shape(h) + (1,) * (psi.ndim - np.ndim(h)))
        if k1 is None:
            k1 = self.K(psi)
        k2 = self.K(psi + 0.5 * h * k1)
        k3 = self.K(psi + 0.5 * h * k2)
        k4 = self.K(psi + h * k3)
        return psi + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)

    def spectral_bound(self) -> float:
        p = self.p
        n = p.n_fock
        return 0.5 * p.gamma * (n - 1 + abs(p.beta) ** 2) + 2 * (abs(p.g) + abs(p.E)) * math.sqrt(n)


def _norm2(psi):
    return np.sum(np.abs(psi) ** 2, axis=tuple(range(1, psi.ndim)))


def _d_norm2(psi, kpsi):
    return 2.0 * np.sum((psi.conj() * kpsi).real, axis=tuple(range(1, psi.ndim)))


def _hermite_root(f0, f1, d0, d1, h, target, iters: int = 44):
    """Crossing of a monotone cubic Hermite interpolant with ``target``.

    Bisection on the unit interval, vectorized over trajectories.
    """
    lo = np.zeros_like(f0)
    hi = np.ones_like(f0)
    for _ in range(iters):
        s = 0.5 * (lo + hi)
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        val = h00 * f0 + h10 * h * d0 + h01 * f1 + h11 * h * d1
        above = val > target
        lo = np.where(above, s, lo)
        hi = np.where(above, hi, s)
    return 0.5 * (lo + hi) * h


def density_factor(rho: np.ndarray, params: SystemParams, cutoff: float = 1e-14) -> np.ndarray:
    """``Psi`` of shape ``(r, 2, n_fock)`` with ``rho = sum_j psi_j psi_j^dag``."""
    w, V = np.linalg.eigh(0.5 * (rho + rho.conj().T))
    keep = w > cutoff * max(w.max(), 0.0)
    if not keep.any():
        raise ValueError("density matrix has no positive spectrum")
    cols = V[:, keep] * np.sqrt(w[keep])
    return cols.T.reshape(-1, 2, params.n_fock)


def factor_to_dm(psi: np.ndarray) -> np.ndarray:
    flat = psi.reshape(psi.shape[0], -1)
    return flat.T @ flat.conj()


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for trajectory ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


@dataclass
class EnsembleResult:
    """Final factors, records and log-weights of a batch of trajectories."""

    factors: np.ndarray
    """Normalized state factors, shape ``(n_traj, r, 2, n_fock)``."""
    records: list
    log_weights: np.ndarray
    checkpoints: dict = field(default_factory=dict)

    def state(self, i: int) -> np.ndarray:
        return factor_to_dm(self.factors[i])

    def mean_state(self, coeffs: np.ndarray | None = None) -> np.ndarray:
        """``sum_i c_i rho_i`` (uniform ``1/n`` by default)."""
        return mean_of_factors(self.factors, coeffs)


def mean_of_factors(factors: np.ndarray, coeffs: np.ndarray | None = None) -> np.ndarray:
    n = factors.shape[0]
    if coeffs is None:
        coeffs = np.full(n, 1.0 / n)
    phi = factors.reshape(n, factors.shape[1], -1)
    scaled = phi * np.sqrt(coeffs)[:, None, None]
    flat = scaled.reshape(-1, phi.shape[-1])
    return flat.T @ flat.conj()


def check_sampling_step(dt_step: float, params: SystemParams, method: str) -> None:
    """Raise ``StepSizeError`` for steps that do not resolve the dynamics."""
    if params.g and dt_step > 0.02 / abs(params.g) * (1 + 1e-12):
        raise StepSizeError(f"dt_step={dt_step:g} exceeds 0.02/g={0.02 / params.g:g}")
    if method == "first_order":
        rate = params.gamma * (abs(params.alpha) ** 2 + abs(params.beta) ** 2)
        if dt_step * rate > 0.1:
            raise StepSizeError(f"jump probability per step {dt_step * rate:.3g} is not small")
    elif method == "waiting_time":
        if dt_step * _Banded(params).spectral_bound() > 2.5:
            raise StepSizeError(f"dt_step={dt_step:g} outside RK4 stability")
    else:
        raise ValueError(f"unknown sampling method {method!r}")


def sample_ensemble(rho0: np.ndarray, dt_total: float, dt_step: float, n_traj: int,
                    seed: int, params: SystemParams, first_index: int = 0,
                    checkpoints: Sequence[float] = ()) -> EnsembleResult:
    """Waiting-time sampling of ``n_traj`` records, integrated in lock-step.

    Every trajectory draws ``u ~ U(0, 1)`` from its own stream and evolves
    its unnormalized factor under the no-count generator until the squared
    norm falls to ``u``.  The crossing time inside a step comes from cubic
    Hermite interpolation of the (monotone) squared norm; the state is then
    re-integrated to that instant, a detector is chosen with probability
    proportional to ``tr(J_k rho)``, and the jump is applied.

    Parameters
    ----------
    first_index : int
        Stream index of the first trajectory, so that batches can be split.
    checkpoints : sequence of float
        Grid times at which normalized factors are stored.
    """
    check_sampling_step(dt_step, params, "waiting_time")
    ops = _Banded(params)
    base = density_factor(rho0, params)
    B = n_traj
    psi = np.repeat(base[None], B, axis=0)
    rngs = [trajectory_rng(seed, first_index + i) for i in range(B)]
    target = np.array([r.random() for r in rngs])
    logw = np.zeros(B)
    labels = [[] for _ in range(B)]
    times = [[] for _ in range(B)]
    steps = max(1, math.ceil(dt_total / dt_step - 1e-9)) if dt_total > 0 else 0
    h = dt_total / steps if steps else 0.0
    marks = {int(round(tc / h)) if h else 0: tc for tc in checkpoints}
    kept = {}
    if 0 in marks:
        kept[marks[0]] = psi / np.sqrt(_norm2(psi))[:, None, None, None]

    def jump_at(i, state, t):
        """Apply a detector click to trajectory ``i``; returns the new factor."""
        rng = rngs[i]
        n0 = _norm2(state[None])[0]
        c1 = ops.jump(1, state)
        c2 = ops.jump(2, state)
        r1 = _norm2(c1[None])[0]
        r2 = _norm2(c2[None])[0]
        k = 1 if rng.random() * (r1 + r2) < r1 else 2
        new = c1 if k == 1 else c2
        rate = r1 if k == 1 else r2
        logw[i] += math.log(n0) + math.log(rate / n0)
        labels[i].append(k)
        times[i].append(t)
        target[i] = rng.random()
        return new / math.sqrt(rate)

    kpsi = ops.K(psi)
    for step in range(steps):
        t0 = step * h
        start = psi
        new = ops.rk4(psi, h, kpsi)
        knew = ops.K(new)
        f0, f1 = _norm2(start), _norm2(new)
        hit = np.nonzero(f1 <= target)[0]
        if hit.size:
            # Resolve one or more jumps inside this step for each hit trajectory.
            s_psi, s_k = start[hit], kpsi[hit]
            e_psi, e_k = new[hit], knew[hit]
            offset = np.zeros(hit.size)
            active = np.ones(hit.size, dtype=bool)
            while active.any():
                idx = np.nonzero(active)[0]
                rem = h - offset[idx]
                tau = _hermite_root(_norm2(s_psi[idx]), _norm2(e_psi[idx]),
                                    _d_norm2(s_psi[idx], s_k[idx]), _d_norm2(e_psi[idx], e_k[idx]),
                                    rem, target[hit[idx]])
                at = ops.rk4(s_psi[idx], tau)
                for j, loc in enumerate(idx):
                    at[j] = jump_at(hit[loc], at[j], t0 + offset[loc] + tau[j])
                offset[idx] += tau
                rem = h - offset[idx]
                end = ops.rk4(at, rem)
                s_psi[idx], s_k[idx] = at, ops.K(at)
                e_psi[idx], e_k[idx] = end, ops.K(end)
                still = _norm2(end) <= target[hit[idx]]
                active[idx] = still
            new[hit], knew[hit] = e_psi, e_k
        psi, kpsi = new, knew
        # Fold the survival factor into the log-weight and renormalize so
        # that thresholds stay relative to the last rescaling.
        nrm = _norm2(psi)
        logw += np.log(nrm)
        target /= nrm
        psi = psi / np.sqrt(nrm)[:, None, None, None]
        kpsi = kpsi / np.sqrt(nrm)[:, None, None, None]
        if step + 1 in marks:
            kept[marks[step + 1]] = psi.copy()

    records = [PhotocountRecord(tuple(labels[i]), dt_total,
                                tuple(times[i]) if all(0 < x < dt_total for x in times[i]) else None)
               for i in range(B)]
    return EnsembleResult(psi, records, logw, kept)


class Sample(NamedTuple):
    record: PhotocountRecord
    rho: np.ndarray
    log_weight: float


def sample_record(rho0: np.ndarray, dt_total: float, dt_step: float, seed: int,
                  params: SystemParams, method: str = "waiting_time", index: int = 0) -> Sample:
    """Draw one photocount record and its conditional state.

    ``method="first_order"`` applies, per step, a jump with probability
    ``tr(J_k rho) dt_step`` and otherwise the no-count propagator;
    ``"waiting_time"`` samples jump instants from the survival norm (see
    ``sample_ensemble``) and has no first-order bias.  The log-weight is the
    log of the product of all norms removed by renormalization.
    """
    check_sampling_step(dt_step, params, method)
    if method == "waiting_time":
        ens = sample_ensemble(rho0, dt_total, dt_step, 1, seed, params, first_index=index)
        return Sample(ens.records[0], ens.state(0), float(ens.log_weights[0]))

    rng = trajectory_rng(seed, index)
    psi = density_factor(rho0, params).reshape(-1, params.dim).T
    steps = max(1, math.ceil(dt_total / dt_step - 1e-9)) if dt_total > 0 else 0
    h = dt_total / steps if steps else 0.0
    N0 = matrix_exponential(smooth_generator(params, exact=True), h) if steps else None
    C = [jump_operator(k, params) for k in (1, 2)]
    labels, times, logw = [], [], 0.0
    for step in range(steps):
        jumped = [c @ psi for c in C]
        rates = np.array([np.vdot(j, j).real for j in jumped])
        u = rng.random()
        probs = rates * h
        if u < probs.sum():
            k = 1 if u < probs[0] else 2
            psi = jumped[k - 1]
            labels.append(k)
            times.append((step + 0.5) * h)
        else:
            psi = N0 @ psi
        nrm = np.vdot(psi, psi).real
        logw += math.log(nrm)
        psi = psi / math.sqrt(nrm)
    rec = PhotocountRecord(tuple(labels), dt_total, tuple(times))
    return Sample(rec, psi @ psi.conj().T, logw)
