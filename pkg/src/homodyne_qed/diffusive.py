"""Diffusive limit of balanced homodyne detection.

When the local oscillator dominates, the difference photocurrent becomes a
continuous signal and the conditional state obeys the stochastic master
equation

    d rho = L rho dt + sqrt(gamma eta) (e^{-i phi} a rho + e^{i phi} rho a^dag
            - tr[rho (e^{-i phi} a + e^{i phi} a^dag)] rho) dW.

States carry an optional leading batch axis so that ensembles advance in
lock-step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .dynamics import LindbladGenerator, _a_left, _ad_right, _rk4, _view, lindblad_rhs
from .errors import ConfigError, StepSizeError
from .jumps import trajectory_rng


@dataclass(frozen=True)
class SMEConfig:
    """Settings of a homodyne stochastic master equation run.

    Parameters
    ----------
    phi : float
        Local-oscillator phase in radians.
    eta : float
        Detection efficiency, ``0 < eta <= 1``.
    dt : float
        Euler-Maruyama step.
    n_traj : int
        Ensemble size.
    seed : int
        Root seed; trajectory ``i`` uses the stream ``(seed, i)``.
    stride : int
        Steps between stored checkpoints (0 stores only the final state).
    drift : {"euler", "rk4"}
        Integrator for the deterministic part.  With ``"euler"`` the ensemble
        mean follows a forward-Euler Lindblad step and carries its O(dt)
        bias; ``"rk4"`` makes the mean follow the RK4 map used by
        ``evolve_unconditional``.  The noise increment is Ito in both cases.
    """

    phi: float = 0.0
    eta: float = 1.0
    dt: float = 1e-3
    n_traj: int = 1
    seed: int = 0
    stride: int = 0
    drift: str = "euler"

    def __post_init__(self):
        if not 0 < self.eta <= 1:
            raise ConfigError(f"eta must lie in (0, 1], got {self.eta}")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.n_traj < 1 or self.stride < 0:
            raise ConfigError("n_traj must be >= 1 and stride >= 0")
        if self.drift not in ("euler", "rk4"):
            raise ConfigError(f"drift must be euler or rk4, got {self.drift!r}")


def check_sme_step(cfg: SMEConfig, gen: LindbladGenerator) -> None:
    p = gen.params
    limit = 0.02 / p.gamma
    if p.g:
        limit = min(limit, 0.02 / abs(p.g))
    if cfg.dt > limit * (1 + 1e-12):
        raise StepSizeError(f"dt={cfg.dt:g} exceeds min(0.02/g, 0.02/gamma)={limit:g}")
    if cfg.dt * gen.spectral_bound() > 1.0:
        raise StepSizeError(f"dt={cfg.dt:g} too coarse for explicit Euler at this truncation")


def _sq(n: int) -> np.ndarray:
    return np.sqrt(np.arange(n, dtype=float))


def measurement_bracket(rho: np.ndarray, phi: float, n: int) -> np.ndarray:
    """``e^{-i phi} a rho + e^{i phi} rho a^dag - <e^{-i phi} a + h.c.> rho``."""
    r = _view(rho, n)
    sq = _sq(n)
    x = np.exp(-1j * phi) * _a_left(r, sq)
    x = x + np.exp(1j * phi) * _ad_right(r, sq)
    x = x.reshape(rho.shape)
    tr = np.trace(x, axis1=-2, axis2=-1)
    return x - tr[..., None, None] * rho


def sme_step(rho_c: np.ndarray, dW, cfg: SMEConfig, gen: LindbladGenerator) -> np.ndarray:
    """One Euler-Maruyama step followed by re-Hermitization and trace renormalization.

    With ``cfg.drift == "rk4"`` the deterministic increment is one RK4 step.

    ``rho_c`` may be a batch ``(B, d, d)`` with ``dW`` of shape ``(B,)``.
    """
    n = gen.params.n_fock
    dW = np.asarray(dW, dtype=float)
    if cfg.drift == "rk4":
        drift = _rk4(rho_c, cfg.dt, gen) - rho_c
    else:
        drift = lindblad_rhs(rho_c, gen) * cfg.dt
    kick = measurement_bracket(rho_c, cfg.phi, n)
    coef = math.sqrt(gen.params.gamma * cfg.eta) * dW
    out = rho_c + drift + coef[..., None, None] * kick
    out = 0.5 * (out + np.swapaxes(out.conj(), -1, -2))
    tr = np.trace(out, axis1=-2, axis2=-1).real
    return out / tr[..., None, None]


def photocurrent_sample(rho_c: np.ndarray, xi, cfg: SMEConfig, params) -> np.ndarray:
    """``I_- / |beta| = gamma eta <e^{i phi} a^dag + e^{-i phi} a> + sqrt(gamma eta) xi``."""
    n = params.n_fock
    r = _view(np.asarray(rho_c), n)
    field = r[..., 0, :, 0, :] + r[..., 1, :, 1, :]
    # tr[a rho] = sum_m sqrt(m+1) rho[m+1, m]
    a_mean = np.sum(_sq(n)[1:] * np.diagonal(field, offset=-1, axis1=-2, axis2=-1), axis=-1)
    val = 2.0 * np.real(np.exp(-1j * cfg.phi) * a_mean)
    return params.gamma * cfg.eta * val + math.sqrt(params.gamma * cfg.eta) * np.asarray(xi)


class SMEResult(NamedTuple):
    times: np.ndarray
    """Checkpoint times."""
    states: np.ndarray
    """Conditional states, shape ``(n_checkpoints, n_traj, d, d)``."""
    current: np.ndarray
    """Photocurrent per step, shape ``(n_traj, n_steps)``."""
    max_purity: float


def _noise(cfg: SMEConfig, steps: int, indices: Sequence[int]) -> np.ndarray:
    return np.stack([trajectory_rng(cfg.seed, i).normal(0.0, math.sqrt(cfg.dt), steps)
                     for i in indices])


def sme_ensemble(rho0: np.ndarray, t_total: float, cfg: SMEConfig, gen: LindbladGenerator,
                 checkpoints: Sequence[float] = (), indices: Sequence[int] | None = None,
                 chunk: int = 250) -> SMEResult:
    """Integrate ``cfg.n_traj`` trajectories from ``rho0``.

    Checkpoints are the given times plus every ``cfg.stride`` steps; the
    final time is always included.  Trajectories are processed in chunks to
    bound memory; each one's noise comes from its own stream, so results do
    not depend on the chunk size.
    """
    check_sme_step(cfg, gen)
    steps = max(0, math.ceil(t_total / cfg.dt - 1e-9))
    h = t_total / steps if steps else 0.0
    if steps and abs(h - cfg.dt) > 1e-12 * cfg.dt:
        raise ConfigError(f"t_total={t_total} is not a multiple of dt={cfg.dt}")
    marks = {int(round(tc / cfg.dt)) for tc in checkpoints}
    if cfg.stride:
        marks |= set(range(0, steps + 1, cfg.stride))
    marks.add(steps)
    marks = sorted(m for m in marks if 0 <= m <= steps)
    if indices is None:
        indices = range(cfg.n_traj)
    indices = list(indices)
    d = gen.dim
    states = np.empty((len(marks), len(indices), d, d), dtype=complex)
    current = np.empty((len(indices), steps))
    max_pur = 0.0
    for lo in range(0, len(indices), chunk):
        ids = indices[lo:lo + chunk]
        dW = _noise(cfg, steps, ids)
        rho = np.repeat(np.asarray(rho0, dtype=complex)[None], len(ids), axis=0)
        slot = 0
        if marks[0] == 0:
            states[0, lo:lo + len(ids)] = rho
            slot = 1
        for s in range(steps):
            current[lo:lo + len(ids), s] = photocurrent_sample(rho, dW[:, s] / cfg.dt, cfg, gen.params)
            rho = sme_step(rho, dW[:, s], cfg, gen)
            pur = np.einsum("bij,bji->b", rho, rho).real.max()
            max_pur = max(max_pur, float(pur))
            if slot < len(marks) and marks[slot] == s + 1:
                states[slot, lo:lo + len(ids)] = rho
                slot += 1
    return SMEResult(np.array(marks) * h, states, current, max_pur)


def sme_trajectory(rho0: np.ndarray, t_total: float, cfg: SMEConfig, gen: LindbladGenerator,
                   index: int = 0, checkpoints: Sequence[float] = ()) -> SMEResult:
    """Single trajectory ``index`` of the ensemble defined by ``cfg``."""
    return sme_ensemble(rho0, t_total, cfg, gen, checkpoints, indices=[index])
