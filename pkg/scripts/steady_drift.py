"""Trace-distance drift of the analytic steady state under the full master equation.

Also prints the gap between the exact and slow-time no-count propagators on
the steady state at ``t = 1``.

Usage: python scripts/steady_drift.py [--g 1 2 5 10] [--t-total 2]
"""

import argparse
import time

import numpy as np

from homodyne_qed.disentangle import build_N, build_N0
from homodyne_qed.dynamics import LindbladGenerator, build_rho_ss, evolve_unconditional
from homodyne_qed.hilbert import SystemParams, trace_distance


def drift(g: float, E: float, t_total: float) -> tuple[float, float]:
    p = SystemParams(g=g, E=E)
    gen = LindbladGenerator(p)
    ss = build_rho_ss(p)
    dt = min(0.02 / g, 2.5 / gen.spectral_bound()) * 0.999
    steps = int(np.ceil(t_total / dt))
    marks = np.linspace(0.0, t_total, 9)[1:]
    res = evolve_unconditional(ss, t_total, t_total / steps, gen, checkpoints=marks)
    dists = [trace_distance(rho, ss) for rho in res.checkpoints.values()]
    return max(dists), dists[-1]


def slow_time_gap(g: float, E: float) -> float:
    p = SystemParams(g=g, E=E, n_fock=SystemParams(g=g, E=E).n_fock + 20)
    rho = build_rho_ss(p)
    N0, N = build_N0(1.0, p), build_N(1.0, p)
    D = N0 - N
    return float(np.linalg.norm(D @ rho @ D.conj().T) / np.linalg.norm(N0 @ rho @ N0.conj().T))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--g", type=float, nargs="+", default=[1.0, 2.0, 5.0, 10.0])
    ap.add_argument("--E", type=float, default=3.0)
    ap.add_argument("--t-total", type=float, default=2.0)
    args = ap.parse_args()
    print(f"{'g':>6} {'max drift':>10} {'final':>10} {'N0/N gap':>10} {'seconds':>8}")
    for g in args.g:
        t0 = time.perf_counter()
        worst, last = drift(g, args.E, args.t_total)
        gap = slow_time_gap(g, args.E)
        print(f"{g:6g} {worst:10.4f} {last:10.4f} {gap:10.3g} {time.perf_counter() - t0:8.1f}")


if __name__ == "__main__":
    main()
