"""Show where the symmetric engine departs from the time-ordered Dyson integral.

For a generic initial state the per-count maps of the two detectors do not
commute, so the symmetric engine returns the average over label orders.
"""

import itertools

import numpy as np

from homodyne_qed.conditional import conditional_state
from homodyne_qed.hilbert import SystemParams, trace_distance
from homodyne_qed.jumps import dyson_oracle


def random_state(dim: int, levels: int, n_fock: int, rng) -> np.ndarray:
    idx = np.r_[0:levels, n_fock:n_fock + levels]
    x = rng.normal(size=(len(idx), 3)) + 1j * rng.normal(size=(len(idx), 3))
    rho = np.zeros((dim, dim), dtype=complex)
    rho[np.ix_(idx, idx)] = x @ x.conj().T
    return rho / np.trace(rho)


def main():
    p = SystemParams(g=2.0, E=1.0, beta=0.3 + 0.4j, n_fock=45)
    rho0 = random_state(p.dim, 6, p.n_fock, np.random.default_rng(606))
    dt = 0.5
    print(f"{'record':>8} {'symmetric':>11} {'ordered':>11}   (trace distance to Dyson)")
    for m in range(3):
        for labels in itertools.product((1, 2), repeat=m):
            ref = dyson_oracle(rho0, labels, dt, 16, p, use_exact=False)
            sym = conditional_state(rho0, labels, dt, p)
            ordered = conditional_state(rho0, labels, dt, p, ordering="ordered")
            print(f"{str(labels):>8} {trace_distance(sym.rho_c, ref.rho_c):11.2e} "
                  f"{trace_distance(ordered.rho_c, ref.rho_c):11.2e}")


if __name__ == "__main__":
    main()
