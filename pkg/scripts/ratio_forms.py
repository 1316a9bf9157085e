"""Compare the two eigenvalue-ratio forms with the block-trace ratio of the conditional state.

Usage: python scripts/ratio_forms.py [--beta0 0.5] [--labels 1 2 1]
"""

import argparse

from homodyne_qed.conditional import block_trace_ratio, conditional_state, eigenvalue_ratio
from homodyne_qed.extended import steady_low_rank
from homodyne_qed.hilbert import SystemParams


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--g", type=float, default=10.0)
    ap.add_argument("--E", type=float, default=3.0)
    ap.add_argument("--beta0", type=float, default=0.5)
    ap.add_argument("--n-fock", type=int, default=300)
    ap.add_argument("--labels", type=int, nargs="+", default=[1, 2, 1])
    args = ap.parse_args()
    p = SystemParams(g=args.g, E=args.E, beta=1j * args.beta0, n_fock=args.n_fock)
    state = steady_low_rank(p)
    print(f"{'dt':>6} {'block':>14} {'printed':>14} {'corrected':>14}")
    for dt in (0.01, 0.1, 0.3, 1.0, 3.0):
        res = conditional_state(state, args.labels, dt, p, precision="extended")
        block = block_trace_ratio(res.rho_c, p.n_fock)
        printed = eigenvalue_ratio(args.labels, dt, p)
        corrected = eigenvalue_ratio(args.labels, dt, p, form="corrected")
        print(f"{dt:6.2f} {block:14.10f} {printed:14.10f} {corrected:14.10f}")


if __name__ == "__main__":
    main()
