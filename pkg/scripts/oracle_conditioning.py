"""Check one column of the factored M(t) against double-precision and ball-arithmetic references.

At large ``E t`` the true entries of ``M(t)`` are tiny while intermediate
squarings in ``expm`` are huge, so the double-precision exponential has no
correct digits left.  The ball-arithmetic evaluation carries rigorous error
bounds and decides which of the two double-precision results is right.

Usage: python scripts/oracle_conditioning.py [--g 10] [--E 10] [--t 3]
"""

import argparse

import numpy as np
from flint import acb

from homodyne_qed.disentangle import block_generator, factored_block, factorize_M
from homodyne_qed.extended import LowRankState, propagate
from homodyne_qed.hilbert import SystemParams, margin_levels, matrix_exponential


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--g", type=float, default=10.0)
    ap.add_argument("--E", type=float, default=10.0)
    ap.add_argument("--t", type=float, default=3.0)
    args = ap.parse_args()
    p0 = SystemParams(g=args.g, E=args.E)
    levels = margin_levels(abs(p0.alpha)) + 40
    p = p0.replace(n_fock=levels)

    fp = factorize_M(args.t, p)
    factored = factored_block(fp.z1, fp.z2(1), fp.z3(1), fp.decay, levels, 1)[:, 0]
    gen = block_generator(complex(p.E, 0.5 * p.g), 0.5 * p.gamma, levels)
    dense = matrix_exponential(gen, args.t)[:, 0]

    vac = [acb(1)] + [acb(0)] * (levels - 1)
    out = propagate(LowRankState(((vac, None),), levels), args.t, p)
    ball = np.array([complex(x) for x in out.factors[0][0]])

    ref = np.linalg.norm(ball)
    print(f"levels={levels}  ||M e0|| (ball arithmetic) = {ref:.6e}")
    print(f"factored, double precision : relative error {np.linalg.norm(factored - ball) / ref:.2e}")
    print(f"dense expm                 : relative error {np.linalg.norm(dense - ball) / ref:.2e}")


if __name__ == "__main__":
    main()
