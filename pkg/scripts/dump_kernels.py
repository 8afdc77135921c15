"""Print the ring-kernel bank and optionally save it as a .npy stack.

    python scripts/dump_kernels.py --save kernels.npy
"""
import argparse

import numpy as np

from msscab.ringconv import azimuthal_mean, make_default_bank, peak_radius


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--save", help="write the (K, 2a+1, 2a+1) stack to this .npy file")
    args = ap.parse_args()

    bank = make_default_bank()
    print(f"{'beta':>6} {'sigma':>6} {'size':>5} {'peak r':>6} {'sum':>8} {'outer margin':>12}")
    for k in bank:
        margin = k.alpha - (k.beta + 3 * k.sigma / np.sqrt(2))
        print(f"{k.beta:6.2f} {k.sigma:6.3f} {k.size:5d} {peak_radius(k):6d} {k.values.sum():8.5f} {margin:12.3f}")
        profile = azimuthal_mean(k.values)
        print("  radial profile (x1e4, r=0..%d):" % min(len(profile) - 1, 40), np.round(1e4 * profile[:41], 2))
    if args.save:
        np.save(args.save, np.stack([k.values for k in bank]))
        print("saved", args.save)


if __name__ == "__main__":
    main()
