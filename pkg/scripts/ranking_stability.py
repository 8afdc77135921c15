"""How stable is the LDA band ranking across synthetic datasets?

Fits LDA on balanced pixel samples from independently seeded scene sets and
tabulates how often each wavelength lands at each rank.

    python scripts/ranking_stability.py --runs 20 --per-class 5000
"""
import argparse
from collections import Counter

import numpy as np

from msscab.bandselect import fit_lda, sample_pixels
from msscab.cube import WAVELENGTHS
from msscab.synthetic import SyntheticSceneSpec, generate_scenes


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--runs", type=int, default=20)
    ap.add_argument("--scenes", type=int, default=20)
    ap.add_argument("--per-class", type=int, default=5000)
    ap.add_argument("--band-sd-scale", type=float, nargs=8, default=[1, 1, 1, 1, 1, 1, 0.5, 1])
    args = ap.parse_args()

    counts = {nm: Counter() for nm in WAVELENGTHS}
    for run in range(args.runs):
        spec = SyntheticSceneSpec(seed=run, band_sd_scale=tuple(args.band_sd_scale))
        scenes = generate_scenes(spec, args.scenes)
        sources = [(f"s{i}", s.reflectance, s.mask.labels) for i, s in enumerate(scenes)]
        model = fit_lda(sample_pixels(sources, args.per_class, seed=run))
        for rank, nm in enumerate(model.ranking):
            counts[nm][rank] += 1

    n = len(WAVELENGTHS)
    print("band  " + " ".join(f"r{r + 1:<3d}" for r in range(n)) + "  mean rank")
    for nm in WAVELENGTHS:
        row = [counts[nm][r] for r in range(n)]
        mean = 1 + np.dot(row, np.arange(n)) / args.runs
        print(f"{nm:4d}  " + " ".join(f"{c:<4d}" for c in row) + f"  {mean:.2f}")


if __name__ == "__main__":
    main()
