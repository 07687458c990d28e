#!/usr/bin/env python3
"""Full-scale adaptive-vs-established experiment (the headline comparison).

Generates 20 unshifted + 40 shifted phantom cases, a 5x10 model pool filtered
at Dice >= 0.87, and writes cases.csv / summary.csv / SVG plots to --out.
"""

import sys

from daugs.cli import main

if __name__ == "__main__":
    args = sys.argv[1:]
    argv = ["abtest", "--umap-stride", "4", "--jobs", "2", "--seed", "20260810",
            "--out", "out/abtest"] + args
    sys.exit(main(argv))
