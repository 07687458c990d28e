#!/usr/bin/env python3
"""Frame-swap corruption sweep: mean u_pp of the curve-matching segmenter
over 30 Monte Carlo draws per corruption level f = 0..4."""

import sys

from daugs.cli import main

if __name__ == "__main__":
    args = sys.argv[1:]
    argv = ["mocosim", "--umap-stride", "4", "--seed", "11", "--out", "out/moco"] + args
    sys.exit(main(argv))
