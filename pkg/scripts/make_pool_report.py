#!/usr/bin/env python3
"""Pool heterogeneity report for one case: 5x10 montage of solution masks and
U-maps plus the u_pp histogram with the selected member highlighted."""

import sys

from daugs.cli import main

if __name__ == "__main__":
    args = sys.argv[1:]
    if not any(a.startswith("--manifest") for a in args):
        gen = main(["phantom", "--n", "1", "--regime", "shifted", "--seed", "42",
                    "--out", "out/poolreport/case"])
        if gen != 0:
            sys.exit(gen)
        args = ["--manifest", "out/poolreport/case/cohort_manifest.csv"] + args
    argv = ["poolreport", "--umap-stride", "4", "--seed", "42",
            "--out", "out/poolreport"] + args
    sys.exit(main(argv))
