"""Accumulation drift of uniform(mean 1, stdev 1) sums for N = 2^10 .. 2^20.

Writes drift.csv under the output directory (default runs/drift).
Extra arguments are passed through to ``fp8emu drift``.
"""

import sys

from fp8emu.cli import main

if __name__ == "__main__":
    sys.exit(main(["drift", "--lengths", "1024..1048576", "--chunks", "1,8,32,64,256",
                   "--trials", "16", "--output-dir", "runs/drift", *sys.argv[1:]]))
