"""GEMM error versus chunk length on captured gradient operands.

A digits CNN is trained for one epoch in the FP8 scheme; the Gradient-GEMM
operands of four minibatches of 64 are then swept over CL = 1 .. K.
"""

import sys

from fp8emu.cli import main

CHUNKS = ",".join(str(2**k) for k in range(12)) + ",0"

if __name__ == "__main__":
    sys.exit(main(["chunk-sweep", "--chunks", CHUNKS, "--batches", "4", "--batch-size", "64",
                   "--output-dir", "runs/chunk_sweep", *sys.argv[1:]]))
