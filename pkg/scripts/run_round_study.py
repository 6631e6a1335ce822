"""FP32 versus FP16 nearest/stochastic weight updates with FP32 GEMMs.

A small MLP on 8x8 digits is trained for 30 epochs at a learning rate low
enough that many updates fall below half an FP16 ulp.
"""

import sys

from fp8emu.cli import main

if __name__ == "__main__":
    sys.exit(main(["round-study", "--model", "mlp", "--lr", "0.002", "--momentum", "0.9",
                   "--epochs", "30", "--seeds", "0,1,2",
                   "--output-dir", "runs/round_study", *sys.argv[1:]]))
