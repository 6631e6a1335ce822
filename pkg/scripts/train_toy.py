"""Train the 28x28 digits CNN under the FP32 baseline and the FP8 scheme.

Runs fp32, fp8 with CL=64 and fp8 with CL=1, six epochs each, and prints
the final test errors. The two FP8 runs take several minutes each.
"""

import json
import sys
from pathlib import Path

from fp8emu.cli import main

RUNS = {"fp32": ["--policy", "fp32"],
        "fp8_cl64": ["--policy", "fp8", "--chunk", "64"],
        "fp8_cl1": ["--policy", "fp8", "--chunk", "1"]}

if __name__ == "__main__":
    root = Path("runs/toy")
    for name, extra in RUNS.items():
        code = main(["train", "--model", "cnn", "--upsample", "3", "--border", "2",
                     "--epochs", "6", "--batch-size", "64", "--seed", "1",
                     "--output-dir", str(root / name), *extra, *sys.argv[1:]])
        summary = json.loads((root / name / "summary.json").read_text())
        print(f"{name:<9} exit={code} test_error={summary['final_test_error']:.2f}%")
