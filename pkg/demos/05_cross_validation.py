"""Five-fold cross-validation through the command-line surface.

Generates a synthetic dataset, trains one small model per fold, and prints
the fold summary exactly as the `cv` subcommand writes it to summary.csv.

Run:  python3 demos/05_cross_validation.py        (a few minutes)
"""

import os
import tempfile

from sharpseg.cli import main

with tempfile.TemporaryDirectory() as tmp:
    data = os.path.join(tmp, "ds")
    assert main(["gen-data", "--out", data, "--n", "20", "--size", "32",
                 "--classes", "2", "--seed", "7"]) == 0

    out = os.path.join(tmp, "cv")
    assert main(["cv", "--data", os.path.join(data, "dataset.json"),
                 "--out", out, "--folds", "5", "--connection", "sharp",
                 "--widths", "8,16,32,64,128", "--epochs", "12",
                 "--seed", "0"]) == 0

    print("\nfiles written:")
    for name in sorted(os.listdir(out)):
        print(" ", name)
    print("\nsummary.csv:")
    with open(os.path.join(out, "summary.csv")) as f:
        print(f.read())
