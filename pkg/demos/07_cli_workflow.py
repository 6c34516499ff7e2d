"""The command-line workflow, driven from Python.

Equivalent shell session:

    pciset --seed 7 fit --data traj.csv --out model.json
    pciset synthesize --model model.json --constraints box.json --out pci.json
    pciset verify --model model.json --pci pci.json
    pciset --seed 3 simulate --model model.json --pci pci.json --rollouts 1000 --out mc.json
"""

import json
import tempfile
from pathlib import Path

import numpy as np

from pciset import files
from pciset.cli import main
from pciset.gpssm import Dataset

work = Path(tempfile.mkdtemp(prefix="pciset-"))
rng = np.random.default_rng(0)
X, U = rng.uniform(-1, 1, (60, 2)), rng.uniform(-1, 1, (60, 1))
Xp = X @ np.array([[1.0, 0.1], [0.0, 0.95]]).T + U @ np.array([[0.005, 0.1]]) + 0.01 * np.sin(X)
files.write_transitions_csv(work / "traj.csv", Dataset(X, U, Xp + 1e-3 * rng.standard_normal(Xp.shape)))
(work / "box.json").write_text(json.dumps({"box_state": {"lower": [-5, -5], "upper": [5, 5]},
                                           "box_input": {"lower": [-10], "upper": [10]}}))

steps = [
    ["--seed", "7", "fit", "--data", work / "traj.csv", "--out", work / "model.json", "--restarts", "2"],
    ["synthesize", "--model", work / "model.json", "--constraints", work / "box.json", "--eta-grid", "8",
     "--delta", "0.005", "--out", work / "pci.json"],
    ["verify", "--model", work / "model.json", "--pci", work / "pci.json"],
    ["--seed", "3", "simulate", "--model", work / "model.json", "--pci", work / "pci.json", "--rollouts", "1000",
     "--horizon", "50", "--out", work / "mc.json"],
]
for argv in steps:
    argv = [str(a) for a in argv]
    print("$ pciset", " ".join(argv))
    print("  exit code", main(argv))

pci = files.read_json(work / "pci.json")
mc = files.read_json(work / "mc.json")
print(f"p* = {pci['p_star']:.4f}, simulated min_k containment = {mc['min_k_containment']['value']:.4f}")
print("outputs in", work)
