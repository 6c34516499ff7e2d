"""Readers and writers for trajectory CSV files and the JSON artifacts.

JSON floats are written with Python's shortest round-trip representation, so
every value parses back to the identical double.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from importlib import metadata
from pathlib import Path

import numpy as np

from .gpssm import Dataset, GpssmModel, SquaredExpKernel, UncertaintyBounds
from .invariance import PolytopeConstraints
from .synthesis import PciResult


class SchemaError(ValueError):
    """A file parsed but does not match the expected layout."""


def tool_version() -> str:
    try:
        return metadata.version("artifact")
    except metadata.PackageNotFoundError:
        return "unknown"


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def manifest(command: str, config: dict, inputs=(), seed: int = 0, wall_clock: bool = True) -> dict:
    """Provenance block embedded in every output document.

    ``wall_clock=False`` leaves the timestamp out so reruns are byte-identical.
    """
    return {
        "command": command,
        "config": config,
        "inputs": {str(p): sha256(p) for p in inputs},
        "tool_version": tool_version(),
        "seed": int(seed),
        "wall_clock": time.strftime("%Y-%m-%dT%H:%M:%S%z") if wall_clock else None,
    }


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        # strict JSON has no NaN/inf
        return float(obj) if np.isfinite(obj) else None
    return obj


def write_json(path, doc: dict) -> None:
    text = json.dumps(_plain(doc), indent=1, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})") from None


def _require(doc, keys, what):
    missing = [k for k in keys if k not in doc]
    if missing:
        raise SchemaError(f"{what}: missing field(s) {', '.join(missing)}")


def _matrix(value, shape, what):
    try:
        M = np.asarray(value, dtype=float)
    except (TypeError, ValueError):
        raise SchemaError(f"{what}: not a numeric array") from None
    if M.size == 0 and np.prod(shape) == 0:
        return M.reshape(shape)
    if M.shape != tuple(shape):
        raise SchemaError(f"{what}: expected shape {tuple(shape)}, got {M.shape}")
    return M


# ---------------------------------------------------------------- trajectories


def read_transitions_csv(path, trajectory: bool = False) -> Dataset:
    """Parse ``x1..xn,u1..um,xp1..xpn`` transitions, or ``k,x1..xn,u1..um`` rows with ``trajectory=True``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    n = sum(1 for h in header if h.startswith("x") and h[1:].isdigit())
    m = sum(1 for h in header if h.startswith("u") and h[1:].isdigit())
    expected = ([f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)])
    if trajectory:
        expected = ["k"] + expected
    else:
        expected = expected + [f"xp{i + 1}" for i in range(n)]
    if header != expected or n == 0 or m == 0:
        raise SchemaError(f"{path}: header must be {','.join(expected) if n and m else 'x1..xn,u1..um[,xp1..xpn]'}")
    try:
        data = np.array([[float(v) if v.strip() else np.nan for v in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise SchemaError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[0] == 0 or data.shape[1] != len(header):
        raise SchemaError(f"{path}: every row needs {len(header)} columns")
    if trajectory:
        order = np.argsort(data[:, 0], kind="stable")
        data = data[order]
        return Dataset.from_trajectory(data[:, 1 : 1 + n], data[:-1, 1 + n : 1 + n + m])
    return Dataset(data[:, :n], data[:, n : n + m], data[:, n + m :])


def write_transitions_csv(path, data: Dataset) -> None:
    n, m = data.n, data.m
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)] + [f"xp{i + 1}" for i in range(n)])
        for row in np.hstack([data.X, data.U, data.Xplus]):
            w.writerow([repr(float(v)) for v in row])


# ---------------------------------------------------------------- model


def model_to_dict(model: GpssmModel, bounds: UncertaintyBounds, phi_rule: str = "rkhs") -> dict:
    d = model.data
    return {
        "n": model.n,
        "m": model.m,
        "A": model.A,
        "B": model.B,
        "Q_diag": model.noise,
        "kernels": [{"signal_variance": k.signal_variance, "lengthscales": k.lengthscales} for k in model.kernels],
        "phi": bounds.phi,
        "phi_rule": phi_rule,
        "sigma_hat_diag": bounds.sigma_hat,
        "dataset": {"X": d.X, "U": d.U, "Xplus": d.Xplus},
    }


def model_from_dict(doc: dict, base_dir=None) -> tuple[GpssmModel, UncertaintyBounds]:
    _require(doc, ["n", "m", "A", "B", "Q_diag", "kernels", "phi", "sigma_hat_diag"], "model")
    n, m = int(doc["n"]), int(doc["m"])
    if "dataset" in doc:
        ds = doc["dataset"]
        _require(ds, ["X", "U", "Xplus"], "model.dataset")
        N = len(ds["X"])
        data = Dataset(_matrix(ds["X"], (N, n), "dataset.X"), _matrix(ds["U"], (N, m), "dataset.U"),
                       _matrix(ds["Xplus"], (N, n), "dataset.Xplus"))
    elif "dataset_path" in doc:
        p = Path(doc["dataset_path"])
        data = read_transitions_csv(p if p.is_absolute() or base_dir is None else Path(base_dir) / p)
    else:
        raise SchemaError("model: needs 'dataset' or 'dataset_path'")
    if len(doc["kernels"]) != n:
        raise SchemaError(f"model: expected {n} kernels, got {len(doc['kernels'])}")
    kernels = []
    for i, k in enumerate(doc["kernels"]):
        _require(k, ["signal_variance", "lengthscales"], f"model.kernels[{i}]")
        kernels.append(SquaredExpKernel(float(k["signal_variance"]), np.asarray(k["lengthscales"], dtype=float)))
    model = GpssmModel(_matrix(doc["A"], (n, n), "A"), _matrix(doc["B"], (n, m), "B"),
                       _matrix(doc["Q_diag"], (n,), "Q_diag"), kernels, data)
    bounds = UncertaintyBounds(float(doc["phi"]), _matrix(doc["sigma_hat_diag"], (n,), "sigma_hat_diag"),
                               model.noise.copy())
    return model, bounds


# ---------------------------------------------------------------- constraints and results


def constraints_from_dict(doc: dict, n: int, m: int) -> PolytopeConstraints:
    if not any(k in doc for k in ("state", "input", "box_state", "box_input")):
        raise SchemaError("constraints: needs 'state'/'input' rows or 'box_state'/'box_input'")
    for key, field_, dim in (("state", "beta", n), ("input", "zeta", m)):
        for i, row in enumerate(doc.get(key, [])):
            if not isinstance(row, dict) or field_ not in row:
                raise SchemaError(f"constraints.{key}[{i}]: expected an object with '{field_}'")
            if np.size(row[field_]) != dim:
                raise SchemaError(f"constraints.{key}[{i}].{field_}: expected {dim} entries, got {np.size(row[field_])}")
    try:
        c = PolytopeConstraints.from_dict(doc, n, m)
    except (KeyError, TypeError, ValueError) as exc:
        raise SchemaError(f"constraints: malformed entry ({exc})") from None
    if c.state_rows.shape[1] != n or c.input_rows.shape[1] != m:
        raise SchemaError(f"constraints: rows must have {n} (state) and {m} (input) entries")
    return c


def pci_to_dict(result: PciResult, constraints: PolytopeConstraints) -> dict:
    return {
        "P": result.P,
        "L": result.L,
        "M": result.M,
        "p_star": result.p_star,
        "p_up": result.p_up,
        "eta_star": result.eta_star,
        "logdet": result.logdet,
        "iterations": result.iterations,
        "feasibility_log": result.feasibility_log,
        "config_echo": result.config,
        "constraints": constraints.to_dict(),
    }


def pci_from_dict(doc: dict, n: int, m: int) -> PciResult:
    _require(doc, ["P", "L", "p_star", "eta_star", "logdet"], "pci")
    P = _matrix(doc["P"], (n, n), "P")
    L = _matrix(doc["L"], (m, n), "L")
    W = np.linalg.inv(P)
    M = _matrix(doc["M"], (m, n), "M") if "M" in doc else L @ W
    return PciResult(P=P, L=L, M=M, W=W, p_star=float(doc["p_star"]), eta_star=float(doc["eta_star"]),
                     logdet=float(doc["logdet"]), p_low=float(doc["p_star"]), p_up=float(doc.get("p_up", doc["p_star"])),
                     iterations=int(doc.get("iterations", 0)), feasibility_log=list(doc.get("feasibility_log", [])),
                     config=dict(doc.get("config_echo", {})))
