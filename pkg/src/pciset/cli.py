"""Command-line driver: fit, synthesize, verify, simulate and the quadrotor demo.

Exit codes: 0 on success, 1 when a design is infeasible or a check fails,
2 on usage, file or schema errors.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import files
from .gpssm import PHI_RULES, FitError, RankDeficientError, fit_gpssm, uncertainty_bounds
from .invariance import verify_controller
from .pipeline import QuadrotorDemoConfig, collect_quadrotor_data
from .simulator import (
    GroundTruth,
    PosteriorDynamics,
    QuadrotorParams,
    RolloutConfig,
    ground_truth_quadrotor,
    monte_carlo,
    write_trajectory_csv,
)
from .synthesis import (
    CERT_RTOL,
    SynthesisConfig,
    SynthesisInfeasible,
    certificate_margins,
    default_eta_grid,
    synthesize,
)

log = logging.getLogger("pciset")

OK, FAILED, USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="pciset", description=__doc__.splitlines()[0])
    p.add_argument("--seed", type=int, default=0, help="single source of randomness (default 0)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for eta sweeps and rollouts")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fit", help="fit a GPSSM to transition data")
    f.add_argument("--data", required=True, help="CSV with x1..xn,u1..um,xp1..xpn (or k,x..,u.. with --trajectory)")
    f.add_argument("--trajectory", action="store_true", help="rows are consecutive states of one trajectory")
    f.add_argument("--out", required=True)
    f.add_argument("--restarts", type=int, default=5)
    f.add_argument("--phi-rule", choices=PHI_RULES, default="rkhs")

    s = sub.add_parser("synthesize", help="design the invariant set and gain")
    s.add_argument("--model", required=True)
    s.add_argument("--constraints", required=True)
    s.add_argument("--delta", type=float, default=1e-3)
    s.add_argument("--eta-grid", type=int, default=20, help="number of uniform eta samples in [0.05, 0.95]")
    s.add_argument("--p-init", type=float, default=0.5)
    s.add_argument("--out", required=True)

    v = sub.add_parser("verify", help="re-check a design against a model")
    v.add_argument("--model", required=True)
    v.add_argument("--pci", required=True)
    v.add_argument("--constraints", help="defaults to the constraints stored in the design file")
    v.add_argument("--out", help="optional JSON verification report")

    m = sub.add_parser("simulate", help="Monte Carlo validation of a design")
    m.add_argument("--model", required=True)
    m.add_argument("--pci", required=True)
    m.add_argument("--constraints", help="defaults to the constraints stored in the design file")
    m.add_argument("--dynamics", choices=["posterior", "quadrotor"], default="posterior")
    m.add_argument("--drag", type=float, default=0.0)
    m.add_argument("--gain", type=float, default=1.0)
    m.add_argument("--dt", type=float, default=0.1)
    m.add_argument("--noise", type=float, nargs="+", help="ground-truth process noise variances (default: model Q)")
    m.add_argument("--rollouts", type=int, default=10_000)
    m.add_argument("--horizon", type=int, default=100)
    m.add_argument("--x0", type=float, nargs="+", help="fixed initial state (default: uniform in the ellipsoid)")
    m.add_argument("--out", required=True)
    m.add_argument("--dump", help="CSV trajectory dump of the first --dump-rollouts rollouts")
    m.add_argument("--dump-rollouts", type=int, default=10)

    d = sub.add_parser("demo-quadrotor", help="synthetic planar quadrotor run, end to end")
    d.add_argument("--out-dir", required=True)
    d.add_argument("--samples", type=int, default=500)
    d.add_argument("--rollouts", type=int, default=10_000)
    d.add_argument("--horizon", type=int, default=100)
    return p


def _load_model(path):
    return files.model_from_dict(files.read_json(path), base_dir=Path(path).parent)


def _load_constraints(args, pci_doc, n, m):
    if args.constraints:
        return files.constraints_from_dict(files.read_json(args.constraints), n, m), [args.constraints]
    if "constraints" not in pci_doc:
        raise UsageError("design file has no stored constraints; pass --constraints")
    return files.constraints_from_dict(pci_doc["constraints"], n, m), []


def cmd_fit(args):
    data = files.read_transitions_csv(args.data, trajectory=args.trajectory)
    model = fit_gpssm(data, restarts=args.restarts, seed=args.seed)
    bounds = uncertainty_bounds(model, rule=args.phi_rule)
    doc = files.model_to_dict(model, bounds, args.phi_rule)
    doc["diagnostics"] = model.diagnostics
    doc["manifest"] = files.manifest("fit", {"restarts": args.restarts, "phi_rule": args.phi_rule,
                                             "trajectory": args.trajectory}, [args.data], args.seed)
    files.write_json(args.out, doc)
    print(f"fit: N={data.N} n={data.n} m={data.m} phi={bounds.phi:.6g} -> {args.out}")
    return OK


def cmd_synthesize(args):
    model, bounds = _load_model(args.model)
    cons = files.constraints_from_dict(files.read_json(args.constraints), model.n, model.m)
    if args.eta_grid < 1:
        raise UsageError("--eta-grid must be at least 1")
    config = SynthesisConfig(delta=args.delta, eta_grid=default_eta_grid(args.eta_grid), p_init=args.p_init,
                             jobs=args.jobs)
    try:
        result = synthesize(model.A, model.B, bounds, cons, config)
    except SynthesisInfeasible as exc:
        print(f"synthesize: infeasible: {exc}", file=sys.stderr)
        return FAILED
    doc = files.pci_to_dict(result, cons)
    doc["manifest"] = files.manifest("synthesize", config.to_dict(), [args.model, args.constraints], args.seed)
    files.write_json(args.out, doc)
    print(f"synthesize: p*={result.p_star:.6f} eta*={result.eta_star:.4f} logdet={result.logdet:.6g} -> {args.out}")
    return OK


def verification_findings(model, bounds, pci, cons, rtol=CERT_RTOL):
    """Independent checks of a stored design; returns ``(margins, list of violation messages)``."""
    mg = certificate_margins(pci, model.A, model.B, bounds, cons)
    bad = []
    if np.linalg.eigvalsh(pci.P).min() <= 0:
        bad.append("P is not positive definite")
    if mg["contraction_excess"] > rtol:
        bad.append(f"contraction: lambda_max((A+BL)^T P (A+BL) - eta P)/||P|| = {mg['contraction_excess']:.3e} > 0")
    if mg["margin_ratio"] < 1 - rtol:
        bad.append(f"disturbance margin: ratio {mg['margin_ratio']:.6f} < 1")
    bad += [f"state row {i}: beta^T P^-1 beta = {v:.6g} > 1" for i, v in enumerate(mg["state"]) if v > 1 + rtol]
    bad += [f"input row {j}: zeta^T L P^-1 L^T zeta = {v:.6g} > 1" for j, v in enumerate(mg["input"]) if v > 1 + rtol]
    return mg, bad


def cmd_verify(args):
    model, bounds = _load_model(args.model)
    pci_doc = files.read_json(args.pci)
    pci = files.pci_from_dict(pci_doc, model.n, model.m)
    cons, extra = _load_constraints(args, pci_doc, model.n, model.m)
    mg, bad = verification_findings(model, bounds, pci, cons)
    lmi = verify_controller(bounds, model.A, model.B, pci.L, pci.p_star, P=pci.P)
    if args.out:
        files.write_json(args.out, {
            "ok": not bad, "violations": bad, "margins": mg, "invariance_lmi_alpha": lmi.alpha,
            "manifest": files.manifest("verify", {}, [args.model, args.pci, *extra], args.seed),
        })
    for msg in bad:
        print(f"verify: violated: {msg}", file=sys.stderr)
    alpha = "none on the grid" if lmi.alpha is None else f"{lmi.alpha:.4g}"
    print(f"verify: {'ok' if not bad else 'FAILED'} (p={pci.p_star:.6f}, eta={pci.eta_star:.4f}, "
          f"invariance LMI alpha: {alpha})")
    return OK if not bad else FAILED


def cmd_simulate(args):
    model, bounds = _load_model(args.model)
    pci_doc = files.read_json(args.pci)
    pci = files.pci_from_dict(pci_doc, model.n, model.m)
    cons, extra = _load_constraints(args, pci_doc, model.n, model.m)
    if args.dynamics == "quadrotor":
        if model.n != 4 or model.m != 2:
            raise UsageError("quadrotor dynamics need n=4, m=2")
        noise = model.noise if args.noise is None else np.asarray(args.noise, dtype=float)
        if noise.size != model.n:
            raise UsageError(f"--noise needs {model.n} values")
        dyn = GroundTruth(ground_truth_quadrotor, noise, QuadrotorParams(args.dt, args.drag, args.gain))
    else:
        dyn = PosteriorDynamics(model)
    if args.x0 is not None and len(args.x0) != model.n:
        raise UsageError(f"--x0 needs {model.n} values")
    rc = RolloutConfig(horizon=args.horizon, n_rollouts=args.rollouts,
                       initial_state_mode="uniform" if args.x0 is None else "fixed", x0=args.x0, seed=args.seed,
                       jobs=args.jobs)
    report = monte_carlo(dyn, pci.P, pci.L, cons, rc, keep_trajectories=args.dump_rollouts if args.dump else 0)
    doc = report.to_dict()
    cfg = {"dynamics": args.dynamics, "drag": args.drag, "gain": args.gain, "dt": args.dt, "noise": args.noise,
           **rc.to_dict()}
    doc["manifest"] = files.manifest("simulate", cfg, [args.model, args.pci, *extra], args.seed, wall_clock=False)
    files.write_json(args.out, doc)
    if args.dump:
        write_trajectory_csv(args.dump, report.trajectories)
    print(f"simulate: min_k containment {report.min_k_containment.value:.4f}, "
          f"all-time safety {report.all_time_safety.value:.4f} -> {args.out}")
    return OK


def cmd_demo(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = QuadrotorDemoConfig(n_samples=args.samples, seed=args.seed, n_rollouts=args.rollouts, horizon=args.horizon,
                              synthesis=SynthesisConfig(jobs=args.jobs))
    files.write_transitions_csv(out / "traj.csv", collect_quadrotor_data(cfg))
    s, u = cfg.state_box, cfg.input_box
    files.write_json(out / "constraints.json", {
        "box_state": {"lower": [-v for v in s], "upper": list(s)},
        "box_input": {"lower": [-v for v in u], "upper": list(u)},
    })
    p = cfg.params
    steps = [
        ["fit", "--data", str(out / "traj.csv"), "--out", str(out / "model.json")],
        ["synthesize", "--model", str(out / "model.json"), "--constraints", str(out / "constraints.json"),
         "--out", str(out / "pci.json")],
        ["verify", "--model", str(out / "model.json"), "--pci", str(out / "pci.json")],
        ["simulate", "--model", str(out / "model.json"), "--pci", str(out / "pci.json"), "--dynamics", "quadrotor",
         "--drag", repr(p.drag), "--gain", repr(p.gain), "--dt", repr(p.dt),
         "--noise", *map(repr, cfg.noise), "--rollouts", str(args.rollouts),
         "--horizon", str(args.horizon), "--out", str(out / "report.json")],
    ]
    common = ["--seed", str(args.seed), "--jobs", str(args.jobs)]
    for step in steps:
        code = main(common + step)
        if code != OK:
            return code
    return OK


COMMANDS = {"fit": cmd_fit, "synthesize": cmd_synthesize, "verify": cmd_verify, "simulate": cmd_simulate,
            "demo-quadrotor": cmd_demo}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return USAGE if exc.code else OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.jobs < 1:
        print("pciset: --jobs must be at least 1", file=sys.stderr)
        return USAGE
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore", UserWarning)
            return COMMANDS[args.command](args)
    except (UsageError, files.SchemaError, RankDeficientError, FitError) as exc:
        print(f"pciset {args.command}: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"pciset {args.command}: file not found: {exc.filename}", file=sys.stderr)
    except OSError as exc:
        print(f"pciset {args.command}: {exc.strerror or exc}: {exc.filename or ''}", file=sys.stderr)
    except ValueError as exc:
        print(f"pciset {args.command}: invalid input: {exc}", file=sys.stderr)
    return USAGE


if __name__ == "__main__":
    sys.exit(main())
