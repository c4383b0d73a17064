"""Command-line entry point tying ingestion, solving and verification
into reproducible runs.

Exit codes (stable; "inconclusive" is distinct from "fail"):

    0  success / verification passed
    1  unexpected internal error
    2  configuration error
    3  model assumption violated
    4  numerical failure (blow-up, binding truncation, bad regression)
    5  verification produced at least one failing probe
    6  verification inconclusive (wide confidence intervals, no failure)
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, kernels
from .bsde import BasisSpec, simulate_factor, solve_MU_regression, \
    solve_gamma2_regression
from .config import RunConfig, load_config
from .errors import AssumptionError, ConfigError, NumericalError
from .meanvar import (assemble_policy, det_ansatz, det_premium_M,
                      det_premium_policy, gamma_path, stochastic_ansatz)
from .model import OUPremium, validate_spec
from .output import csv_mirror_json, write_csv, write_json, write_manifest
from .riccati import (adjoint_diagnostics, feedback_coeffs, solve_riccati)
from .simulate import (LQPredictor, MVPredictor, SimConfig, equilibrium_ratio,
                       expansion_check, make_dynamics, simulate_state)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_ASSUMPTION = 3
EXIT_NUMERICAL = 4
EXIT_VERIFY_FAIL = 5
EXIT_INCONCLUSIVE = 6


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tilq", description=__doc__,
                                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="subcommand", required=True)
    for name, helpmsg in [
            ("solve-lq", "solve the deterministic LQ equilibrium system"),
            ("solve-mv", "solve the mean-variance equilibrium strategy"),
            ("solve-bsde", "run the regression BSDE solver only"),
            ("verify", "spike-variation equilibrium verification"),
            ("report", "collate run manifests under --out")]:
        sp = sub.add_parser(name, help=helpmsg)
        if name != "report":
            sp.add_argument("--config", required=True, help="TOML/YAML run config")
        sp.add_argument("--out", default="out", help="output directory")
        sp.add_argument("--seed", type=int, default=None, help="override seed")
        sp.add_argument("--paths", type=int, default=None,
                        help="override simulation path counts")
        sp.add_argument("--grid", type=int, default=None,
                        help="override grid steps")
        sp.add_argument("--format", choices=("csv", "json"), default="csv",
                        help="csv (default) or csv plus json mirrors")
        sp.add_argument("--detune", type=float, default=None,
                        help="scale the feedback gain (negative-control runs)")
        sp.add_argument("--threads", type=int, default=None,
                        help="cap JIT worker count")
    return p


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    sim = cfg.sim
    if args.seed is not None:
        sim = dataclasses.replace(sim, seed=args.seed)
    if args.paths is not None:
        sim = dataclasses.replace(sim, num_paths=args.paths,
                                  inner_paths=args.paths)
    cfg = dataclasses.replace(cfg, sim=sim)
    if args.grid is not None:
        from .model import TimeGrid
        grid = TimeGrid.uniform(
            (cfg.spec or cfg.market).grid.horizon, args.grid)
        if cfg.spec is not None:
            cfg = dataclasses.replace(cfg, spec=dataclasses.replace(cfg.spec, grid=grid))
        else:
            cfg = dataclasses.replace(cfg, market=dataclasses.replace(cfg.market, grid=grid))
    if args.detune is not None:
        cfg = dataclasses.replace(cfg, detune=args.detune)
    return cfg


def _solve_lq_artifacts(cfg: RunConfig, outdir: Path, mirror: bool):
    spec = cfg.spec
    res = validate_spec(spec)
    if not res.ok or res.case == "none":
        raise AssumptionError("spec not solvable:\n" + res.summary())
    sol = solve_riccati(spec)
    policy = feedback_coeffs(spec, sol)
    diag = adjoint_diagnostics(spec, sol)
    nodes = spec.grid.nodes
    files = []
    files.append(write_csv(
        outdir / "riccati.csv", ["t", "M", "N", "J", "Gamma1", "Phi"],
        zip(nodes, sol.M, sol.N, sol.J, sol.Gamma1, sol.Phi)))
    header = (["t"] + [f"alpha_{k+1}" for k in range(spec.l)]
              + [f"beta_{k+1}" for k in range(spec.l)])
    rows = [[nodes[i]] + list(policy.alpha[i]) + list(policy.beta[i])
            for i in range(nodes.size)]
    files.append(write_csv(outdir / "policy.csv", header, rows))
    report = {
        "case": sol.case,
        "truncation": {"c": sol.trunc_c, "K": sol.trunc_K,
                       "binding": sol.binding,
                       "history": list(sol.history)},
        "eta": sol.eta,
        "terminal": {"M_T": float(sol.M[-1]), "N_T": float(sol.N[-1]),
                     "J_T": float(sol.J[-1]), "Gamma1_T": float(sol.Gamma1[-1]),
                     "Phi_T": float(sol.Phi[-1])},
        "residual_sup": {
            "alpha": float(np.abs(policy.alpha_residual).max()),
            "beta": float(np.abs(policy.beta_residual).max())},
        "H_min_eig": float(min(np.linalg.eigvalsh(H).min() for H in diag.Hweight)),
    }
    files.append(write_json(outdir / "solve_report.json", report))
    if mirror:
        files.append(csv_mirror_json(outdir / "riccati.csv"))
        files.append(csv_mirror_json(outdir / "policy.csv"))
    return sol, policy, files


def _solve_mv_artifacts(cfg: RunConfig, outdir: Path, mirror: bool):
    market = cfg.market
    nodes = market.grid.nodes
    files = []
    if not market.stochastic:
        ansatz = det_ansatz(market)
        policy = assemble_policy(market, ansatz)
        ref = det_premium_policy(market)
        gap = max(float(np.abs(policy.alpha - ref.alpha).max()),
                  float(np.abs(policy.beta - ref.beta).max()))
        if gap > 1e-10:
            raise NumericalError(f"policy route disagreement {gap:.3g}")
        header = (["t"] + [f"alpha_{k+1}" for k in range(market.d)]
                  + [f"beta_{k+1}" for k in range(market.d)])
        rows = [[nodes[i]] + list(policy.alpha[i]) + list(policy.beta[i])
                for i in range(nodes.size)]
        files.append(write_csv(outdir / "mv_policy.csv", header, rows))
        if mirror:
            files.append(csv_mirror_json(outdir / "mv_policy.csv"))
        return policy, None, files

    premium = market.premium
    factors = simulate_factor(premium, market.grid, cfg.bsde.paths,
                              cfg.sim.seed, market.d, cfg.bsde.scheme)
    basis = BasisSpec(degree=cfg.bsde.degree)
    mu = solve_MU_regression(market, factors, basis)
    g2 = solve_gamma2_regression(market, factors, mu, basis)
    ansatz = stochastic_ansatz(market, mu, g2)
    policy = assemble_policy(market, ansatz)
    files += _write_bsde_csvs(market, mu, g2, outdir, mirror)
    header = ["timestep", "t", "basis_index", "M_coef"]
    header += [f"U{j+1}_coef" for j in range(market.d)]
    header += [f"gamma2_{j+1}_coef" for j in range(market.d)]
    header += ["Gamma1", "Gamma"]
    rows = []
    g1 = ansatz.Gamma1
    gam = ansatz.Gamma
    for i in range(market.grid.steps + 1):
        for bix in range(cfg.bsde.degree + 1):
            row = [i, nodes[i], bix, mu.value_coefs[i, bix]]
            for j in range(market.d):
                row.append(mu.mart_coefs[i, j, bix] if i < market.grid.steps else 0.0)
            for j in range(market.d):
                row.append(g2.mart_coefs[i, j, bix] if i < market.grid.steps else 0.0)
            row += [g1[i], gam[i]]
            rows.append(row)
    files.append(write_csv(outdir / "mv_policy_basis.csv", header, rows))
    if mirror:
        files.append(csv_mirror_json(outdir / "mv_policy_basis.csv"))
    return policy, (mu, g2), files


def _write_bsde_csvs(market, mu, g2, outdir: Path, mirror: bool):
    files = []
    header = ["timestep", "basis_index", "M_coef"]
    header += [f"U{j+1}_coef" for j in range(market.d)]
    rows = []
    for i in range(market.grid.steps + 1):
        for bix in range(mu.degree + 1):
            row = [i, bix, mu.value_coefs[i, bix]]
            for j in range(market.d):
                row.append(mu.mart_coefs[i, j, bix] if i < market.grid.steps else 0.0)
            rows.append(row)
    files.append(write_csv(outdir / "bsde_solution.csv", header, rows))
    diags = {
        "M": {"residual_norms": mu.residuals, "condition_numbers": mu.conds,
              "floor_count": mu.floor_count},
        "Gamma2": {"residual_norms": g2.residuals,
                   "condition_numbers": g2.conds,
                   "floor_count": g2.floor_count},
    }
    files.append(write_json(outdir / "bsde_diagnostics.json", diags))
    if mirror:
        files.append(csv_mirror_json(outdir / "bsde_solution.csv"))
    return files


def _write_paths_sample(model, policy, sim: SimConfig, outdir: Path,
                        max_paths: int = 8, max_rows: int = 51):
    dyn = make_dynamics(model)
    n_paths = min(max_paths, 8)
    if sim.antithetic and n_paths % 2:
        n_paths += 1
    bundle = simulate_state(dyn, policy, sim, num_paths=n_paths,
                            stream_ids=(404,))
    steps = bundle.states.shape[1]
    stride = max(1, (steps - 1) // (max_rows - 1))
    rows = []
    for p in range(bundle.states.shape[0]):
        for i in range(0, steps, stride):
            rows.append([p, dyn.grid.nodes[i], bundle.states[p, i]])
    return write_csv(outdir / "paths_sample.csv", ["path", "t", "X"], rows)


def _cmd_solve(cfg: RunConfig, args, outdir: Path) -> int:
    mirror = args.format == "json"
    t0 = time.perf_counter()
    if cfg.mode == "lq":
        _, _, files = _solve_lq_artifacts(cfg, outdir, mirror)
    else:
        _, _, files = _solve_mv_artifacts(cfg, outdir, mirror)
    write_manifest(outdir, args.subcommand, cfg.path, cfg.sha256, cfg.sim.seed,
                   files, time.perf_counter() - t0, __version__)
    print(f"wrote {len(files)} artifact(s) to {outdir}")
    return EXIT_OK


def _cmd_solve_bsde(cfg: RunConfig, args, outdir: Path) -> int:
    if cfg.mode != "mv" or not cfg.market.stochastic:
        raise ConfigError("solve-bsde needs an OU-factor mean-variance config")
    mirror = args.format == "json"
    t0 = time.perf_counter()
    market = cfg.market
    factors = simulate_factor(market.premium, market.grid, cfg.bsde.paths,
                              cfg.sim.seed, market.d, cfg.bsde.scheme)
    basis = BasisSpec(degree=cfg.bsde.degree)
    mu = solve_MU_regression(market, factors, basis)
    g2 = solve_gamma2_regression(market, factors, mu, basis)
    files = _write_bsde_csvs(market, mu, g2, outdir, mirror)
    write_manifest(outdir, args.subcommand, cfg.path, cfg.sha256, cfg.sim.seed,
                   files, time.perf_counter() - t0, __version__)
    print(f"wrote {len(files)} artifact(s) to {outdir}")
    return EXIT_OK


def _cmd_verify(cfg: RunConfig, args, outdir: Path) -> int:
    mirror = args.format == "json"
    t0 = time.perf_counter()
    files = []
    if cfg.mode == "lq":
        sol, eq_policy, files_lq = _solve_lq_artifacts(cfg, outdir, mirror)
        files += files_lq
        probe = eq_policy if cfg.detune == 1.0 else eq_policy.detuned(cfg.detune)
        predictor = LQPredictor(cfg.spec, sol, eq_policy)
        model = cfg.spec
    else:
        eq_policy, _, files_mv = _solve_mv_artifacts(cfg, outdir, mirror)
        files += files_mv
        probe = eq_policy if cfg.detune == 1.0 else eq_policy.detuned(cfg.detune)
        predictor = MVPredictor(cfg.market, eq_policy)
        model = cfg.market
    report = equilibrium_ratio(probe, cfg.sim, model, predictor=predictor)
    expansion = expansion_check(probe, cfg.sim, model, predictor)

    files.append(write_csv(
        outdir / "verification.csv",
        ["t", "v_index", "epsilon", "ratio", "ci", "predicted_first_order",
         "predicted_second_order", "verdict"],
        report.csv_rows()))
    files.append(_write_paths_sample(model, probe, cfg.sim, outdir))
    summary = {
        "overall": report.overall,
        "detune": cfg.detune,
        "backend": report.backend,
        "inner_paths": report.inner_paths,
        "probes": [{
            "t": p.t, "v": p.v_label, "extrapolated": p.extrapolated,
            "ci": p.extrapolated_ci, "predicted_first": p.predicted_first,
            "predicted_second": p.predicted_second, "verdict": p.verdict}
            for p in report.probes],
        "expansion_ok": expansion.ok,
        "feedback_gap": report.feedback_gap,
        "frozen_states": report.x_outer,
    }
    files.append(write_json(outdir / "verify_report.json", summary))
    if mirror:
        files.append(csv_mirror_json(outdir / "verification.csv"))
    write_manifest(outdir, args.subcommand, cfg.path, cfg.sha256, cfg.sim.seed,
                   files, time.perf_counter() - t0, __version__,
                   extra={"overall": report.overall})
    print(f"verification: {report.overall} "
          f"({sum(p.verdict == 'fail' for p in report.probes)} fail, "
          f"{sum(p.verdict == 'inconclusive' for p in report.probes)} inconclusive "
          f"of {len(report.probes)} probes); expansion "
          f"{'ok' if expansion.ok else 'failed'}")
    if report.overall == "fail":
        return EXIT_VERIFY_FAIL
    if report.overall == "inconclusive":
        return EXIT_INCONCLUSIVE
    return EXIT_OK


def _cmd_report(args, outdir: Path) -> int:
    manifests = sorted(Path(outdir).glob("**/manifest.json"))
    entries = []
    import json as _json
    for m in manifests:
        try:
            entries.append(_json.loads(m.read_text()))
        except Exception:
            print(f"skipping unreadable manifest {m}", file=sys.stderr)
    out = write_json(Path(outdir) / "report.json",
                     {"manifests": entries, "count": len(entries)})
    print(f"collated {len(entries)} manifest(s) into {out}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    if args.threads is not None:
        kernels.set_threads(args.threads)
    try:
        if args.subcommand == "report":
            return _cmd_report(args, outdir)
        cfg = _apply_overrides(load_config(args.config), args)
        if args.subcommand in ("solve-lq", "solve-mv"):
            want = "lq" if args.subcommand == "solve-lq" else "mv"
            if cfg.mode != want:
                raise ConfigError(f"{args.subcommand} needs mode = '{want}'")
            return _cmd_solve(cfg, args, outdir)
        if args.subcommand == "solve-bsde":
            return _cmd_solve_bsde(cfg, args, outdir)
        if args.subcommand == "verify":
            return _cmd_verify(cfg, args, outdir)
        raise ConfigError(f"unknown subcommand {args.subcommand!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AssumptionError as exc:
        print(f"assumption violation: {exc}", file=sys.stderr)
        return EXIT_ASSUMPTION
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
