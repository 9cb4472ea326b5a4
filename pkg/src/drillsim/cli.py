"""Command-line front end: ``drillsim <kind> --config FILE [--jobs N] [--seed S] [--out DIR]``.

Exit codes:
    0  success
    1  unexpected internal error
    2  configuration error (message carries the config line when known)
    3  numerical failure (message names the failing stage)
    4  no admissible operating point in the window
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
import time
from dataclasses import replace

import numpy as np
import scipy

from . import __version__
from . import analysis as an
from .config import KINDS, ConfigError, RunConfig, format_violation, load_config, parse_signal, validate
from .dynamics import ReducedDynamics
from .fem import assemble_constant_system, build_mesh
from .integrate import (NewmarkParams, SolverControls, StaticDivergence, StepFailure, simulate,
                        static_equilibrium)
from .modal import EigenSolverError, reduced_model, select_modes
from .uq import run_monte_carlo, tail_relative_change

log = logging.getLogger("drillsim")

EXIT_OK, EXIT_INTERNAL, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_INFEASIBLE = 0, 1, 2, 3, 4


class NumericalFailure(RuntimeError):
    def __init__(self, stage: str, exc: Exception):
        self.stage = stage
        super().__init__(f"{stage}: {exc}")


class Artifacts:
    """Single writer for the columnar files of one run."""

    def __init__(self, out_dir: str, cfg: RunConfig):
        self.dir = out_dir
        self.cfg = cfg
        self.digest = cfg.digest()
        self.files = []
        os.makedirs(out_dir, exist_ok=True)
        if not os.access(out_dir, os.W_OK):
            raise ConfigError([("out", None, f"output directory {out_dir!r} is not writable")])

    def table(self, name: str, title: str, columns, units, rows) -> str:
        path = os.path.join(self.dir, name)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            fh.write(f"# drillsim {__version__} | {title} | config {self.digest}\n")
            fh.write("# units: " + ", ".join(f"{c} [{u}]" for c, u in zip(columns, units)) + "\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for row in rows:
                w.writerow([_num(x) for x in row])
        self.files.append(name)
        return path

    def manifest(self, kind: str, wall: float, summary: dict) -> str:
        path = os.path.join(self.dir, "manifest.json")
        data = {
            "kind": kind,
            "config_hash": self.digest,
            "config": self.cfg.as_dict(),
            "seed": self.cfg.seed,
            "versions": {"drillsim": __version__, "python": platform.python_version(),
                         "numpy": np.__version__, "scipy": scipy.__version__},
            "wall_time_s": round(wall, 3),
            "artifacts": self.files,
            "summary": summary,
        }
        data = _clean(data)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(data, fh, indent=2, default=_json_default)
            fh.write("\n")
        return path


def _num(x):
    if isinstance(x, (int, np.integer)):
        return int(x)
    if isinstance(x, str):
        return x
    return f"{float(x):.10g}"


def _clean(x):
    """JSON-safe copy: numpy scalars unwrapped, non-finite floats as null."""
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, np.generic):
        x = x.item()
    if isinstance(x, float) and not np.isfinite(x):
        return None
    return x


def _json_default(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    return str(x)


# ------------------------------------------------------------------ pipeline
def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except (StepFailure, StaticDivergence, EigenSolverError, np.linalg.LinAlgError,
            FloatingPointError) as exc:
        raise NumericalFailure(name, exc) from exc


def build_dynamics(cfg: RunConfig):
    model = cfg.model
    mesh = build_mesh(model.geometry.L, cfg["mesh"]["n_elem"])
    system = assemble_constant_system(mesh, model)
    r = cfg["reduction"]
    table, red = _stage("modal", reduced_model, system, r["flex_cutoff_hz"], r["band_fhat"])
    sw = cfg["switches"]
    dyn = ReducedDynamics(red, model, contact=sw["contact"], bit=sw["bit"])
    return table, red, dyn


def solver_settings(cfg: RunConfig):
    i = cfg["integrator"]
    nm = NewmarkParams(alpha=i["alpha"], dt_nominal=i["dt"], refine_factor=i["refine_factor"],
                       refine_release=i["refine_release"])
    ctl = SolverControls(tol=i["tol"], max_iter=i["max_iter"])
    return dict(newmark=nm, controls=ctl, refine=i["refine"])


def initial_configuration(cfg: RunConfig, dyn):
    if not cfg["static"]["enabled"]:
        return None
    st = _stage("static", static_equilibrium, dyn, t_max=cfg["static"]["t_max"])
    return st.q


def signal_of(traj, spec: str):
    name, x, rate = parse_signal(spec)
    if name == "bit_velocity":
        return traj.bit_velocity
    if name == "bit_omega":
        return traj.bit_omega
    return traj.at_x(name, x, rate)


def bit_velocity(traj):
    return traj.bit_velocity


def bit_omega(traj):
    return traj.bit_omega


def mc_summary(traj):
    return {"rop": an.rate_of_penetration(traj), "mean_velocity": an.mean_velocity(traj)}


def run_modal(cfg, art):
    table, red, _ = build_dynamics(cfg)
    r = cfg["reduction"]
    kept = set(select_modes(table, r["flex_cutoff_hz"], r["band_fhat"]).tolist())
    rows = [(i, f, fh, band, c, int(i in kept)) for i, f, fh, band, c in table.to_rows()]
    art.table("modes.csv", "free-free modes", ["index", "freq", "fhat", "fhat_band", "family", "kept"],
              ["-", "Hz", "-", "-", "-", "-"], rows)
    counts = {fam: int(np.sum(red.family == fam)) for fam in ("longitudinal", "torsional", "flexural")}
    return {"n_red": red.n_red, "n_modes_computed": table.n_modes, "kept_by_family": counts}


def run_static(cfg, art):
    _, red, dyn = build_dynamics(cfg)
    st = _stage("static", static_equilibrium, dyn, t_max=cfg["static"]["t_max"])
    Q = st.full(dyn).reshape(-1, 6)
    x = dyn.mesh.node_coords
    r = np.hypot(Q[:, 1], Q[:, 2])
    rows = [(x[i], *Q[i], r[i], int(r[i] > dyn.gap)) for i in range(len(x))]
    art.table("static.csv", "static equilibrium", ["x", "u", "v", "w", "tx", "ty", "tz", "r", "contact"],
              ["m", "m", "m", "m", "rad", "rad", "rad", "m", "-"], rows)
    return {"relaxation_time_s": st.t, "kinetic_ratio": st.kinetic_ratio,
            "contact_nodes": int(np.sum(r > dyn.gap)), "min_v": float(Q[:, 1].min())}


def _simulate(cfg, dyn, q0, t_end=None):
    return _stage("simulate", simulate, dyn, t_end or cfg["integrator"]["t_end"], q0=q0,
                  **solver_settings(cfg))


def write_trajectory(art, tr, stride: int = 1, section_x: float = 50.0):
    """Bit and cross-section histories plus the reduced state on the output grid."""
    x = min(max(section_x, 0.0), tr.dyn.mesh.L)
    cols = ["t", "u_bit", "u_bit_dot", "tx_bit", "omega_bit", "v_sec", "w_sec", "v_sec_dot",
            "w_sec_dot", "F_br", "T_br", "lam1", "lam4", "contacts", "impacts"]
    units = ["s", "m", "m/s", "rad", "rad/s", "m", "m", "m/s", "m/s", "N", "N.m", "N", "N.m", "-", "-"]
    n = tr.q.shape[1]
    cols += [f"q{k}" for k in range(n)]
    units += ["-"] * n
    data = np.column_stack([tr.t, tr.history("u", -1), tr.bit_velocity, tr.history("tx", -1),
                            tr.bit_omega, tr.at_x("v", x), tr.at_x("w", x), tr.at_x("v", x, 1),
                            tr.at_x("w", x, 1), tr.bit_force, tr.bit_torque, tr.lam[:, 0],
                            tr.lam[:, 3], tr.contact_count, tr.impacts, tr.q])[::stride]
    k = cols.index("contacts")
    rows = [[*r[:k], int(r[k]), int(r[k + 1]), *r[k + 2:]] for r in data]
    art.table("trajectory.csv", f"reduced trajectory, cross-section at x={x:g} m", cols, units, rows)
    ev = tr.shock_log.as_array()
    art.table("shocks.csv", "wall contact events", ["node", "x", "t_entry", "t_exit"],
              ["-", "m", "s", "s"], [(int(e[0]), e[1], e[2], e[3]) for e in ev])


def run_simulate(cfg, art):
    _, red, dyn = build_dynamics(cfg)
    q0 = initial_configuration(cfg, dyn)
    tr = _simulate(cfg, dyn, q0)
    write_trajectory(art, tr, cfg["output"]["stride"], cfg["output"]["section_x"])
    summary = an.trajectory_metrics(tr)
    summary.update(n_steps=tr.n_steps, constraint_residual=tr.constraint_residual,
                   shock_packages=len(an.shock_packages(tr.shock_log.as_array()[:, 2])))
    return summary


def run_psd(cfg, art):
    _, red, dyn = build_dynamics(cfg)
    q0 = initial_configuration(cfg, dyn)
    tr = _simulate(cfg, dyn, q0)
    p = cfg["psd"]
    summary = {}
    freqs = red.omega / (2 * np.pi)
    for spec in p["signals"]:
        est = an.psd(signal_of(tr, spec), t=tr.t, window=p["window"], order=p["order"])
        safe = spec.replace("@", "_at_")
        art.table(f"psd_{safe}.csv", f"PSD of {spec}", ["freq", "raw", "smooth"],
                  ["Hz", "dB/Hz", "dB/Hz"], zip(est.freq, est.raw_db, est.smooth_db))
        peak = an.dominant_peak(est, f_min=p["f_min"])
        summary[spec] = {"peak_hz": peak, "near_mode": an.near_frequency(peak, freqs)}
    return summary


def run_mc(cfg, art, jobs):
    _, red, dyn = build_dynamics(cfg)
    q0 = initial_configuration(cfg, dyn)
    t_end = cfg["mc"]["t_end"] or cfg["integrator"]["t_end"]
    mc = _stage("mc", run_monte_carlo, dyn, cfg.stochastic, cfg["mc"]["n_s"], t_end, q0=q0,
                observables={"bit_velocity": bit_velocity, "bit_omega": bit_omega},
                summarize=mc_summary, jobs=jobs, sim_kwargs=solver_settings(cfg))
    conv = mc.conv
    art.table("conv.csv", "MC convergence", ["n_s", "conv"], ["-", "-"],
              zip(range(1, conv.size + 1), conv))
    rop = mc.summary_array("rop")
    art.table("realizations.csv", "MC realizations", ["index", "alpha_BR", "Gamma_BR", "mu_BR", "sq_norm", "rop"],
              ["-", "1/(m/s)", "N", "-", "-", "m/s"],
              [(k, *mc.draws[k], mc.sq_norms[k], rop[k]) for k in range(mc.n_s)])
    stride = cfg["output"]["stride"]
    for name, unit in (("bit_velocity", "m/s"), ("bit_omega", "rad/s")):
        if mc.ok.any():
            mean, lo, hi = mc.envelope(name)
            art.table(f"envelope_{name}.csv", f"95% band of {name}", ["t", "mean", "lo", "hi"],
                      ["s", unit, unit, unit], list(zip(mc.t, mean, lo, hi))[::stride])
    if not mc.ok.any():
        raise NumericalFailure("mc", RuntimeError("every realization failed"))
    return {"n_ok": int(mc.ok.sum()), "failures": mc.failures, "conv_final": float(conv[-1]),
            "tail_relative_change": tail_relative_change(conv) if conv.size >= 2 else None, "mean_rop": float(np.nanmean(rop))}


def _grid(cfg):
    w = cfg["window"]
    return an.WindowGrid.linspace(w["V0"], w["Omega"], w["n_V0"], w["n_Omega"])


def _write_maps(art, grid: an.WindowGrid, name):
    cols, rows = grid.rows()
    units = ["m/s", "rad/s", "-"] + ["-"] * (len(cols) - 3)
    art.table(name, "operating-window maps", cols, units, rows)


def run_optimize(cfg, art, jobs, robust=False):
    _, red, dyn = build_dynamics(cfg)
    q0 = initial_configuration(cfg, dyn)
    w = cfg["window"]
    t_end = w["t_end"] or cfg["integrator"]["t_end"]
    grid = _grid(cfg)
    if robust:
        ev = an.RobustEvaluator(dyn, cfg.stochastic, w["n_s"], t_end, q0, w["stress_stride"],
                                sim_kwargs=solver_settings(cfg))
        run = lambda: an.optimize_robust(grid, ev, w["uts"], w["p_risk"], jobs=jobs)
        objective = "mean_rop"
    else:
        ev = an.PointEvaluator(dyn, t_end, q0, w["stress_stride"], sim_kwargs=solver_settings(cfg))
        run = lambda: an.optimize_deterministic(grid, ev, w["uts"], jobs=jobs)
        objective = "rop"
    try:
        opt = run()
    finally:
        _write_maps(art, grid, "window_robust.csv" if robust else "window.csv")
    return {"V0": opt.V0, "Omega": opt.Omega, objective: opt.objective,
            f"{objective}_m_per_h": opt.objective * an.MPS_TO_MH,
            "n_admissible": int(opt.admissible.sum()), "n_failed": int(grid.failed.sum())}


# ------------------------------------------------------------------------ CLI
def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="drillsim", description=__doc__.splitlines()[0])
    p.add_argument("kind", choices=KINDS + ("validate",))
    p.add_argument("--config", "-c", help="JSON configuration file (defaults when omitted)")
    p.add_argument("--jobs", "-j", type=int, default=1, help="worker processes")
    p.add_argument("--seed", type=int, help="override the configuration seed")
    p.add_argument("--out", "-o", help="output directory")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def run(cfg: RunConfig, out_dir: str, jobs: int = 1) -> dict:
    """Execute one pipeline and write its artifacts; returns the run summary."""
    art = Artifacts(out_dir, cfg)
    t0 = time.perf_counter()
    kind = cfg.kind
    if kind == "modal":
        summary = run_modal(cfg, art)
    elif kind == "static":
        summary = run_static(cfg, art)
    elif kind == "simulate":
        summary = run_simulate(cfg, art)
    elif kind == "psd":
        summary = run_psd(cfg, art)
    elif kind == "mc":
        summary = run_mc(cfg, art, jobs)
    elif kind == "optimize":
        summary = run_optimize(cfg, art, jobs)
    elif kind == "optimize-robust":
        summary = run_optimize(cfg, art, jobs, robust=True)
    else:
        raise ConfigError([("kind", None, f"unknown kind {kind!r}")])
    art.manifest(kind, time.perf_counter() - t0, summary)
    return summary


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    if args.kind == "validate":
        text = ""
        if args.config:
            try:
                with open(args.config, encoding="utf-8") as fh:
                    text = fh.read()
            except OSError as exc:
                print(f"config error: {exc}", file=sys.stderr)
                return EXIT_CONFIG
        problems = validate(text)
        if problems:
            for msg in problems:
                print(f"config error: {msg}", file=sys.stderr)
            return EXIT_CONFIG
        print("configuration is valid")
        return EXIT_OK
    try:
        cfg = load_config(args.config, args.kind)
        if args.seed is not None:
            if not 0 <= args.seed < 2**64:
                raise ConfigError([("seed", None, "must be an integer in [0, 2^64)")])
            cfg = replace(cfg, seed=args.seed)
        if args.jobs < 1:
            raise ConfigError([("jobs", None, "must be >= 1")])
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {format_violation(v)}", file=sys.stderr)
        return EXIT_CONFIG
    level = "debug" if args.verbose else cfg.verbosity
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s")
    out_dir = args.out or cfg.out
    try:
        summary = run(cfg, out_dir, args.jobs)
    except ConfigError as exc:
        for v in exc.violations:
            print(f"config error: {format_violation(v)}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalFailure as exc:
        print(f"numerical failure in stage {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except an.InfeasibleWindow as exc:
        print(f"optimization: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    print(json.dumps(_clean(summary), default=_json_default, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
