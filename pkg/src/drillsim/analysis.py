"""Post-processing of trajectories and the operating-window optimizers."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import signal

from .forces import ElementKernel
from .params import BeamModel, ParameterError

log = logging.getLogger(__name__)

MPS_TO_MH = 3600.0
N_STATIONS = 8


class AnalysisError(ValueError):
    """Raised when a post-processing quantity is undefined for the input."""


class InfeasibleWindow(RuntimeError):
    """Raised when no grid point satisfies the stress constraint."""


# ------------------------------------------------------------------------ PSD
@dataclass
class PsdEstimate:
    freq: np.ndarray  # Hz
    raw_db: np.ndarray  # dB/Hz, unit reference
    smooth_db: np.ndarray
    density: np.ndarray  # linear one-sided density

    @property
    def df(self) -> float:
        return float(self.freq[1] - self.freq[0])


def sample_step(t, rtol: float = 1e-6) -> float:
    """Step of a uniform time grid; raises on non-uniform input."""
    t = np.asarray(t, dtype=float)
    d = np.diff(t)
    if d.size == 0 or not np.all(d > 0) or np.max(np.abs(d - d.mean())) > rtol * d.mean():
        raise AnalysisError("time grid is not uniform")
    return float(d.mean())


def psd(x, dt: float | None = None, t=None, window: int = 31, order: int = 3) -> PsdEstimate:
    """Periodogram in dB/Hz plus a Savitzky-Golay smoothed curve.

    Give either the sample step ``dt`` or the time grid ``t``. The signal is
    not detrended, so a nonzero mean shows up in the first bin.
    """
    x = np.asarray(x, dtype=float)
    if t is not None:
        dt = sample_step(t)
        if len(t) != x.size:
            raise AnalysisError("signal and time grid lengths differ")
    if dt is None or not dt > 0:
        raise AnalysisError("a positive sample step is required")
    if x.ndim != 1 or x.size < 64:
        raise AnalysisError("psd needs a 1-D signal of at least 64 samples")
    f, S = signal.periodogram(x, fs=1.0 / dt, detrend=False, scaling="density")
    raw = 10.0 * np.log10(np.maximum(S, np.finfo(float).tiny))
    win = min(window, raw.size if raw.size % 2 else raw.size - 1)
    smooth = signal.savgol_filter(raw, win, min(order, win - 1)) if win > order else raw.copy()
    return PsdEstimate(freq=f, raw_db=raw, smooth_db=smooth, density=S)


def dominant_peak(est: PsdEstimate, f_min: float = 0.0, f_max: float | None = None) -> float:
    """Frequency of the largest periodogram bin in (f_min, f_max], DC excluded."""
    sel = (est.freq > max(f_min, 0.0))
    if f_max is not None:
        sel &= est.freq <= f_max
    if not sel.any():
        raise AnalysisError("no frequency bins in the requested band")
    idx = np.flatnonzero(sel)
    return float(est.freq[idx[np.argmax(est.density[idx])]])


def near_frequency(f: float, reference, rtol: float = 0.05) -> bool:
    """True if ``f`` lies within ``rtol`` of some positive reference frequency."""
    ref = np.asarray(reference, dtype=float)
    ref = ref[ref > 0]
    return bool(ref.size and np.min(np.abs(f - ref) / ref) <= rtol)


# ------------------------------------------------------- efficiency and ROP
def _pos(x):
    return np.maximum(np.asarray(x, dtype=float), 0.0)


def efficiency_from_series(t, u_bit_dot, F_br, omega_bit, T_br, u0_dot, lam1, om0, lam4) -> float:
    """Ratio of output to input work on the time grid ``t``."""
    p_out = _pos(u_bit_dot) * _pos(-np.asarray(F_br)) + _pos(omega_bit) * _pos(-np.asarray(T_br))
    p_in = _pos(u0_dot) * _pos(-np.asarray(lam1)) + _pos(om0) * _pos(-np.asarray(lam4))
    w_in = float(np.trapezoid(p_in, t))
    if not w_in > 0:
        raise AnalysisError("input work is zero; efficiency undefined")
    return float(np.trapezoid(p_out, t)) / w_in


def drilling_efficiency(traj) -> float:
    """Useful power at the bit over power injected at the origin."""
    return efficiency_from_series(traj.t, traj.bit_velocity, traj.bit_force, traj.bit_omega,
                                  traj.bit_torque, traj.history("u", 0, 1), traj.lam[:, 0],
                                  traj.history("tx", 0, 1), traj.lam[:, 3])


def time_mean(x, t=None) -> float:
    """Trapezoid time average on ``t`` (plain mean without a grid)."""
    x = np.asarray(x, dtype=float)
    if t is None:
        return float(x.mean())
    t = np.asarray(t, dtype=float)
    return float(np.trapezoid(x, t) / (t[-1] - t[0]))


def rate_of_penetration(u_bit_dot, t=None) -> float:
    """Time mean of the positive part of the bit axial velocity (m/s).

    Accepts a velocity array or a trajectory.
    """
    if hasattr(u_bit_dot, "bit_velocity"):
        return rate_of_penetration(u_bit_dot.bit_velocity, u_bit_dot.t)
    return time_mean(_pos(u_bit_dot), t)


def mean_velocity(u_bit_dot, t=None) -> float:
    """Plain time mean of the bit axial velocity, no positive part."""
    if hasattr(u_bit_dot, "bit_velocity"):
        return mean_velocity(u_bit_dot.bit_velocity, u_bit_dot.t)
    return time_mean(u_bit_dot, t)


def shock_packages(impact_times, max_gap: float = 0.1) -> list[tuple[float, float]]:
    """Group impact instants into packages split by quiet spans over ``max_gap``."""
    ti = np.sort(np.asarray(impact_times, dtype=float))
    if ti.size == 0:
        return []
    cuts = np.flatnonzero(np.diff(ti) > max_gap)
    starts = np.concatenate([[0], cuts + 1])
    ends = np.concatenate([cuts, [ti.size - 1]])
    return [(float(ti[a]), float(ti[b])) for a, b in zip(starts, ends)]


# ----------------------------------------------------------------- von Mises
@dataclass
class StressField:
    """Stresses at outer-fibre stations; arrays shaped (n_t, n_x, n_stations)."""

    x: np.ndarray
    sxx: np.ndarray
    sxy: np.ndarray
    sxz: np.ndarray

    @property
    def vm(self) -> np.ndarray:
        return von_mises(self.sxx, self.sxy, self.sxz)


def von_mises(sxx, sxy, sxz):
    return np.sqrt(np.asarray(sxx) ** 2 + 3.0 * (np.asarray(sxy) ** 2 + np.asarray(sxz) ** 2))


def strains(s, y, z):
    """Green-Lagrange strains (exx, exy, exz) of the section point (y, z).

    ``s`` is a FieldState; ``y``/``z`` broadcast against its arrays.
    """
    C, S = np.cos(s.tx), np.sin(s.tx)
    up, vp, wp = s.u_p, s.v_p, s.w_p
    typ, tzp, txp = s.ty_p, s.tz_p, s.tx_p
    bend = z * typ - y * tzp
    exx = (up - y * tzp + z * typ + up * bend - y * z * typ * tzp
           + txp * ((y * wp - z * vp) * C - (y * vp + z * wp) * S)
           + 0.5 * (up ** 2 + vp ** 2 + wp ** 2 + (y * tzp) ** 2 + (z * typ) ** 2
                    + (y * y + z * z) * txp ** 2))
    exy = 0.5 * (vp * C + wp * S - z * txp) + 0.5 * s.tz * (-bend - up - 1.0)
    exz = 0.5 * (wp * C - vp * S + y * txp) + 0.5 * s.ty * (bend + up + 1.0)
    return exx, exy, exz


class StressRecovery:
    """Outer-fibre stress evaluation on a fixed mesh and parameter set.

    Fields are sampled at ``n_gauss`` points per element and at
    ``n_stations`` equally spaced angles on the outer radius.
    """

    def __init__(self, mesh, model: BeamModel, n_stations: int = N_STATIONS, n_gauss: int = 2,
                 phase: float = 0.0):
        self.kernel = ElementKernel(mesh, model, n_gauss=n_gauss)
        self.E = model.material.E
        self.kG = model.material.kappa_s * model.moduli.G
        ang = phase + 2.0 * math.pi * np.arange(n_stations) / n_stations
        R = model.geometry.R_ext
        self.y, self.z = R * np.cos(ang), R * np.sin(ang)
        self.x = self.kernel.points.ravel()

    def field(self, Q) -> StressField:
        """Stresses for full nodal state(s) Q of shape (..., N_dofs)."""
        s = self.kernel.field_state(np.asarray(Q, dtype=float))
        lead = s.u_p.shape[:-2]
        for name in vars(s):
            setattr(s, name, getattr(s, name).reshape(lead + (-1, 1)))
        exx, exy, exz = strains(s, self.y, self.z)
        return StressField(self.x, self.E * exx, 2.0 * self.kG * exy, 2.0 * self.kG * exz)

    def max_vm(self, Q) -> float:
        return float(np.max(self.field(Q).vm)) if np.size(Q) else 0.0


def von_mises_max(traj, stride: int = 1, chunk: int = 128, recovery: StressRecovery | None = None) -> float:
    """Largest von Mises stress over x, t and the outer-fibre stations (Pa)."""
    dyn = traj.dyn
    rec = recovery or StressRecovery(dyn.mesh, dyn.model)
    q = traj.q[::stride]
    best = 0.0
    for a in range(0, q.shape[0], chunk):
        best = max(best, rec.max_vm(q[a:a + chunk] @ dyn.PhiT))
    return best


# ------------------------------------------------------------- trajectory KPIs
def trajectory_metrics(traj, stress_stride: int = 1) -> dict:
    """Scalar summary used by the grid optimizers and the CLI."""
    try:
        eff = drilling_efficiency(traj)
    except AnalysisError:
        eff = float("nan")
    return {
        "rop": rate_of_penetration(traj),
        "mean_velocity": mean_velocity(traj),
        "efficiency": eff,
        "vm_max": von_mises_max(traj, stride=stress_stride),
        "omega_ratio": float(np.max(traj.bit_omega) / np.mean(traj.bit_omega))
        if np.mean(traj.bit_omega) > 0 else float("nan"),
    }


# ---------------------------------------------------------------- optimizers
@dataclass
class WindowGrid:
    """Rectangular (V0, Omega) grid with per-point results.

    Result maps are indexed ``[i_V0, i_Omega]``.
    """

    V0: np.ndarray
    Omega: np.ndarray
    results: dict = field(default_factory=dict)
    failed: np.ndarray | None = None

    def __post_init__(self):
        self.V0 = np.atleast_1d(np.asarray(self.V0, dtype=float))
        self.Omega = np.atleast_1d(np.asarray(self.Omega, dtype=float))
        for name, g in (("V0", self.V0), ("Omega", self.Omega)):
            if g.ndim != 1 or g.size == 0:
                raise ParameterError(f"{name} grid must be a non-empty vector")
            if np.any(np.diff(g) <= 0):
                raise ParameterError(f"{name} grid must be strictly increasing")
            if np.any(g < 0):
                raise ParameterError(f"{name} grid must be non-negative")
        if self.failed is None:
            self.failed = np.zeros(self.shape, dtype=bool)

    @classmethod
    def linspace(cls, V0_range, Omega_range, n_V0: int = 7, n_Omega: int = 7) -> "WindowGrid":
        return cls(np.linspace(*V0_range, n_V0), np.linspace(*Omega_range, n_Omega))

    @property
    def shape(self) -> tuple[int, int]:
        return self.V0.size, self.Omega.size

    def points(self):
        return [(i, j, self.V0[i], self.Omega[j]) for i in range(self.V0.size)
                for j in range(self.Omega.size)]

    def rows(self):
        """(V0, Omega, failed, result...) rows for columnar output."""
        keys = sorted(self.results)
        out = []
        for i, j, v, o in self.points():
            out.append([v, o, int(self.failed[i, j])] + [float(self.results[k][i, j]) for k in keys])
        return ["V0", "Omega", "failed"] + keys, out


PAPER_WINDOW = ((1.0 / 360.0, 1.0 / 90.0), (1.5 * math.pi, 7.0 * math.pi / 3.0))


@dataclass
class Optimum:
    i: int
    j: int
    V0: float
    Omega: float
    objective: float
    grid: WindowGrid
    admissible: np.ndarray


def _evaluate_grid(grid: WindowGrid, evaluate, jobs: int = 1):
    pts = grid.points()
    args = [(v, o) for _, _, v, o in pts]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            outs = list(ex.map(_safe_call, [evaluate] * len(args), args))
    else:
        outs = [_safe_call(evaluate, a) for a in args]
    for (i, j, _, _), res in zip(pts, outs):
        if res is None:
            grid.failed[i, j] = True
            continue
        for key, val in res.items():
            grid.results.setdefault(key, np.full(grid.shape, np.nan))[i, j] = val
    n_fail = int(grid.failed.sum())
    if n_fail:
        log.warning("%d grid points failed and are excluded", n_fail)
    return grid


def _safe_call(fn, args):
    try:
        return fn(*args)
    except Exception as exc:  # a failed point is marked, not fatal
        log.warning("grid point %s failed: %r", args, exc)
        return None


def _argmax(grid: WindowGrid, objective: str, admissible: np.ndarray) -> Optimum:
    ok = admissible & ~grid.failed
    if not ok.any():
        raise InfeasibleWindow("no admissible grid point")
    vals = np.where(ok, grid.results[objective], -np.inf)
    i, j = np.unravel_index(int(np.argmax(vals)), vals.shape)
    return Optimum(int(i), int(j), float(grid.V0[i]), float(grid.Omega[j]), float(vals[i, j]),
                   grid, ok)


def optimize_deterministic(grid: WindowGrid, evaluate, uts: float = 650e6, jobs: int = 1) -> Optimum:
    """Maximize ROP subject to ``uts - vm_max >= 0`` over every grid point.

    ``evaluate(V0, Omega)`` returns a dict with at least ``rop`` and ``vm_max``.
    """
    _evaluate_grid(grid, evaluate, jobs)
    grid.results["margin"] = uts - grid.results["vm_max"]
    return _argmax(grid, "rop", grid.results["margin"] >= 0)


def optimize_robust(grid: WindowGrid, evaluate, uts: float = 650e6, p_risk: float = 0.1,
                    jobs: int = 1) -> Optimum:
    """Maximize E[ROP] subject to ``P(vm_max <= uts) >= 1 - p_risk``.

    ``evaluate(V0, Omega)`` returns per-realization arrays ``rop`` and
    ``vm_max`` (failed realizations as NaN).
    """
    if not 0 < p_risk < 1:
        raise ParameterError("P_risk must lie in (0, 1)")

    _evaluate_grid(grid, _RobustReducer(evaluate, uts), jobs)
    return _argmax(grid, "mean_rop", grid.results["prob_safe"] >= 1.0 - p_risk)


@dataclass
class _RobustReducer:
    evaluate: object
    uts: float

    def __call__(self, V0, Omega):
        res = self.evaluate(V0, Omega)
        rop = np.asarray(res["rop"], dtype=float)
        vm = np.asarray(res["vm_max"], dtype=float)
        ok = np.isfinite(rop) & np.isfinite(vm)
        if not ok.any():
            raise AnalysisError("every realization failed")
        return {"mean_rop": float(rop[ok].mean()), "prob_safe": float(np.mean(vm[ok] <= self.uts)),
                "n_ok": float(ok.sum())}


@dataclass
class PointEvaluator:
    """Deterministic run at one operating point, picklable for worker pools."""

    dyn: object
    t_end: float
    q0: np.ndarray | None = None
    stress_stride: int = 1
    sim_kwargs: dict = field(default_factory=dict)

    def __call__(self, V0, Omega) -> dict:
        from .integrate import simulate
        d = self.dyn.variant(self.dyn.model.with_operating(V0, Omega))
        tr = simulate(d, self.t_end, q0=self.q0, **self.sim_kwargs)
        return trajectory_metrics(tr, self.stress_stride)


@dataclass
class _McSummary:
    stress_stride: int = 1

    def __call__(self, tr):
        return {"rop": rate_of_penetration(tr), "vm_max": von_mises_max(tr, stride=self.stress_stride)}


@dataclass
class RobustEvaluator:
    """Monte Carlo at one operating point; returns per-realization ROP and stress."""

    dyn: object
    stochastic: object
    n_s: int
    t_end: float
    q0: np.ndarray | None = None
    stress_stride: int = 1
    mc_jobs: int = 1
    sim_kwargs: dict = field(default_factory=dict)

    def __call__(self, V0, Omega) -> dict:
        from .uq import run_monte_carlo
        d = self.dyn.variant(self.dyn.model.with_operating(V0, Omega))
        mc = run_monte_carlo(d, self.stochastic, self.n_s, self.t_end, q0=self.q0,
                             summarize=_McSummary(self.stress_stride), jobs=self.mc_jobs,
                             sim_kwargs=self.sim_kwargs)
        return {"rop": mc.summary_array("rop"), "vm_max": mc.summary_array("vm_max")}
