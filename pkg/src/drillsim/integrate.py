"""Constrained Newmark integration of the reduced system.

Each step solves the saddle-point system

    [K_hat  B^T] [q]   [g(q) + history]
    [B      0  ] [l] = [h(t_{n+1})     ]

by a fixed-point iteration on the nonlinear right-hand side. Every sweep
eliminates the multipliers through their Schur complement ``B P^-1 B^T``
(a small dense "Poisson" system), back-substitutes for the displacement
increment and applies a relaxation factor. The iteration matrix ``P`` is
``K_hat`` minus a cheap approximate tangent of the nonlinear force; with
``tangent="none"`` it is ``K_hat`` itself, the plain fixed point.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .contact import ShockLog
from .dynamics import ReducedDynamics
from .fem import constraint_values

log = logging.getLogger(__name__)


class StepFailure(RuntimeError):
    """Raised when a step cannot converge even at the smallest allowed dt."""


class StaticDivergence(RuntimeError):
    """Raised when the relaxation run does not settle within its horizon."""


@dataclass(frozen=True)
class NewmarkParams:
    alpha: float = 0.015
    dt_nominal: float | None = None
    refine_factor: int = 8
    refine_release: int = 10
    min_dt_factor: float = 1.0 / 1024.0

    @property
    def gamma(self) -> float:
        return 0.5 + self.alpha

    @property
    def beta(self) -> float:
        return 0.25 * (0.5 + self.gamma) ** 2

    def coefficients(self, dt: float):
        """Newmark constants (a0 ... a5) for step ``dt``."""
        g, b = self.gamma, self.beta
        return (1.0 / (b * dt * dt), g / (b * dt), 1.0 / (b * dt), 0.5 / b - 1.0,
                g / b - 1.0, dt * (0.5 * g / b - 1.0))


def nominal_time_step(L: float, c_L: float) -> float:
    """Half the period of the highest retained frequency ``4 c_L / L``."""
    return 1.0 / (2.0 * 4.0 * c_L / L)


@dataclass(frozen=True)
class SolverControls:
    tol: float = 1e-6
    max_iter: int = 50
    relaxation: float = 1.0
    tangent: str = "analytic"
    max_backtrack: int = 6

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tolerance must be positive")
        if not 0 < self.relaxation < 2:
            raise ValueError("relaxation must lie in (0, 2)")
        if self.tangent not in ("analytic", "none"):
            raise ValueError("tangent must be 'analytic' or 'none'")


def newmark_predict(q, qd, qdd, dt: float, params: NewmarkParams):
    """Displacement predictor obtained with a zero end-of-step acceleration."""
    return q + dt * qd + dt * dt * (0.5 - params.beta) * qdd


def newmark_update(q_new, q, qd, qdd, dt: float, params: NewmarkParams):
    """End-of-step velocity and acceleration implied by ``q_new``."""
    a0, a1, a2, a3, a4, a5 = params.coefficients(dt)
    dq = q_new - q
    qdd_new = a0 * dq - a2 * qd - a3 * qdd
    qd_new = a1 * dq - a4 * qd - a5 * qdd
    return qd_new, qdd_new


@dataclass
class StepResult:
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    lam: np.ndarray
    iterations: int
    converged: bool
    in_contact: np.ndarray | None = None


class ConstrainedStepper:
    """One-step solver bound to a force model and the constraint data."""

    def __init__(self, dyn: ReducedDynamics, newmark: NewmarkParams, controls: SolverControls,
                 extra_damping: float = 0.0):
        self.dyn = dyn
        red = dyn.red
        self.M = red.M_r
        self.C = red.C_r + extra_damping * red.M_r
        self.K = red.K_r
        self.B = red.B_r
        self.nm = newmark
        self.ctl = controls
        self.op = dyn.model.operating
        # minimum-norm projector onto {B q = h} in the mass metric
        Minv_Bt = np.linalg.solve(self.M, self.B.T)
        self._proj = (Minv_Bt, sla.cho_factor(self.B @ Minv_Bt))
        # residual measured in the null space of B, where the multipliers do not act
        self._Z = sla.null_space(self.B)

    def h(self, t: float) -> np.ndarray:
        return constraint_values(t, self.op)

    def project(self, q, t):
        Minv_Bt, fac = self._proj
        return q + Minv_Bt @ sla.cho_solve(fac, self.h(t) - self.B @ q)

    def step(self, q, qd, qdd, t: float, dt: float) -> StepResult:
        nm, ctl, dyn = self.nm, self.ctl, self.dyn
        a0, a1, a2, a3, a4, a5 = nm.coefficients(dt)
        t1 = t + dt
        Khat = self.K + a0 * self.M + a1 * self.C
        hist = self.M @ (a0 * q + a2 * qd + a3 * qdd) + self.C @ (a1 * q + a4 * qd + a5 * qdd)
        h1 = self.h(t1)
        qk = self.project(newmark_predict(q, qd, qdd, dt, nm), t1)
        lam = np.zeros(self.B.shape[0])
        omega = ctl.relaxation
        converged = False
        it = 0
        prev_contact = prev_bit = None
        lu = PinvBt = S = None
        rho = None
        for it in range(1, ctl.max_iter + 1):
            qd_k, qdd_k = newmark_update(qk, q, qd, qdd, dt, nm)
            if rho is None:
                rho = dyn.force(qk, qd_k, qdd_k, t1) + hist - Khat @ qk
            if ctl.tangent == "analytic":
                J = dyn.rotation_tangent(qk)
                if dyn.contact:
                    J += dyn.contact_tangent(qk, qd_k, prev_contact, a1)
                    prev_contact = dyn.contact_memory(qk, qd_k)
                if dyn.bit:
                    J += dyn.bit_tangent(qd_k, a1, prev_bit)
                    prev_bit = dyn.bit_state(qd_k)
                lu = sla.lu_factor(Khat - J)
                PinvBt = sla.lu_solve(lu, self.B.T)
                S = sla.lu_factor(self.B @ PinvBt)
            elif lu is None:
                lu = sla.lu_factor(Khat)
                PinvBt = sla.lu_solve(lu, self.B.T)
                S = sla.lu_factor(self.B @ PinvBt)
            y = sla.lu_solve(lu, rho)
            # multiplier "Poisson" system, then back-substitution
            lam = sla.lu_solve(S, self.B @ y - (h1 - self.B @ qk))
            d = omega * (y - PinvBt @ lam)
            step_norm = float(np.linalg.norm(d))
            if not np.isfinite(step_norm):
                break
            qk, rho, full = self._line_search(qk, d, rho, q, qd, qdd, dt, t1, hist, Khat)
            if rho is None:
                break
            if full is not None and ctl.tangent == "analytic":
                # backtracked: the rejected full step tells where the kinks lie,
                # so the next secant slopes are taken against it
                qd_f = newmark_update(full, q, qd, qdd, dt, nm)[0]
                if dyn.contact:
                    prev_contact = dyn.contact_memory(full, qd_f)
                if dyn.bit:
                    prev_bit = dyn.bit_state(qd_f)
            base = max(float(np.linalg.norm(qk - q)), 1e-12)
            if step_norm <= ctl.tol * base:
                converged = True
                break
        qd1, qdd1 = newmark_update(qk, q, qd, qdd, dt, nm)
        in_contact = None
        if dyn.contact:
            v, w = dyn.nodal_lateral(qk)
            in_contact = v * v + w * w > dyn.gap ** 2
        return StepResult(qk, qd1, qdd1, lam, it, converged, in_contact)

    def _line_search(self, qk, d, rho, q, qd, qdd, dt, t1, hist, Khat):
        """Backtrack along ``d`` until the null-space residual decreases.

        Returns the accepted point, its residual and the rejected full step
        (None when the full step was accepted).

        The iterate starts on ``B q = h`` (projected predictor) and ``d`` keeps
        it there, so every trial point is admissible.
        """
        ctl = self.ctl
        Z = self._Z
        m0 = float(np.linalg.norm(Z.T @ rho))
        best = None
        s = 1.0
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(ctl.max_backtrack + 1):
                trial = qk + s * d
                qd_t, qdd_t = newmark_update(trial, q, qd, qdd, dt, self.nm)
                rho_t = self.dyn.force(trial, qd_t, qdd_t, t1) + hist - Khat @ trial
                m = float(np.linalg.norm(Z.T @ rho_t))
                if np.isfinite(m):
                    if ctl.max_backtrack == 0 or m <= (1.0 - 1e-4 * s) * m0:
                        return trial, rho_t, (None if s == 1.0 else qk + d)
                    if m < m0 and (best is None or m < best[0]):
                        best = (m, trial, rho_t)
                s *= 0.5
        if best is None:
            # no trial point improves on the current one: give up this step
            return qk, None, None
        return best[1], best[2], qk + d


@dataclass
class Trajectory:
    """Reduced-state history on the uniform output grid."""

    t: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    qdd: np.ndarray
    lam: np.ndarray
    contact_count: np.ndarray
    impacts: np.ndarray
    bit_force: np.ndarray
    bit_torque: np.ndarray
    shock_log: ShockLog
    dyn: ReducedDynamics = field(repr=False)
    constraint_residual: float = 0.0
    n_steps: int = 0
    n_refined: int = 0
    total_iterations: int = 0

    def node_rows(self, node: int, fld: str) -> np.ndarray:
        from .fem import FIELDS
        if node < 0:
            node += self.dyn.mesh.n_nodes
        return self.dyn.nodal[node, FIELDS.index(fld), :]

    def history(self, fld: str, node: int, rate: int = 0) -> np.ndarray:
        arr = (self.q, self.qd, self.qdd)[rate]
        return arr @ self.node_rows(node, fld)

    def at_x(self, fld: str, x: float, rate: int = 0) -> np.ndarray:
        node = int(round(x / self.dyn.mesh.h))
        return self.history(fld, node, rate)

    @property
    def bit_velocity(self) -> np.ndarray:
        return self.history("u", -1, 1)

    @property
    def bit_omega(self) -> np.ndarray:
        return self.history("tx", -1, 1)

    def full_state(self, i: int) -> np.ndarray:
        return self.dyn.Phi @ self.q[i]

    def l2_norm(self) -> float:
        """``sqrt(int ||q(t)||^2 dt)`` by the trapezoid rule."""
        return math.sqrt(float(np.trapezoid(np.sum(self.q ** 2, axis=1), self.t)))


def initial_state(dyn: ReducedDynamics, q_static=None):
    """Static configuration plus the imposed axial and rotational rates."""
    red = dyn.red
    mesh = red.mesh
    op = dyn.model.operating
    Qd = np.zeros(mesh.n_dofs)
    Qd[mesh.field_dofs("u")] = op.V0
    Qd[mesh.field_dofs("tx")] = op.Omega
    qd = red.Phi.T @ (red.system.M @ Qd)
    q = np.zeros(red.n_red) if q_static is None else np.asarray(q_static, float).copy()
    return q, qd


def consistent_acceleration(stepper: ConstrainedStepper, q, qd, t: float = 0.0):
    """Solve the constrained equation of motion for q'' with B q'' = 0."""
    f = stepper.dyn.force(q, qd, np.zeros_like(q), t)
    rhs = f - stepper.C @ qd - stepper.K @ q
    n, m = stepper.M.shape[0], stepper.B.shape[0]
    A = np.zeros((n + m, n + m))
    A[:n, :n] = stepper.M
    A[:n, n:] = stepper.B.T
    A[n:, :n] = stepper.B
    sol = np.linalg.solve(A, np.concatenate([rhs, np.zeros(m)]))
    return sol[:n]


def simulate(dyn: ReducedDynamics, t_end: float, q0=None, qd0=None, t0: float = 0.0,
             newmark: NewmarkParams | None = None, controls: SolverControls | None = None,
             refine: bool = True, extra_damping: float = 0.0, callback=None) -> Trajectory:
    """Integrate from ``t0`` to ``t_end``; output lands on the nominal grid.

    ``q0``/``qd0`` default to rest plus the imposed rates (see
    :func:`initial_state`). When refinement is on, a nominal step whose wall
    contact set changes is redone with ``refine_factor`` sub-steps, and
    sub-stepping continues until ``refine_release`` consecutive sub-steps pass
    without a contact transition.
    """
    newmark = newmark or NewmarkParams()
    controls = controls or SolverControls()
    mesh = dyn.mesh
    dt_nom = newmark.dt_nominal or nominal_time_step(mesh.L, dyn.model.moduli.c_L)
    n_out = int(round((t_end - t0) / dt_nom))
    grid = t0 + dt_nom * np.arange(n_out + 1)
    stepper = ConstrainedStepper(dyn, newmark, controls, extra_damping)
    if q0 is None or qd0 is None:
        q_i, qd_i = initial_state(dyn, q0)
        q0 = q_i if q0 is None else q0
        qd0 = qd_i if qd0 is None else qd0
    q = stepper.project(np.asarray(q0, float), t0)
    qd = np.asarray(qd0, float).copy()
    qdd = consistent_acceleration(stepper, q, qd, t0)

    n = dyn.n
    Q = np.zeros((n_out + 1, n))
    QD, QDD = np.zeros_like(Q), np.zeros_like(Q)
    LAM = np.zeros((n_out + 1, 8))
    count = np.zeros(n_out + 1, dtype=int)
    impacts = np.zeros(n_out + 1, dtype=int)
    FBR, TBR = np.zeros(n_out + 1), np.zeros(n_out + 1)
    shock = ShockLog(mesh.node_coords)
    Q[0], QD[0], QDD[0] = q, qd, qdd

    def contact_mask(qv):
        v, w = dyn.nodal_lateral(qv)
        return v * v + w * w > dyn.gap ** 2

    mask = contact_mask(q) if dyn.contact else np.zeros(mesh.n_nodes, bool)
    if dyn.contact:
        shock.update(t0, mask)
        count[0] = mask.sum()
    _, info0 = dyn.force(q, qd, qdd, t0, want_info=True)
    FBR[0], TBR[0] = info0.F_br, info0.T_br
    refined = False
    quiet = 0
    max_res = float(np.max(np.abs(stepper.B @ q - stepper.h(t0))))
    n_steps = n_refined = total_it = 0
    min_dt = dt_nom * newmark.min_dt_factor
    sub_factor = newmark.refine_factor if refine else 1

    def advance(state, t, dt):
        """One accepted step of size dt, halving on non-convergence."""
        nonlocal total_it
        q_, qd_, qdd_ = state
        res = stepper.step(q_, qd_, qdd_, t, dt)
        total_it += res.iterations
        if res.converged:
            return [(t + dt, res)]
        if dt / 2 < min_dt:
            raise StepFailure(f"no convergence at t={t:.6g} s with dt={dt:.3g} s")
        first = advance(state, t, dt / 2)
        r1 = first[-1][1]
        return first + advance((r1.q, r1.qd, r1.qdd), t + dt / 2, dt / 2)

    for k in range(n_out):
        t = grid[k]
        state = (q, qd, qdd)
        if not refined:
            steps = advance(state, t, dt_nom)
            crossed = dyn.contact and refine and any(
                not np.array_equal(res.in_contact, mask) for _, res in steps)
            if crossed:
                refined = True
                quiet = 0
        if refined:
            steps = []
            cur = state
            prev_mask = mask
            tt = t
            for _ in range(sub_factor):
                for tn, res in advance(cur, tt, dt_nom / sub_factor):
                    steps.append((tn, res))
                    if dyn.contact:
                        if np.array_equal(res.in_contact, prev_mask):
                            quiet += 1
                        else:
                            quiet = 0
                            shock_t = tn
                            impacts[k + 1] += shock.update(shock_t, res.in_contact)
                        prev_mask = res.in_contact
                    cur = (res.q, res.qd, res.qdd)
                    tt = tn
            n_refined += 1
            if quiet >= newmark.refine_release:
                refined = False
        else:
            if dyn.contact:
                for tn, res in steps:
                    if not np.array_equal(res.in_contact, mask):
                        impacts[k + 1] += shock.update(tn, res.in_contact)
        n_steps += len(steps)
        res = steps[-1][1]
        q, qd, qdd = res.q, res.qd, res.qdd
        if dyn.contact:
            mask = res.in_contact
            count[k + 1] = mask.sum()
        Q[k + 1], QD[k + 1], QDD[k + 1], LAM[k + 1] = q, qd, qdd, res.lam
        _, info = dyn.force(q, qd, qdd, grid[k + 1], want_info=True)
        FBR[k + 1], TBR[k + 1] = info.F_br, info.T_br
        max_res = max(max_res, float(np.max(np.abs(stepper.B @ q - stepper.h(grid[k + 1])))))
        if callback is not None:
            callback(k + 1, grid[k + 1], q, qd)
    shock.close(grid[-1])
    return Trajectory(t=grid, q=Q, qd=QD, qdd=QDD, lam=LAM, contact_count=count, impacts=impacts,
                      bit_force=FBR, bit_torque=TBR, shock_log=shock, dyn=dyn,
                      constraint_residual=max_res, n_steps=n_steps, n_refined=n_refined,
                      total_iterations=total_it)


def lowest_constrained_frequency(stepper: ConstrainedStepper) -> float:
    """Smallest nonzero circular frequency of the linear system on ``B q = 0``."""
    Z = stepper._Z
    w2 = sla.eigvalsh(Z.T @ stepper.K @ Z, Z.T @ stepper.M @ Z)
    w2 = w2[w2 > 1e-9 * max(1.0, float(w2.max()))]
    return math.sqrt(float(w2.min()))


@dataclass
class StaticResult:
    q: np.ndarray
    t: float
    kinetic_ratio: float
    steps: int

    def full(self, dyn: ReducedDynamics) -> np.ndarray:
        return dyn.Phi @ self.q


def static_equilibrium(dyn: ReducedDynamics, damping: float | None = None, dt: float | None = None,
                       t_max: float = 60.0, ke_tol: float = 1e-8, newmark: NewmarkParams | None = None,
                       controls: SolverControls | None = None, kinetic_damping: bool = True) -> StaticResult:
    """Rest configuration under gravity and wall contact by dynamic relaxation.

    The string is released from the undeformed state with no imposed motion
    and integrated with extra mass-proportional damping (by default critical
    for the lowest constrained mode). With ``kinetic_damping`` the velocities
    are also zeroed each time the kinetic energy passes a local maximum, which
    drains the energy that stiff wall impacts feed into the coarse step. The
    run stops once a local kinetic-energy maximum (or, without kinetic
    damping, the current value) is below ``ke_tol`` times the overall peak.
    Wall friction is left out: it vanishes at rest and does not change the
    equilibrium.
    """
    contact = replace(dyn.model.contact, mu_FS=0.0)
    model = replace(dyn.model.with_operating(0.0, 0.0), contact=contact)
    sdyn = dyn.variant(model, bit=False)
    newmark = newmark or NewmarkParams()
    controls = controls or SolverControls()
    probe = ConstrainedStepper(sdyn, newmark, controls)
    if damping is None:
        damping = 2.0 * lowest_constrained_frequency(probe)
    stepper = ConstrainedStepper(sdyn, newmark, controls, extra_damping=damping)
    if dt is None:
        dt = nominal_time_step(dyn.mesh.L, model.moduli.c_L)
    min_dt = dt * newmark.min_dt_factor
    q = np.zeros(dyn.n)
    qd = np.zeros(dyn.n)
    qdd = consistent_acceleration(stepper, q, qd)
    M = stepper.M
    peak = 0.0
    prev_ke = 0.0
    t = 0.0
    steps = 0
    ratio = 1.0

    def advance(state, t, h):
        res = stepper.step(*state, t, h)
        if res.converged:
            return res
        if h / 2 < min_dt:
            raise StepFailure(f"static relaxation stalled at t={t:.6g} s")
        mid = advance(state, t, h / 2)
        return advance((mid.q, mid.qd, mid.qdd), t + h / 2, h / 2)

    while t < t_max:
        res = advance((q, qd, qdd), t, dt)
        q, qd, qdd = res.q, res.qd, res.qdd
        t += dt
        steps += 1
        ke = 0.5 * float(qd @ M @ qd)
        peak = max(peak, ke)
        if peak == 0.0:
            # nothing moves (no gravity): the undeformed state is the equilibrium
            if steps > 1:
                return StaticResult(q, t, 0.0, steps)
            continue
        if kinetic_damping:
            if ke < prev_ke:
                # a local maximum was passed: judge it, then restart from rest
                ratio = prev_ke / peak
                if ratio <= ke_tol:
                    break
                qd = np.zeros_like(qd)
                qdd = consistent_acceleration(stepper, q, qd, t)
                ke = 0.0
        else:
            ratio = ke / peak
            if ratio <= ke_tol:
                break
        prev_ke = ke
    else:
        raise StaticDivergence(f"kinetic energy ratio {ratio:.3e} above {ke_tol:g} after {t_max} s")
    log.info("static equilibrium reached at t=%.3f s after %d steps", t, steps)
    return StaticResult(q, t, ratio, steps)
