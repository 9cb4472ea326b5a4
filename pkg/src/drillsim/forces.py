"""Configuration-dependent force vector at full-model level.

Geometric (F_SE) and inertial (F_KE) nonlinear forces are integrated with a
6-point Gauss rule on every element. Everything here is vectorized over
elements and quadrature points, and accepts a leading batch axis so the same
code evaluates many states at once (used for finite-difference tangents).

Sign convention: the force sits on the right-hand side of
``M q'' + C q' + K q = F``. With the Gamma coefficients equal to the nonlinear
part of the strain-energy gradient, the geometric force is ``-int(psi . Gamma)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from .fem import FIELDS, N_GAUSS_NONLINEAR, AssembledSystem, Mesh, ShapeFunctions, gauss_points
from .params import BeamModel

# order of the Gamma test functions: (field, derivative?)
GAMMA_TESTS = (("tx", False), ("ty", False), ("tz", False),
               ("u", True), ("v", True), ("w", True),
               ("tx", True), ("ty", True), ("tz", True))

STATE_FIELDS = ("u_p", "v_p", "w_p", "tx", "tx_p", "ty", "ty_p", "tz", "tz_p")


@dataclass
class FieldState:
    """Field values and x-derivatives at evaluation points (arrays broadcast together)."""

    u_p: np.ndarray
    v_p: np.ndarray
    w_p: np.ndarray
    tx: np.ndarray
    tx_p: np.ndarray
    ty: np.ndarray
    ty_p: np.ndarray
    tz: np.ndarray
    tz_p: np.ndarray

    @classmethod
    def zeros(cls, shape=()) -> "FieldState":
        return cls(*(np.zeros(shape) for _ in STATE_FIELDS))

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "FieldState":
        """Build from an array whose last axis holds the nine fields in STATE_FIELDS order."""
        arr = np.asarray(arr, dtype=float)
        return cls(*(arr[..., i] for i in range(len(STATE_FIELDS))))


@dataclass(frozen=True)
class StiffnessConstants:
    EA: float
    EI: float
    EI6: float
    kGA: float
    kGI: float

    @classmethod
    def from_model(cls, model: BeamModel) -> "StiffnessConstants":
        mat, sect, mod = model.material, model.section, model.moduli
        kG = mat.kappa_s * mod.G
        return cls(EA=mat.E * sect.A, EI=mat.E * sect.I4, EI6=mat.E * sect.I6,
                   kGA=kG * sect.A, kGI=kG * sect.I4)


def gamma_coefficients(s: FieldState, model: BeamModel | StiffnessConstants,
                       consistent: bool = True) -> np.ndarray:
    """The nine geometric-nonlinearity coefficients; last axis has length 9.

    With ``consistent=True`` (default) the coefficients are exactly the
    nonlinear part of the strain-energy gradient. ``consistent=False`` returns
    the uncorrected closed forms, which differ in three shear couplings:
    Gamma5 and Gamma6 carry an extra ``(1 + u')`` factor on their linear shear
    terms and Gamma7 uses ``kappa G A`` in place of ``kappa G I4``.
    """
    k = model if isinstance(model, StiffnessConstants) else StiffnessConstants.from_model(model)
    a, V, W = s.u_p, s.v_p, s.w_p
    X, Y, Yp, Z, Zp = s.tx_p, s.ty, s.ty_p, s.tz, s.tz_p
    S, C = np.sin(s.tx), np.cos(s.tx)
    op = 1.0 + a
    bend2 = Yp * Yp + Zp * Zp
    rot2 = Y * Y + Z * Z
    axial = a + 0.5 * (a * a + V * V + W * W)
    vYp_wZp = V * Yp + W * Zp
    vZp_wYp = V * Zp - W * Yp

    g1 = (k.EI * op * X * (vYp_wZp * S + vZp_wYp * C)
          + k.kGA * op * ((Z * V - Y * W) * S - (Y * V + Z * W) * C))
    g2 = (k.kGI * (Y * bend2 - X * Zp) + k.kGA * (-W + a * Y * (2.0 + a))
          - k.kGA * op * (V * S - W * C))
    g3 = (k.kGI * (Z * bend2 + X * Yp) + k.kGA * (V + a * Z * (2.0 + a))
          - k.kGA * op * (W * S + V * C))
    g4 = (k.EA * (0.5 * op * (V * V + W * W) + 0.5 * a * a * (3.0 + a))
          + k.EI * (S * vZp_wYp - C * vYp_wZp) * X
          + k.EI * op * (X * X + 1.5 * bend2)
          + k.kGA * (C * (Y * W - Z * V) - S * (Y * V + Z * W))
          + k.kGA * op * rot2)
    twist = 2.0 * X * X + 0.5 * bend2
    g5 = k.EA * axial * V + k.EI * twist * V + k.EI * op * (Zp * S - Yp * C) * X
    g6 = k.EA * axial * W + k.EI * twist * W + k.EI * op * (-Yp * S - Zp * C) * X
    if consistent:
        g5 = g5 + k.kGA * (Z - op * (Y * S + Z * C))
        g6 = g6 + k.kGA * (-Y + op * (Y * C - Z * S))
        k7 = k.kGI
    else:
        g5 = g5 + k.kGA * op * (Z - Y * S - Z * C)
        g6 = g6 + k.kGA * op * (-Y + Y * C - Z * S)
        k7 = k.kGA
    g7 = (k.EI * (a * a + 2.0 * (a + V * V + W * W)) * X
          + k.EI * op * (vZp_wYp * S - vYp_wZp * C)
          + k.EI6 * (4.0 * X * X + 2.0 * bend2) * X
          + k7 * (Z * Yp - Y * Zp))
    lead = k.EI * (3.0 * a + 0.5 * (3.0 * a * a + V * V + W * W))
    shear_bend = k.EI6 * (2.0 * X * X + 1.5 * bend2)
    g8 = lead * Yp + k.EI * op * (-W * S - V * C) * X + shear_bend * Yp + k.kGI * (Z * X + Yp * rot2)
    g9 = lead * Zp + k.EI * op * (V * S - W * C) * X + shear_bend * Zp + k.kGI * (-Y * X + Zp * rot2)
    return np.stack(np.broadcast_arrays(g1, g2, g3, g4, g5, g6, g7, g8, g9), axis=-1)


@numba.njit(cache=True)
def _inertial_fused(th, c):  # pragma: no cover - compiled
    """Pointwise gyroscopic terms.

    ``th`` has shape (3, n_blocks, 3, n_q): (value, rate, acceleration) of
    (theta_x, theta_y, theta_z). Returns (n_blocks, 3, n_q) for x, y, z.
    """
    _, nb, _, nq = th.shape
    out = np.empty((nb, 3, nq))
    for b in range(nb):
        for q in range(nq):
            ty = th[0, b, 1, q]
            txd = th[1, b, 0, q]
            tyd = th[1, b, 1, q]
            tzd = th[1, b, 2, q]
            txdd = th[2, b, 0, q]
            tzdd = th[2, b, 2, q]
            out[b, 0, q] = -c * (ty * tzdd + tyd * tzd)
            out[b, 1, q] = c * (ty * tzd * tzd + txd * tzd)
            out[b, 2, q] = -c * (ty * txdd + ty * ty * tzdd + txd * tyd + 2.0 * ty * tyd * tzd)
    return out


@numba.njit(cache=True, fastmath=False)
def _gamma_fused(vals, EA, EI, EI6, kGA, kGI, consistent):  # pragma: no cover - compiled
    """Fused evaluation of the nine coefficients.

    ``vals`` has shape (n_blocks, 9, n_q) in STATE_FIELDS order; the result has
    the same shape with the coefficients in place of the fields.
    """
    nb, _, nq = vals.shape
    out = np.empty_like(vals)
    k7 = kGI if consistent else kGA
    for b in range(nb):
        for q in range(nq):
            a = vals[b, 0, q]
            V = vals[b, 1, q]
            W = vals[b, 2, q]
            tx = vals[b, 3, q]
            X = vals[b, 4, q]
            Y = vals[b, 5, q]
            Yp = vals[b, 6, q]
            Z = vals[b, 7, q]
            Zp = vals[b, 8, q]
            S = np.sin(tx)
            C = np.cos(tx)
            op = 1.0 + a
            bend2 = Yp * Yp + Zp * Zp
            rot2 = Y * Y + Z * Z
            axial = a + 0.5 * (a * a + V * V + W * W)
            p1 = V * Yp + W * Zp
            p2 = V * Zp - W * Yp
            out[b, 0, q] = (EI * op * X * (p1 * S + p2 * C)
                            + kGA * op * ((Z * V - Y * W) * S - (Y * V + Z * W) * C))
            out[b, 1, q] = (kGI * (Y * bend2 - X * Zp) + kGA * (-W + a * Y * (2.0 + a))
                            - kGA * op * (V * S - W * C))
            out[b, 2, q] = (kGI * (Z * bend2 + X * Yp) + kGA * (V + a * Z * (2.0 + a))
                            - kGA * op * (W * S + V * C))
            out[b, 3, q] = (EA * (0.5 * op * (V * V + W * W) + 0.5 * a * a * (3.0 + a))
                            + EI * (S * p2 - C * p1) * X + EI * op * (X * X + 1.5 * bend2)
                            + kGA * (C * (Y * W - Z * V) - S * (Y * V + Z * W)) + kGA * op * rot2)
            twist = 2.0 * X * X + 0.5 * bend2
            g5 = EA * axial * V + EI * twist * V + EI * op * (Zp * S - Yp * C) * X
            g6 = EA * axial * W + EI * twist * W + EI * op * (-Yp * S - Zp * C) * X
            if consistent:
                g5 += kGA * (Z - op * (Y * S + Z * C))
                g6 += kGA * (-Y + op * (Y * C - Z * S))
            else:
                g5 += kGA * op * (Z - Y * S - Z * C)
                g6 += kGA * op * (-Y + Y * C - Z * S)
            out[b, 4, q] = g5
            out[b, 5, q] = g6
            out[b, 6, q] = (EI * (a * a + 2.0 * (a + V * V + W * W)) * X + EI * op * (p2 * S - p1 * C)
                            + EI6 * (4.0 * X * X + 2.0 * bend2) * X + k7 * (Z * Yp - Y * Zp))
            lead = EI * (3.0 * a + 0.5 * (3.0 * a * a + V * V + W * W))
            sb = EI6 * (2.0 * X * X + 1.5 * bend2)
            out[b, 7, q] = lead * Yp + EI * op * (-W * S - V * C) * X + sb * Yp + kGI * (Z * X + Yp * rot2)
            out[b, 8, q] = lead * Zp + EI * op * (V * S - W * C) * X + sb * Zp + kGI * (-Y * X + Zp * rot2)
    return out


class ElementKernel:
    """Quadrature tables shared by every element of a uniform mesh.

    Nodal vectors may carry a leading batch axis: shape (..., N_dofs).
    """

    def __init__(self, mesh: Mesh, model: BeamModel, n_gauss: int = N_GAUSS_NONLINEAR,
                 consistent: bool = True):
        self.mesh = mesh
        self.model = model
        self.consistent = consistent
        self.consts = StiffnessConstants.from_model(model)
        shapes = ShapeFunctions.for_model(mesh, model)
        xi, w = gauss_points(n_gauss)
        self.weights = w * mesh.h
        vals, ders = shapes.values(xi), shapes.derivs(xi)
        # (12, n_q) interpolation tables
        self.val = {f: vals[f].T.copy() for f in FIELDS}
        self.der = {f: ders[f].T.copy() for f in FIELDS}
        # Gamma test-function stack: (9 * n_q, 12), row index = k * n_q + q
        tests = [ders[f] if d else vals[f] for f, d in GAMMA_TESTS]
        self.gamma_tests = np.concatenate([t * self.weights[:, None] for t in tests], axis=0)
        # state interpolation stack: (12, 9 * n_q) in STATE_FIELDS order
        cols = [self.der["u"], self.der["v"], self.der["w"], self.val["tx"], self.der["tx"],
                self.val["ty"], self.der["ty"], self.val["tz"], self.der["tz"]]
        self.state_interp = np.concatenate(cols, axis=1)
        self.theta_interp = np.concatenate([self.val["tx"], self.val["ty"], self.val["tz"]], axis=1)
        self.theta_tests = np.concatenate(
            [vals[f] * self.weights[:, None] for f in ("tx", "ty", "tz")], axis=0)
        self.n_q = len(xi)
        self.points = (mesh.node_coords[:-1, None] + mesh.h * xi[None, :])

    def gather(self, Q: np.ndarray) -> np.ndarray:
        """Element DOF arrays, shape (..., n_elem, 12)."""
        Q = np.asarray(Q, dtype=float)
        lead = Q.shape[:-1]
        nodal = Q.reshape(lead + (self.mesh.n_nodes, 6))
        return np.concatenate([nodal[..., :-1, :], nodal[..., 1:, :]], axis=-1)

    def scatter(self, Fe: np.ndarray) -> np.ndarray:
        lead = Fe.shape[:-2]
        F = np.zeros(lead + (self.mesh.n_nodes, 6))
        F[..., :-1, :] += Fe[..., :6]
        F[..., 1:, :] += Fe[..., 6:]
        return F.reshape(lead + (self.mesh.n_dofs,))

    def field_state(self, Q: np.ndarray) -> FieldState:
        """Strain-relevant fields at all quadrature points, arrays (..., n_elem, n_q)."""
        vals = self.gather(Q) @ self.state_interp
        n = self.n_q
        return FieldState(*(vals[..., i * n:(i + 1) * n] for i in range(len(STATE_FIELDS))))

    def thetas(self, Q: np.ndarray):
        vals = self.gather(Q) @ self.theta_interp
        n = self.n_q
        return vals[..., :n], vals[..., n:2 * n], vals[..., 2 * n:]

    def geometric(self, Q: np.ndarray) -> np.ndarray:
        vals = self.gather(Q) @ self.state_interp  # (..., n_elem, 9 * n_q)
        lead = vals.shape[:-1]
        k = self.consts
        gam = _gamma_fused(np.ascontiguousarray(vals.reshape(-1, 9, self.n_q)),
                           k.EA, k.EI, k.EI6, k.kGA, k.kGI, self.consistent)
        return -self.scatter(gam.reshape(lead + (-1,)) @ self.gamma_tests)

    def geometric_reference(self, Q: np.ndarray) -> np.ndarray:
        """Same as :meth:`geometric` through the plain numpy coefficient path."""
        gam = gamma_coefficients(self.field_state(Q), self.consts, self.consistent)
        gam = np.swapaxes(gam, -1, -2).reshape(gam.shape[:-2] + (-1,))
        return -self.scatter(gam @ self.gamma_tests)

    def inertial(self, Q: np.ndarray, Qd: np.ndarray, Qdd: np.ndarray) -> np.ndarray:
        mat, sect = self.model.material, self.model.section
        c = 2.0 * mat.rho * sect.I4
        Q, Qd, Qdd = np.broadcast_arrays(np.asarray(Q, float), np.asarray(Qd, float), np.asarray(Qdd, float))
        th = self.gather(np.stack([Q, Qd, Qdd])) @ self.theta_interp
        lead = th.shape[1:-1]
        th = np.ascontiguousarray(th.reshape(3, -1, 3, self.n_q))
        stack = _inertial_fused(th, c).reshape(lead + (-1,))
        return self.scatter(stack @ self.theta_tests)


def force_geometric(q_full, kernel: ElementKernel) -> np.ndarray:
    return kernel.geometric(q_full)


def force_inertial(q_full, qdot_full, qddot_full, kernel: ElementKernel) -> np.ndarray:
    return kernel.inertial(q_full, qdot_full, qddot_full)


def total_force(q, qdot, qddot, system: AssembledSystem, kernel: ElementKernel,
                contact=None, bit=None, t: float = 0.0) -> np.ndarray:
    """F_KE + F_SE + F_FS + F_BR + F_G for full nodal vectors.

    ``contact`` and ``bit`` are callables from :mod:`drillsim.contact`
    returning full-size force vectors; either may be None.
    """
    F = system.F_g + kernel.geometric(q) + kernel.inertial(q, qdot, qddot)
    if contact is not None:
        F = F + contact(q, qdot, t)
    if bit is not None:
        F = F + bit(q, qdot, t)
    return F
