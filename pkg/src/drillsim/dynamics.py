"""Reduced-space force evaluation and its approximate tangent.

``ReducedDynamics`` binds a reduced system to a parameter set and evaluates
``f_r = Phi^T F(Phi q, Phi q', Phi q'')`` with all five force parts. It also
builds a cheap tangent used to precondition the fixed-point iteration of the
time stepper: the rotation-dependent shear stiffness (dominant for large
twist angles), the wall contact stiffness and the bit-rock damping.
"""

from __future__ import annotations

import copy

from dataclasses import dataclass

import numpy as np

from . import contact as ct
from .fem import N_GAUSS_NONLINEAR, ShapeFunctions, gauss_points
from .forces import ElementKernel
from .modal import ReducedSystem
from .params import BeamModel


@dataclass
class ForceInfo:
    in_contact: np.ndarray
    normal: np.ndarray
    F_br: float
    T_br: float


class ReducedDynamics:
    """Force model in reduced coordinates.

    Args:
        red: reduced system (basis and projected constant operators).
        model: parameters; ``model.bitrock`` and ``model.operating`` are used.
        contact: include wall shocks and friction.
        bit: include the bit-rock force and torque.
        geometric: include the geometric and inertial nonlinear forces.
        n_segments: number of strips used to sample the twist angle in the
            rotation tangent.
    """

    def __init__(self, red: ReducedSystem, model: BeamModel | None = None, contact: bool = True,
                 bit: bool = True, geometric: bool = True, consistent: bool = True,
                 n_segments: int = 50):
        self.red = red
        self.model = model or red.system.model
        self.mesh = red.mesh
        self.contact = contact
        self.bit = bit
        self.geometric = geometric
        # the normal-to-friction coupling makes the iteration matrix strongly
        # non-symmetric after deep trial penetrations; it is left out by default
        self.friction_coupling = False
        mesh = self.mesh
        self.kernel = ElementKernel(mesh, self.model, consistent=consistent)
        n = red.n_red
        self.n = n
        self.Phi = np.ascontiguousarray(red.Phi)
        self.PhiT = np.ascontiguousarray(red.Phi.T)
        self.nodal = self.Phi.reshape(mesh.n_nodes, 6, n)
        self.gap = self.model.geometry.gap
        self.R_bh = self.model.geometry.R_bh
        self.F_g_r = self.PhiT @ _gravity_vector(mesh, self.model)
        self._build_rotation_tables(n_segments)

    def variant(self, model: BeamModel | None = None, **flags) -> "ReducedDynamics":
        """Shallow copy sharing the precomputed tables.

        Only the operating point, bit-rock and contact parameters of ``model``
        may differ from the original; ``flags`` override contact/bit switches.
        """
        other = copy.copy(self)
        if model is not None:
            if model.material != self.model.material or model.geometry != self.model.geometry:
                raise ValueError("variant() cannot change material or geometry")
            other.model = model
        for key, value in flags.items():
            if key not in ("contact", "bit"):
                raise TypeError(f"unknown switch {key!r}")
            setattr(other, key, bool(value))
        return other

    # ------------------------------------------------------------------ forces
    def expand3(self, q, qd, qdd):
        Q = self.Phi @ np.column_stack([q, qd, qdd])
        return Q[:, 0], Q[:, 1], Q[:, 2]

    def force(self, q, qd, qdd, t: float = 0.0, want_info: bool = False):
        Q, Qd, Qdd = self.expand3(q, qd, qdd)
        F = np.zeros(self.mesh.n_dofs)
        if self.geometric:
            F += self.kernel.geometric(Q) + self.kernel.inertial(Q, Qd, Qdd)
        in_contact = None
        normal = None
        Fbr = Tbr = 0.0
        if self.contact:
            Qn = Q.reshape(-1, 6)
            Qdn = Qd.reshape(-1, 6)
            nf = ct.nodal_contact_forces(Qdn[:, 0], Qn[:, 1], Qn[:, 2], Qdn[:, 1], Qdn[:, 2], Qdn[:, 3],
                                         self.gap, self.R_bh, self.model.contact,
                                         self.model.contact.v_reg)
            Fn = F.reshape(-1, 6)
            Fn[:, 0] += nf.axial
            Fn[:, 1] += nf.lateral_v
            Fn[:, 2] += nf.lateral_w
            Fn[:, 3] += nf.torque
            in_contact = nf.normal < 0
            normal = nf.normal
        if self.bit:
            u_dot, omega = Qd[-6], Qd[-3]
            Fbr = float(ct.bit_force(u_dot, self.model.bitrock))
            Tbr = float(ct.bit_torque(omega, Fbr, self.R_bh, self.model.bitrock))
            F[-6] += Fbr
            F[-3] += Tbr
        f = self.PhiT @ F + self.F_g_r
        if want_info:
            if in_contact is None:
                in_contact = np.zeros(self.mesh.n_nodes, dtype=bool)
                normal = np.zeros(self.mesh.n_nodes)
            return f, ForceInfo(in_contact, normal, Fbr, Tbr)
        return f

    def nodal_lateral(self, q):
        """Nodal (v, w) for reduced state(s) q."""
        v = self.nodal[:, 1, :] @ q
        w = self.nodal[:, 2, :] @ q
        return v, w

    # ----------------------------------------------------------------- tangent
    def _build_rotation_tables(self, n_segments: int):
        """Per-strip Gram matrices of the rotation-coupled shear terms."""
        mesh = self.mesh
        shapes = ShapeFunctions.for_model(mesh, self.model)
        xi, wq = gauss_points(N_GAUSS_NONLINEAR)
        vals, ders = shapes.values(xi), shapes.derivs(xi)
        ne = mesh.n_elem
        n_seg = max(1, min(n_segments, ne))
        seg_of = np.minimum((np.arange(ne) * n_seg) // ne, n_seg - 1)
        dm = mesh.dof_map
        A = np.zeros((n_seg, self.n, self.n))
        Bm = np.zeros((n_seg, self.n, self.n))
        Phi = self.Phi
        # point rows (n_elem, n_q, n_red) for v', w', theta_y, theta_z
        Pe = Phi[dm]  # (n_elem, 12, n_red)
        pV = np.einsum("qi,ein->eqn", ders["v"], Pe)
        pW = np.einsum("qi,ein->eqn", ders["w"], Pe)
        pY = np.einsum("qi,ein->eqn", vals["ty"], Pe)
        pZ = np.einsum("qi,ein->eqn", vals["tz"], Pe)
        w = wq * mesh.h
        for s in range(n_seg):
            el = seg_of == s
            a = lambda p: p[el].reshape(-1, self.n)
            ww = np.tile(w, el.sum())
            V, W, Y, Z = a(pV), a(pW), a(pY), a(pZ)
            vz = (V * ww[:, None]).T @ Z
            wy = (W * ww[:, None]).T @ Y
            vy = (V * ww[:, None]).T @ Y
            wz = (W * ww[:, None]).T @ Z
            A[s] = vz + vz.T - wy - wy.T
            Bm[s] = vy + vy.T + wz + wz.T
        self._rotA = A.reshape(n_seg, -1)
        self._rotB = Bm.reshape(n_seg, -1)
        centers = (np.arange(n_seg) + 0.5) / n_seg * mesh.L
        # theta_x at strip centres by linear interpolation of nodal twist
        x = mesh.node_coords
        idx = np.clip(np.searchsorted(x, centers) - 1, 0, mesh.n_elem - 1)
        frac = (centers - x[idx]) / mesh.h
        tx_rows = self.nodal[:, 3, :]
        self._tx_centres = (1 - frac)[:, None] * tx_rows[idx] + frac[:, None] * tx_rows[idx + 1]
        self._kGA = self.kernel.consts.kGA

    def rotation_tangent(self, q) -> np.ndarray:
        """d F_SE / d q from the twist-dependent linear shear coupling."""
        if not self.geometric:
            return np.zeros((self.n, self.n))
        th = self._tx_centres @ q
        J = -(self._kGA) * ((1.0 - np.cos(th)) @ self._rotA - np.sin(th) @ self._rotB)
        return J.reshape(self.n, self.n)

    def contact_gaps(self, q, qd):
        """Per-node indentation and its rate."""
        v, w = self.nodal_lateral(q)
        vd, wd = self.nodal_lateral(qd)
        st = ct.contact_state(v, w, vd, wd, self.gap)
        return st.delta, st.delta_dot

    def contact_tangent(self, q, qd, prev=None, a1: float = 0.0) -> np.ndarray:
        """d F_FS / d q (displacement part) over nodes in or just leaving contact.

        ``prev`` = (delta, F_n) per node from the previous iterate. Nodes whose
        contact status flipped use the secant slope between the two iterates,
        which keeps the iteration from cycling across the kink at delta = 0.
        """
        n = self.n
        if not self.contact:
            return np.zeros((n, n))
        p = self.model.contact
        v, w = self.nodal_lateral(q)
        r = np.hypot(v, w)
        delta = r - self.gap
        flip = np.zeros_like(delta, dtype=bool)
        if prev is not None:
            flip = (delta > 0) != (prev[0] > 0)
        act = np.flatnonzero((delta > 0) | flip)
        if act.size == 0:
            return np.zeros((n, n))
        vd = self.nodal[act, 1, :] @ qd
        wd = self.nodal[act, 2, :] @ qd
        ud = self.nodal[act, 0, :] @ qd
        txd = self.nodal[act, 3, :] @ qd
        ra, va, wa, da = r[act], v[act], w[act], delta[act]
        ddot = (va * vd + wa * wd) / ra
        Fn = ct.normal_force(da, ddot, p)
        dFn = np.where(da > 0, -p.k_FS1 - 3 * p.k_FS2 * da**2 - 3 * p.c_FS * da**2 * ddot, 0.0)
        if prev is not None:
            fl = flip[act]
            if fl.any():
                dd = da[fl] - prev[0][act][fl]
                dFn[fl] = np.where(dd != 0, (Fn[fl] - prev[1][act][fl]) / np.where(dd != 0, dd, 1.0), 0.0)
        c, s = va / ra, wa / ra
        j = np.zeros((act.size, 4, 4))  # rows/cols: u, v, w, tx
        j[:, 1, 1] = dFn * c * c + Fn * s * s / ra
        j[:, 1, 2] = (dFn - Fn / ra) * c * s
        j[:, 2, 1] = j[:, 1, 2]
        j[:, 2, 2] = dFn * s * s + Fn * c * c / ra
        R = self.R_bh
        sg_u = ct.slip_sign(ud, p.v_reg)
        sg_t = ct.slip_sign(R * txd, p.v_reg)
        if self.friction_coupling:
            j[:, 0, 1] = p.mu_FS * sg_u * dFn * c
            j[:, 0, 2] = p.mu_FS * sg_u * dFn * s
            j[:, 3, 1] = p.mu_FS * R * sg_t * dFn * c
            j[:, 3, 2] = p.mu_FS * R * sg_t * dFn * s
        if p.v_reg > 0 and a1 > 0:
            # slope of the smoothed friction sign w.r.t. slip speed, through dq'/dq = a1
            dsu = (1.0 - sg_u**2) / p.v_reg
            dst = R * (1.0 - sg_t**2) / p.v_reg
            j[:, 0, 0] = -a1 * p.mu_FS * np.abs(Fn) * dsu
            j[:, 3, 3] = -a1 * p.mu_FS * np.abs(Fn) * R * dst
        rows = self.nodal[act][:, [0, 1, 2, 3], :]  # (n_act, 4, n)
        tmp = np.matmul(j, rows)
        return rows.reshape(-1, n).T @ tmp.reshape(-1, n)

    def contact_normals(self, q, qd):
        delta, ddot = self.contact_gaps(q, qd)
        return delta, ct.normal_force(delta, ddot, self.model.contact)

    def contact_memory(self, q, qd):
        """Per-node (delta, F_n) remembered between iterates for the secant slopes."""
        return self.contact_normals(q, qd)

    def bit_tangent(self, qd, a1: float, prev=None) -> np.ndarray:
        """d F_BR / d q through the Newmark velocity update (factor ``a1``).

        ``prev`` = (u_dot_bit, F_br) of the previous iterate; across the kink at
        zero bit velocity the secant slope replaces the one-sided derivative.
        """
        n = self.n
        if not self.bit:
            return np.zeros((n, n))
        p = self.model.bitrock
        pu, pt = self.nodal[-1, 0, :], self.nodal[-1, 3, :]
        ud, om = pu @ qd, pt @ qd
        Fbr = float(ct.bit_force(ud, p))
        dF = -p.Gamma_BR * p.alpha_BR * np.exp(-p.alpha_BR * ud) if ud > 0 else 0.0
        if prev is not None and (prev[0] > 0) != (ud > 0) and ud != prev[0]:
            dF = (Fbr - prev[1]) / (ud - prev[0])
        xi = float(ct.regularized_sign(om))
        dxi = 1.0 - np.tanh(om) ** 2 + 2.0 * (1.0 - om * om) / (1.0 + om * om) ** 2
        kR = p.mu_BR * self.R_bh
        return a1 * (dF * np.outer(pu, pu) + kR * xi * dF * np.outer(pt, pu)
                     + kR * Fbr * dxi * np.outer(pt, pt))

    def bit_state(self, qd):
        ud = self.nodal[-1, 0, :] @ qd
        return ud, float(ct.bit_force(ud, self.model.bitrock))

    def fd_tangent(self, q, qd, qdd, coeffs, eps: float = 1e-7) -> np.ndarray:
        """Finite-difference tangent of the full reduced force along the Newmark path.

        ``coeffs`` = (a0, a1) so that dq'' = a0 dq and dq' = a1 dq.
        """
        a0, a1 = coeffs
        f0 = self.force(q, qd, qdd)
        J = np.empty((self.n, self.n))
        scale = eps * max(1.0, float(np.max(np.abs(q))))
        for i in range(self.n):
            e = np.zeros(self.n)
            e[i] = scale
            J[:, i] = (self.force(q + e, qd + a1 * e, qdd + a0 * e) - f0) / scale
        return J


def _gravity_vector(mesh, model):
    from .fem import element_matrices
    shapes = ShapeFunctions.for_model(mesh, model)
    _, _, fe = element_matrices(shapes, model)
    F = np.zeros(mesh.n_dofs)
    np.add.at(F, mesh.dof_map.ravel(), np.tile(fe, mesh.n_elem))
    return F
