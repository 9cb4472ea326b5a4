"""Wall shock/friction forces at the nodes and the bit-rock interaction laws."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fem import Mesh
from .params import BitRockParams, ContactParams


def normal_force(delta, delta_dot, params: ContactParams):
    """Nonlinear spring plus Hunt-Crossley damping; zero where ``delta <= 0``."""
    delta = np.asarray(delta, dtype=float)
    f = (-params.k_FS1 * delta - params.k_FS2 * delta**3
         - params.c_FS * np.abs(delta)**3 * np.asarray(delta_dot, dtype=float))
    return np.where(delta > 0, f, 0.0)


def slip_sign(slip, v_reg: float = 0.0):
    """``sgn`` with ``sgn(0) = 0``; smoothed as ``tanh(slip / v_reg)`` when ``v_reg > 0``."""
    slip = np.asarray(slip, dtype=float)
    if v_reg > 0:
        return np.tanh(slip / v_reg)
    return np.sign(slip)


def friction_force_axial(F_n, u_dot, params: ContactParams, v_reg: float = 0.0):
    """Axial Coulomb friction opposing ``u_dot`` with magnitude ``mu |F_n|``."""
    return -params.mu_FS * np.abs(F_n) * slip_sign(u_dot, v_reg)


def friction_torque(F_n, theta_x_dot, R_bh: float, params: ContactParams, v_reg: float = 0.0):
    """Wall friction torque opposing the spin; smoothing acts on the wall slip speed."""
    return -params.mu_FS * np.abs(F_n) * R_bh * slip_sign(R_bh * np.asarray(theta_x_dot), v_reg)


def bit_force(u_dot_bit, params: BitRockParams):
    """Rock reaction on the bit: ``Gamma (exp(-alpha u') - 1)`` while advancing, else 0."""
    u = np.asarray(u_dot_bit, dtype=float)
    return np.where(u > 0, params.Gamma_BR * np.expm1(-params.alpha_BR * np.maximum(u, 0.0)), 0.0)


def regularized_sign(omega):
    """Smooth Coulomb regularization ``tanh(w) + 2w / (1 + w^2)``."""
    omega = np.asarray(omega, dtype=float)
    return np.tanh(omega) + 2.0 * omega / (1.0 + omega * omega)


def bit_torque(omega_bit, F_br, R_bh: float, params: BitRockParams):
    """Resisting torque on the bit.

    ``F_br`` is non-positive, so ``mu F_br R xi(w)`` opposes the rotation.
    """
    return params.mu_BR * np.asarray(F_br) * R_bh * regularized_sign(omega_bit)


@dataclass
class ContactState:
    r: np.ndarray
    delta: np.ndarray
    delta_dot: np.ndarray

    @property
    def in_contact(self) -> np.ndarray:
        return self.delta > 0


def contact_state(v, w, v_dot, w_dot, gap: float) -> ContactState:
    v, w = np.asarray(v, dtype=float), np.asarray(w, dtype=float)
    r = np.hypot(v, w)
    safe = np.where(r > 0, r, 1.0)
    r_dot = np.where(r > 0, (v * v_dot + w * w_dot) / safe, 0.0)
    return ContactState(r=r, delta=r - gap, delta_dot=r_dot)


@dataclass
class NodalContactForces:
    """Force/torque set at the nodes (arrays over all nodes, zero where free)."""

    axial: np.ndarray
    lateral_v: np.ndarray
    lateral_w: np.ndarray
    torque: np.ndarray
    normal: np.ndarray


def nodal_contact_forces(u_dot, v, w, v_dot, w_dot, tx_dot, gap: float, R_bh: float,
                         params: ContactParams, v_reg: float = 0.0) -> NodalContactForces:
    """Shock and friction loads for every node; inputs are per-node arrays."""
    v, w = np.asarray(v, dtype=float), np.asarray(w, dtype=float)
    shape = v.shape
    out = [np.zeros(shape) for _ in range(5)]
    r = np.hypot(v, w)
    act = np.flatnonzero(r > gap)
    if act.size:
        ra, va, wa = r[act], v[act], w[act]
        rd = (va * np.asarray(v_dot)[act] + wa * np.asarray(w_dot)[act]) / ra
        Fn = normal_force(ra - gap, rd, params)
        out[0][act] = friction_force_axial(Fn, np.asarray(u_dot)[act], params, v_reg)
        out[1][act] = Fn * va / ra
        out[2][act] = Fn * wa / ra
        out[3][act] = friction_torque(Fn, np.asarray(tx_dot)[act], R_bh, params, v_reg)
        out[4][act] = Fn
    return NodalContactForces(*out)


@dataclass(frozen=True)
class ShockEvent:
    node: int
    x: float
    t_entry: float
    t_exit: float


@dataclass
class ShockLog:
    """Entry/exit bookkeeping of wall contact, one open event per node at most."""

    node_coords: np.ndarray
    events: list = field(default_factory=list)
    _open: dict = field(default_factory=dict)

    def update(self, t: float, in_contact: np.ndarray) -> int:
        """Record transitions at time ``t``; returns the number of new entries."""
        opened = 0
        now = set(np.flatnonzero(in_contact).tolist())
        for node in now - set(self._open):
            self._open[node] = t
            opened += 1
        for node in set(self._open) - now:
            t0 = self._open.pop(node)
            self.events.append(ShockEvent(node, float(self.node_coords[node]), t0, t))
        return opened

    def close(self, t: float) -> None:
        for node, t0 in sorted(self._open.items()):
            if t > t0:
                self.events.append(ShockEvent(node, float(self.node_coords[node]), t0, t))
        self._open.clear()

    def as_array(self) -> np.ndarray:
        if not self.events:
            return np.zeros((0, 4))
        return np.array([[e.node, e.x, e.t_entry, e.t_exit] for e in self.events])


def contact_scan(q_full, qdot_full, mesh: Mesh, gap: float, R_bh: float, params: ContactParams,
                 log: ShockLog | None = None, t: float = 0.0):
    """Full-size contact force vector and an updated shock log."""
    Q = np.asarray(q_full).reshape(-1, 6)
    Qd = np.asarray(qdot_full).reshape(-1, 6)
    nf = nodal_contact_forces(Qd[:, 0], Q[:, 1], Q[:, 2], Qd[:, 1], Qd[:, 2], Qd[:, 3],
                              gap, R_bh, params)
    F = np.zeros_like(Q)
    F[:, 0] = nf.axial
    F[:, 1] = nf.lateral_v
    F[:, 2] = nf.lateral_w
    F[:, 3] = nf.torque
    if log is not None:
        log.update(t, Q[:, 1] ** 2 + Q[:, 2] ** 2 > gap * gap)
    return F.ravel(), log
