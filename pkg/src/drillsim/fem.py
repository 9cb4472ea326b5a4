"""Finite element mesh, shape functions and constant operators.

Each node carries six DOFs in the order (u, v, w, theta_x, theta_y, theta_z).
Axial displacement and twist use affine interpolation. The two bending planes
use the interdependent interpolation of a shear-deformable beam: displacement
and rotation are built from one cubic and its companion quadratic, with the
shear parameter ``phi = 12 E I / (kappa_s G A h^2)`` blended in so the element
reproduces the exact static solution and does not lock.

Plane x-y (v, theta_z) follows ``theta_z ~ v'``; plane x-z (w, theta_y) follows
``theta_y ~ -w'``. The w-family therefore enters with the sign of theta_y
flipped.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .params import BeamModel, OperatingPoint, ParameterError

DOFS_PER_NODE = 6
FIELDS = ("u", "v", "w", "tx", "ty", "tz")
N_GAUSS_LINEAR = 4
N_GAUSS_NONLINEAR = 6


def gauss_points(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre abscissae and weights mapped onto [0, 1]."""
    x, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (x + 1.0), 0.5 * w


@dataclass(frozen=True)
class Mesh:
    L: float
    n_elem: int

    def __post_init__(self):
        if self.n_elem < 2:
            raise ParameterError("mesh needs at least 2 elements")

    @property
    def n_nodes(self) -> int:
        return self.n_elem + 1

    @property
    def n_dofs(self) -> int:
        return DOFS_PER_NODE * self.n_nodes

    @property
    def h(self) -> float:
        return self.L / self.n_elem

    @property
    def node_coords(self) -> np.ndarray:
        return np.linspace(0.0, self.L, self.n_nodes)

    @property
    def dof_map(self) -> np.ndarray:
        base = DOFS_PER_NODE * np.arange(self.n_elem)[:, None]
        return base + np.arange(2 * DOFS_PER_NODE)[None, :]

    def dof(self, node: int, field: str) -> int:
        """Global index of ``field`` at ``node`` (negative nodes count from the end)."""
        if node < 0:
            node += self.n_nodes
        return DOFS_PER_NODE * node + FIELDS.index(field)

    def field_dofs(self, field: str) -> np.ndarray:
        return DOFS_PER_NODE * np.arange(self.n_nodes) + FIELDS.index(field)


def build_mesh(L: float, n_elem: int) -> Mesh:
    return Mesh(L=float(L), n_elem=int(n_elem))


class ShapeFunctions:
    """Element interpolation rows for the six fields and their x-derivatives.

    ``values(xi)`` and ``derivs(xi)`` return dicts mapping each field name to an
    array of shape (len(xi), 12) that multiplies the element DOF vector.
    """

    def __init__(self, h: float, phi: float):
        self.h = float(h)
        self.phi = float(phi)

    @classmethod
    def for_model(cls, mesh: Mesh, model: BeamModel) -> "ShapeFunctions":
        sect, mod = model.section, model.moduli
        phi = 12.0 * model.material.E * sect.I4 / (model.material.kappa_s * mod.G * sect.A * mesh.h**2)
        return cls(mesh.h, phi)

    def _hermite(self, xi):
        """Cubic displacement rows Hv and companion rotation rows Ht (4 columns each)."""
        h, p = self.h, self.phi
        s = 1.0 / (1.0 + p)
        x2, x3 = xi * xi, xi * xi * xi
        Hv = s * np.stack([
            2 * x3 - 3 * x2 - p * xi + 1 + p,
            h * (x3 - (2 + p / 2) * x2 + (1 + p / 2) * xi),
            -2 * x3 + 3 * x2 + p * xi,
            h * (x3 - (1 - p / 2) * x2 - (p / 2) * xi),
        ], axis=-1)
        dHv = s / h * np.stack([
            6 * x2 - 6 * xi - p,
            h * (3 * x2 - (4 + p) * xi + 1 + p / 2),
            -6 * x2 + 6 * xi + p,
            h * (3 * x2 - (2 - p) * xi - p / 2),
        ], axis=-1)
        Ht = s * np.stack([
            6.0 / h * (x2 - xi),
            3 * x2 - (4 + p) * xi + 1 + p,
            -6.0 / h * (x2 - xi),
            3 * x2 - (2 - p) * xi,
        ], axis=-1)
        dHt = s / h * np.stack([
            6.0 / h * (2 * xi - 1),
            6 * xi - (4 + p),
            -6.0 / h * (2 * xi - 1),
            6 * xi - (2 - p),
        ], axis=-1)
        return Hv, dHv, Ht, dHt

    def _rows(self, xi, deriv: bool) -> dict:
        xi = np.atleast_1d(np.asarray(xi, dtype=float))
        n = xi.size
        out = {f: np.zeros((n, 12)) for f in FIELDS}
        if deriv:
            lin = np.stack([-np.ones(n), np.ones(n)], axis=-1) / self.h
        else:
            lin = np.stack([1.0 - xi, xi], axis=-1)
        Hv, dHv, Ht, dHt = self._hermite(xi)
        Hd, Hr = (dHv, dHt) if deriv else (Hv, Ht)
        out["u"][:, [0, 6]] = lin
        out["tx"][:, [3, 9]] = lin
        vz = [1, 5, 7, 11]
        out["v"][:, vz] = Hd
        out["tz"][:, vz] = Hr
        wy = [2, 4, 8, 10]
        flip = np.array([1.0, -1.0, 1.0, -1.0])
        out["w"][:, wy] = Hd * flip
        out["ty"][:, wy] = -Hr * flip
        return out

    def values(self, xi) -> dict:
        return self._rows(xi, deriv=False)

    def derivs(self, xi) -> dict:
        return self._rows(xi, deriv=True)


def element_matrices(shapes: ShapeFunctions, model: BeamModel, n_gauss: int = N_GAUSS_LINEAR):
    """Element mass, mass-like (for damping) and stiffness matrices, 12 x 12."""
    mat, sect, mod = model.material, model.section, model.moduli
    xi, wq = gauss_points(n_gauss)
    wq = wq * shapes.h
    N, dN = shapes.values(xi), shapes.derivs(xi)

    def gram(a, b, coef):
        return coef * np.einsum("q,qi,qj->ij", wq, a, b)

    rA, rI = mat.rho * sect.A, mat.rho * sect.I4
    Me = (gram(N["u"], N["u"], rA) + gram(N["v"], N["v"], rA) + gram(N["w"], N["w"], rA)
          + gram(N["tx"], N["tx"], 2 * rI) + gram(N["ty"], N["ty"], rI) + gram(N["tz"], N["tz"], rI))
    kGA = mat.kappa_s * mod.G * sect.A
    EI = mat.E * sect.I4
    shear_y = N["ty"] + dN["w"]
    shear_z = N["tz"] - dN["v"]
    Ke = (gram(dN["u"], dN["u"], mat.E * sect.A)
          + gram(dN["ty"], dN["ty"], EI) + gram(dN["tz"], dN["tz"], EI)
          + gram(dN["tx"], dN["tx"], 2 * mat.kappa_s * mod.G * sect.I4)
          + gram(shear_y, shear_y, kGA) + gram(shear_z, shear_z, kGA))
    fe = -rA * mat.g * np.einsum("q,qi->i", wq, N["w"])
    return 0.5 * (Me + Me.T), 0.5 * (Ke + Ke.T), fe


def _assemble(mesh: Mesh, Ae: np.ndarray) -> sp.csr_matrix:
    dm = mesh.dof_map
    rows = np.repeat(dm, 12, axis=1).ravel()
    cols = np.tile(dm, (1, 12)).ravel()
    vals = np.tile(Ae.ravel(), mesh.n_elem)
    return sp.coo_matrix((vals, (rows, cols)), shape=(mesh.n_dofs, mesh.n_dofs)).tocsr()


def constraint_matrix(mesh: Mesh) -> np.ndarray:
    """8 x N_dofs selector: six DOFs of the first node, then v and w of the last node."""
    B = np.zeros((8, mesh.n_dofs))
    for i in range(6):
        B[i, i] = 1.0
    B[6, mesh.dof(-1, "v")] = 1.0
    B[7, mesh.dof(-1, "w")] = 1.0
    return B


def constraint_values(t: float, op: OperatingPoint) -> np.ndarray:
    """Imposed values of the eight constrained DOFs at time ``t``."""
    h = np.zeros(8)
    h[0] = op.V0 * t
    h[3] = op.Omega * t
    return h


@dataclass
class AssembledSystem:
    mesh: Mesh
    model: BeamModel
    shapes: ShapeFunctions
    M: sp.csr_matrix
    C: sp.csr_matrix
    K: sp.csr_matrix
    F_g: np.ndarray
    B: np.ndarray

    def h(self, t: float) -> np.ndarray:
        return constraint_values(t, self.model.operating)


def assemble_constant_system(mesh: Mesh, model: BeamModel) -> AssembledSystem:
    """Free-free mass, damping and stiffness matrices plus gravity and constraints."""
    shapes = ShapeFunctions.for_model(mesh, model)
    Me, Ke, fe = element_matrices(shapes, model)
    M = _assemble(mesh, Me)
    K = _assemble(mesh, Ke)
    C = (model.material.c * M).tocsr()
    F_g = np.zeros(mesh.n_dofs)
    np.add.at(F_g, mesh.dof_map.ravel(), np.tile(fe, mesh.n_elem))
    return AssembledSystem(mesh=mesh, model=model, shapes=shapes, M=M, C=C, K=K, F_g=F_g,
                           B=constraint_matrix(mesh))


def write_triplets(path, A) -> None:
    """Dump a sparse matrix as ``row,col,value`` lines (0-based) with a header."""
    coo = sp.coo_matrix(A)
    with open(path, "w") as fh:
        fh.write(f"# shape,{coo.shape[0]},{coo.shape[1]}\nrow,col,value\n")
        for r, c, v in zip(coo.row, coo.col, coo.data):
            fh.write(f"{r},{c},{v:.17g}\n")
