"""Free-free normal modes, mode classification and the reduced-order basis."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse.linalg as spla

from .fem import AssembledSystem, Mesh

FAMILIES = ("longitudinal", "torsional", "flexural")
RIGID_FREQ_HZ = 1e-3
DEGENERACY_RTOL = 1e-6
DENSE_LIMIT = 800


class EigenSolverError(RuntimeError):
    pass


@dataclass
class ModeTable:
    """Mass-normalized free-free modes sorted by frequency."""

    omega: np.ndarray
    Phi: np.ndarray
    fractions: np.ndarray  # (n_modes, 3) mass fraction per family
    L: float
    c_L: float
    c_T: float
    h: float
    cls: np.ndarray = field(default=None)

    @property
    def n_modes(self) -> int:
        return self.omega.size

    @property
    def freq(self) -> np.ndarray:
        return self.omega / (2 * math.pi)

    @property
    def fhat(self) -> np.ndarray:
        return self.freq * self.L / self.c_L

    @property
    def family(self) -> np.ndarray:
        return np.array(FAMILIES)[np.argmax(self.fractions, axis=1)]

    @property
    def is_rigid(self) -> np.ndarray:
        return self.freq < RIGID_FREQ_HZ

    def fhat_band(self) -> np.ndarray:
        """Band coordinate used for longitudinal/torsional selection.

        For the affine families the discrete frequency is mapped back through
        the exact dispersion relation of the linear consistent-mass element,
        recovering the continuum wavenumber. The k-th discrete rod mode then
        sits exactly at its continuum value, so the band edge is not blurred
        by mesh dispersion. Flexural modes keep their plain f_hat.
        """
        out = self.fhat.copy()
        fam = self.family
        for name, c in (("longitudinal", self.c_L), ("torsional", self.c_T)):
            sel = fam == name
            r = (self.omega[sel] * self.h) ** 2 / (6.0 * c * c)
            cos_kh = np.clip((1.0 - 2.0 * r) / (1.0 + r), -1.0, 1.0)
            k = np.arccos(cos_kh) / self.h
            out[sel] = c * k / (2 * math.pi) * self.L / self.c_L
        return out

    def to_rows(self):
        band = self.fhat_band()
        return [(i, self.freq[i], self.fhat[i], band[i], self.cls[i]) for i in range(self.n_modes)]


def _family_masks(mesh: Mesh):
    fam = np.empty(mesh.n_dofs, dtype=int)
    local = np.array([0, 2, 2, 1, 2, 2])  # u, v, w, tx, ty, tz -> family index
    fam[:] = np.tile(local, mesh.n_nodes)
    return [fam == i for i in range(3)]


def _plane_mask(mesh: Mesh):
    local = np.array([False, True, False, False, False, True])  # v and theta_z
    return np.tile(local, mesh.n_nodes)


def solve_eigen(system: AssembledSystem, n_wanted: int | None = None,
                fhat_max: float | None = None) -> ModeTable:
    """Lowest eigenpairs of ``K phi = w^2 M phi``.

    Give either ``n_wanted`` or ``fhat_max`` (all modes up to that
    dimensionless frequency are returned, plus a few above it).
    """
    mesh, M, K = system.mesh, system.M, system.K
    N = mesh.n_dofs
    c_L, c_T = system.model.moduli.c_L, system.model.moduli.c_T
    if n_wanted is None and fhat_max is None:
        raise ValueError("give n_wanted or fhat_max")
    try:
        if N <= DENSE_LIMIT:
            w2, V = sla.eigh(K.toarray(), M.toarray())
        else:
            k = n_wanted or 64
            while True:
                k = min(k, N - 2)
                v0 = np.ones(N)
                w2, V = spla.eigsh(K.tocsc(), k=k, M=M.tocsc(), sigma=-1.0, which="LM", v0=v0)
                if n_wanted is not None or k >= N - 2:
                    break
                top = math.sqrt(max(w2.max(), 0.0)) / (2 * math.pi) * mesh.L / c_L
                if top > 1.05 * fhat_max:
                    break
                k *= 2
    except (np.linalg.LinAlgError, spla.ArpackError, spla.ArpackNoConvergence) as exc:
        raise EigenSolverError(str(exc)) from exc
    order = np.argsort(w2)
    w2, V = w2[order], V[:, order]
    if n_wanted is not None:
        w2, V = w2[:n_wanted], V[:, :n_wanted]
    elif N <= DENSE_LIMIT:
        fh = np.sqrt(np.maximum(w2, 0.0)) / (2 * math.pi) * mesh.L / c_L
        keep = max(int(np.searchsorted(fh, 1.05 * fhat_max)) + 4, 1)
        w2, V = w2[:keep], V[:, :keep]
    w2, V = _rayleigh_ritz(V, M, K)
    V = _align_degenerate(V, w2, M, mesh)
    V = V * np.where(V[np.argmax(np.abs(V), axis=0), np.arange(V.shape[1])] < 0, -1.0, 1.0)
    masks = _family_masks(mesh)
    MV = M @ V
    fractions = np.stack([np.sum(V[m] * MV[m], axis=0) for m in masks], axis=1)
    table = ModeTable(omega=np.sqrt(np.maximum(w2, 0.0)), Phi=V, fractions=fractions,
                      L=mesh.L, c_L=c_L, c_T=c_T, h=mesh.h)
    return classify_modes(table)


def _rayleigh_ritz(V, M, K):
    """Re-solve the projected problem so the basis is exactly M-orthonormal."""
    Mr = V.T @ (M @ V)
    Kr = V.T @ (K @ V)
    Mr, Kr = 0.5 * (Mr + Mr.T), 0.5 * (Kr + Kr.T)
    w2, U = sla.eigh(Kr, Mr)
    return w2, V @ U


def _align_degenerate(V, w2, M, mesh):
    """Rotate degenerate clusters so flexural pairs lie in the x-y or x-z plane."""
    plane = _plane_mask(mesh)
    omega = np.sqrt(np.maximum(w2, 0.0))
    scale = max(omega.max(), 1.0)
    n = V.shape[1]
    i = 0
    while i < n:
        j = i + 1
        while j < n and abs(omega[j] - omega[i]) <= DEGENERACY_RTOL * max(omega[i], 1e-3 * scale):
            j += 1
        if j - i > 1:
            block = V[:, i:j]
            Mb = M @ block
            P = block[plane].T @ Mb[plane]
            _, U = np.linalg.eigh(0.5 * (P + P.T))
            V[:, i:j] = block @ U[:, ::-1]
        i = j
    return V


def classify_modes(table: ModeTable) -> ModeTable:
    """Label each mode rigid or by the family carrying most of its kinetic energy."""
    fam = table.family
    table.cls = np.where(table.is_rigid, "rigid", fam)
    return table


@dataclass
class ReducedSystem:
    """Projection of the constant operators on a selected modal basis."""

    system: AssembledSystem
    Phi: np.ndarray
    omega: np.ndarray
    cls: np.ndarray
    family: np.ndarray
    M_r: np.ndarray
    C_r: np.ndarray
    K_r: np.ndarray
    B_r: np.ndarray
    F_g_r: np.ndarray

    @property
    def n_red(self) -> int:
        return self.Phi.shape[1]

    @property
    def mesh(self) -> Mesh:
        return self.system.mesh

    def expand(self, q: np.ndarray) -> np.ndarray:
        """Full nodal vector(s) from reduced coordinates; q may be (n_red,) or (n_t, n_red)."""
        return np.asarray(q) @ self.Phi.T

    def project(self, F: np.ndarray) -> np.ndarray:
        return np.asarray(F) @ self.Phi

    def orthogonality_residual(self) -> float:
        return float(np.max(np.abs(self.M_r - np.eye(self.n_red))))


def select_modes(table: ModeTable, flex_cutoff_hz: float = 5.0, band_fhat: float = 4.0) -> np.ndarray:
    """Indices kept by the selection rule.

    Keeps the axial/torsional rigid modes, every flexural mode (transverse
    rigid motions included) with ``f_hat <= flex_cutoff_hz * L / c_L``, and
    longitudinal and torsional modes with ``0 < f_hat <= band_fhat``.
    """
    fam = table.family
    band = table.fhat_band()
    fhat = table.fhat
    flex_limit = flex_cutoff_hz * table.L / table.c_L
    edge = band_fhat * (1.0 + 1e-9)
    keep = ((table.is_rigid & (fam != "flexural"))
            | ((fam == "flexural") & (fhat <= flex_limit))
            | (~table.is_rigid & (fam != "flexural") & (band <= edge)))
    return np.flatnonzero(keep)


def build_reduction(table: ModeTable, system: AssembledSystem, flex_cutoff_hz: float = 5.0,
                    band_fhat: float = 4.0, indices=None) -> ReducedSystem:
    """Reduced operators on the selected modes (or on explicit ``indices``)."""
    idx = select_modes(table, flex_cutoff_hz, band_fhat) if indices is None else np.asarray(indices)
    if idx.size == 0:
        raise ValueError("empty modal selection")
    if np.max(table.fhat[idx]) > table.fhat.max() - 1e-12 and table.n_modes < system.mesh.n_dofs:
        raise ValueError("mode table does not extend past the selection band")
    Phi = table.Phi[:, idx]
    M_r = Phi.T @ (system.M @ Phi)
    C_r = Phi.T @ (system.C @ Phi)
    K_r = Phi.T @ (system.K @ Phi)
    return ReducedSystem(system=system, Phi=Phi, omega=table.omega[idx], cls=table.cls[idx],
                         family=table.family[idx], M_r=M_r, C_r=C_r, K_r=K_r,
                         B_r=system.B @ Phi, F_g_r=Phi.T @ system.F_g)


def reduced_model(system: AssembledSystem, flex_cutoff_hz: float = 5.0, band_fhat: float = 4.0):
    """Convenience: eigen-solve with enough modes, then reduce. Returns (table, reduced)."""
    L, c_L = system.mesh.L, system.model.moduli.c_L
    fmax = max(band_fhat, flex_cutoff_hz * L / c_L)
    table = solve_eigen(system, fhat_max=fmax)
    return table, build_reduction(table, system, flex_cutoff_hz, band_fhat)
