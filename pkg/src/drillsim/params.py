"""Physical parameters and derived section / elastic constants.

All quantities are SI. Defaults describe a steel drill collar of 100 m in a
0.19 m borehole drilling at 20 m/h and 60 rpm.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace


class ParameterError(ValueError):
    """Raised when a parameter block violates its invariants."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ParameterError(msg)


@dataclass(frozen=True)
class MaterialParams:
    rho: float = 7900.0
    E: float = 203e9
    nu: float = 0.3
    kappa_s: float = 6.0 / 7.0
    c: float = 0.01
    g: float = 9.81

    def __post_init__(self):
        _require(self.rho > 0, "material.rho must be > 0")
        _require(self.E > 0, "material.E must be > 0")
        _require(0 <= self.nu < 0.5, "material.nu must lie in [0, 0.5)")
        _require(self.kappa_s > 0, "material.kappa_s must be > 0")
        _require(self.c >= 0, "material.c must be >= 0")
        _require(self.g >= 0, "material.g must be >= 0")


@dataclass(frozen=True)
class GeometryParams:
    L: float = 100.0
    R_int: float = 0.05
    R_ext: float = 0.08
    R_bh: float = 0.095

    def __post_init__(self):
        _require(self.L > 0, "geometry.L must be > 0")
        _require(0 <= self.R_int < self.R_ext, "geometry requires 0 <= R_int < R_ext")
        _require(self.R_ext < self.R_bh, "geometry requires R_ext < R_bh (positive gap)")

    @property
    def gap(self) -> float:
        return self.R_bh - self.R_ext


@dataclass(frozen=True)
class SectionProperties:
    A: float
    I4: float
    I6: float

    @property
    def Iyy(self) -> float:
        return self.I4

    @property
    def Izz(self) -> float:
        return self.I4

    @property
    def Ixx(self) -> float:
        return 2.0 * self.I4

    @property
    def Izzzz(self) -> float:
        return 3.0 * self.I6

    @property
    def Iyyzz(self) -> float:
        return self.I6


@dataclass(frozen=True)
class ElasticModuli:
    G: float
    lam: float
    c_L: float
    c_T: float


@dataclass(frozen=True)
class ContactParams:
    k_FS1: float = 1e10
    k_FS2: float = 1e16
    c_FS: float = 1e6
    mu_FS: float = 0.25
    v_reg: float = 1e-4  # slip speed (m/s) below which the friction sign is smoothed

    def __post_init__(self):
        for name in ("k_FS1", "k_FS2", "c_FS", "mu_FS", "v_reg"):
            _require(getattr(self, name) >= 0, f"contact.{name} must be >= 0")
        _require(self.mu_FS <= 1, "contact.mu_FS must be <= 1")


@dataclass(frozen=True)
class BitRockParams:
    Gamma_BR: float = 30e3
    alpha_BR: float = 400.0
    mu_BR: float = 0.4

    def __post_init__(self):
        _require(self.Gamma_BR > 0, "bitrock.Gamma_BR must be > 0")
        _require(self.alpha_BR > 0, "bitrock.alpha_BR must be > 0")
        _require(0 <= self.mu_BR <= 1, "bitrock.mu_BR must lie in [0, 1]")


@dataclass(frozen=True)
class OperatingPoint:
    V0: float = 1.0 / 180.0
    Omega: float = 2.0 * math.pi

    def __post_init__(self):
        _require(self.V0 >= 0, "operating.V0 must be >= 0")
        _require(self.Omega >= 0, "operating.Omega must be >= 0")


def derive_section_properties(geom: GeometryParams | None = None, R_int: float | None = None,
                              R_ext: float | None = None) -> SectionProperties:
    """Area and radial moments of an annulus.

    Either pass a ``GeometryParams`` or the two radii directly. Equal radii
    give the degenerate zero section.
    """
    if geom is not None:
        R_int, R_ext = geom.R_int, geom.R_ext
    if R_int is None or R_ext is None:
        raise ParameterError("radii are required")
    if R_int < 0 or R_int > R_ext:
        raise ParameterError("section requires 0 <= R_int <= R_ext")
    A = math.pi * (R_ext**2 - R_int**2)
    I4 = math.pi / 4.0 * (R_ext**4 - R_int**4)
    I6 = math.pi / 24.0 * (R_ext**6 - R_int**6)
    return SectionProperties(A=A, I4=I4, I6=I6)


def derive_elastic_moduli(mat: MaterialParams) -> ElasticModuli:
    """Shear modulus, first Lame parameter and wave speeds."""
    if mat.nu >= 0.5:
        raise ParameterError("nu = 0.5 makes the Lame parameter singular")
    G = mat.E / (2.0 * (1.0 + mat.nu))
    lam = mat.E * mat.nu / ((1.0 + mat.nu) * (1.0 - 2.0 * mat.nu))
    c_L = math.sqrt(mat.E / mat.rho)
    c_T = math.sqrt(mat.kappa_s * G / mat.rho)
    return ElasticModuli(G=G, lam=lam, c_L=c_L, c_T=c_T)


@dataclass(frozen=True)
class BeamModel:
    """Bundle of every physical parameter plus the derived constants."""

    material: MaterialParams = field(default_factory=MaterialParams)
    geometry: GeometryParams = field(default_factory=GeometryParams)
    contact: ContactParams = field(default_factory=ContactParams)
    bitrock: BitRockParams = field(default_factory=BitRockParams)
    operating: OperatingPoint = field(default_factory=OperatingPoint)

    @property
    def section(self) -> SectionProperties:
        return derive_section_properties(self.geometry)

    @property
    def moduli(self) -> ElasticModuli:
        return derive_elastic_moduli(self.material)

    def with_operating(self, V0: float, Omega: float) -> "BeamModel":
        return replace(self, operating=OperatingPoint(V0=V0, Omega=Omega))

    def with_bitrock(self, bitrock: BitRockParams) -> "BeamModel":
        return replace(self, bitrock=bitrock)

    def to_dict(self) -> dict:
        return {
            "material": asdict(self.material),
            "geometry": asdict(self.geometry),
            "contact": asdict(self.contact),
            "bitrock": asdict(self.bitrock),
            "operating": asdict(self.operating),
        }

    @classmethod
    def from_dict(cls, data: dict | None) -> "BeamModel":
        data = data or {}
        blocks = {"material": MaterialParams, "geometry": GeometryParams, "contact": ContactParams,
                  "bitrock": BitRockParams, "operating": OperatingPoint}
        kwargs = {}
        for key, typ in blocks.items():
            block = data.get(key, {}) or {}
            allowed = {f.name for f in fields(typ)}
            unknown = set(block) - allowed
            if unknown:
                raise ParameterError(f"{key}: unknown keys {sorted(unknown)}")
            kwargs[key] = typ(**block)
        return cls(**kwargs)
