"""Run configuration: JSON loading, defaults and aggregated validation."""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
from dataclasses import dataclass, field, fields

from .params import (BeamModel, BitRockParams, ContactParams, GeometryParams, MaterialParams,
                     OperatingPoint, ParameterError)
from .uq import StochasticBitRock

KINDS = ("modal", "static", "simulate", "mc", "optimize", "optimize-robust", "psd")

PARAM_BLOCKS = {"material": MaterialParams, "geometry": GeometryParams, "contact": ContactParams,
                "bitrock": BitRockParams, "operating": OperatingPoint}

# run-control blocks: key -> default value (the type of the default is enforced)
CONTROL_DEFAULTS = {
    "mesh": {"n_elem": 500},
    "reduction": {"flex_cutoff_hz": 5.0, "band_fhat": 4.0},
    "switches": {"contact": True, "bit": True},
    "integrator": {"t_end": 10.0, "alpha": 0.015, "dt": None, "tol": 1e-6, "max_iter": 50,
                   "refine": True, "refine_factor": 8, "refine_release": 10},
    "static": {"enabled": True, "t_max": 60.0},
    "stochastic": {f.name: f.default for f in fields(StochasticBitRock) if f.name != "seed"},
    "mc": {"n_s": 128, "t_end": None},
    "window": {"V0": [1.0 / 360.0, 1.0 / 90.0], "Omega": [1.5 * math.pi, 7.0 * math.pi / 3.0],
               "n_V0": 7, "n_Omega": 7, "uts": 650e6, "p_risk": 0.1, "n_s": 128, "t_end": None,
               "stress_stride": 1},
    "psd": {"signals": ["bit_velocity", "w_dot@50"], "window": 31, "order": 3, "f_min": 5.0},
    "output": {"stride": 1, "section_x": 50.0},
}

TOP_LEVEL = {"kind", "seed", "verbosity", "out"} | set(PARAM_BLOCKS) | set(CONTROL_DEFAULTS)


class ConfigError(ValueError):
    """Configuration problem; ``violations`` holds (path, line, message) triples."""

    def __init__(self, violations):
        self.violations = list(violations)
        super().__init__("; ".join(format_violation(v) for v in self.violations))


def format_violation(v) -> str:
    path, line, msg = v
    where = f"line {line}: " if line else ""
    return f"{where}{path}: {msg}" if path else f"{where}{msg}"


def locate(text: str | None, path: str) -> int | None:
    """Best-effort 1-based line of a dotted key path in the JSON source."""
    if not text:
        return None
    pos = 0
    for key in path.split("."):
        hit = text.find(f'"{key}"', pos)
        if hit < 0:
            break
        pos = hit
    else:
        return text.count("\n", 0, pos) + 1
    return text.count("\n", 0, pos) + 1 if pos else None


@dataclass
class RunConfig:
    """Effective configuration: parameter blocks plus run controls."""

    kind: str | None = None
    seed: int = 0
    verbosity: str = "info"
    out: str = "out"
    params: dict = field(default_factory=dict)
    controls: dict = field(default_factory=lambda: copy.deepcopy(CONTROL_DEFAULTS))
    source: str | None = field(default=None, repr=False)

    @property
    def model(self) -> BeamModel:
        return BeamModel.from_dict(self.params)

    @property
    def stochastic(self) -> StochasticBitRock:
        return StochasticBitRock(seed=self.seed, **self.controls["stochastic"])

    def __getitem__(self, block: str) -> dict:
        return self.controls[block]

    def as_dict(self) -> dict:
        """Fully expanded configuration (every default filled in)."""
        d = {"kind": self.kind, "seed": self.seed, "verbosity": self.verbosity}
        d.update(self.model.to_dict())
        d.update(copy.deepcopy(self.controls))
        return d

    def digest(self) -> str:
        blob = json.dumps(self.as_dict(), sort_keys=True, separators=(",", ":"), default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def parse_text(text: str) -> dict:
    if not text.strip():
        return {}
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError([("", exc.lineno, f"invalid JSON: {exc.msg} (column {exc.colno})")]) from exc
    if not isinstance(data, dict):
        raise ConfigError([("", 1, "top level must be a JSON object")])
    return data


def _is_number(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool)


def _check_block_fields(name, typ, block, text, out):
    """Per-field construction so every bad field is reported, not only the first."""
    defaults = {}
    for f in fields(typ):
        if f.name not in block:
            continue
        val = block[f.name]
        path = f"{name}.{f.name}"
        if not _is_number(val):
            out.append((path, locate(text, path), f"expected a number, got {val!r}"))
            continue
        try:
            typ(**{**defaults, f.name: val})
        except ParameterError as exc:
            out.append((path, locate(text, path), str(exc)))
    if not out:
        try:
            typ(**block)
        except (ParameterError, TypeError) as exc:
            out.append((name, locate(text, name), str(exc)))


def _check_controls(name, block, text, out):
    ref = CONTROL_DEFAULTS[name]
    for key, val in block.items():
        path = f"{name}.{key}"
        if key not in ref:
            out.append((path, locate(text, path), f"unknown key; allowed: {sorted(ref)}"))
            continue
        want = ref[key]
        if want is None:
            ok = val is None or _is_number(val)
        elif isinstance(want, bool):
            ok = isinstance(val, bool)
        elif isinstance(want, int):
            ok = isinstance(val, int) and not isinstance(val, bool)
        elif isinstance(want, float):
            ok = _is_number(val)
        elif isinstance(want, list):
            ok = isinstance(val, list)
        else:
            ok = True
        if not ok:
            out.append((path, locate(text, path), f"expected {type(want).__name__}, got {val!r}"))


def _check_ranges(cfg: RunConfig, text, out):
    c = cfg.controls

    def bad(path, msg):
        out.append((path, locate(text, path), msg))

    if c["mesh"]["n_elem"] < 2:
        bad("mesh.n_elem", "at least 2 elements are required")
    if not c["reduction"]["flex_cutoff_hz"] > 0:
        bad("reduction.flex_cutoff_hz", "must be > 0")
    if not c["reduction"]["band_fhat"] > 0:
        bad("reduction.band_fhat", "must be > 0")
    integ = c["integrator"]
    if not integ["t_end"] > 0:
        bad("integrator.t_end", "must be > 0")
    if not 0 <= integ["alpha"] < 0.5:
        bad("integrator.alpha", "must lie in [0, 0.5)")
    if integ["dt"] is not None and not integ["dt"] > 0:
        bad("integrator.dt", "must be > 0")
    if not integ["tol"] > 0:
        bad("integrator.tol", "must be > 0")
    for key in ("max_iter", "refine_factor", "refine_release"):
        if integ[key] < 1:
            bad(f"integrator.{key}", "must be >= 1")
    if not c["static"]["t_max"] > 0:
        bad("static.t_max", "must be > 0")
    for blk in ("mc", "window"):
        if c[blk]["n_s"] < 1:
            bad(f"{blk}.n_s", "must be >= 1")
        if c[blk]["t_end"] is not None and not c[blk]["t_end"] > 0:
            bad(f"{blk}.t_end", "must be > 0")
    w = c["window"]
    for key in ("V0", "Omega"):
        r = w[key]
        if not (len(r) == 2 and all(_is_number(x) for x in r) and 0 <= r[0] <= r[1]):
            bad(f"window.{key}", "must be [min, max] with 0 <= min <= max")
        elif r[0] == r[1] and w[f"n_{key}"] != 1:
            bad(f"window.n_{key}", "a degenerate range needs exactly one grid point")
    for key in ("n_V0", "n_Omega", "stress_stride"):
        if w[key] < 1:
            bad(f"window.{key}", "must be >= 1")
    if not w["uts"] > 0:
        bad("window.uts", "must be > 0")
    if not 0 < w["p_risk"] < 1:
        bad("window.p_risk", "must lie in (0, 1)")
    p = c["psd"]
    if p["window"] < 3 or p["window"] % 2 == 0:
        bad("psd.window", "must be an odd integer >= 3")
    if not 0 <= p["order"] < p["window"]:
        bad("psd.order", "must lie in [0, window)")
    for s in p["signals"]:
        try:
            parse_signal(s)
        except ValueError as exc:
            bad("psd.signals", str(exc))
    if c["output"]["stride"] < 1:
        bad("output.stride", "must be >= 1")
    st = c["stochastic"]
    n_before = len(out)
    for key, val in st.items():
        if val == CONTROL_DEFAULTS["stochastic"][key]:
            continue
        try:
            StochasticBitRock(**{key: val})
        except ParameterError as exc:
            bad(f"stochastic.{key}", str(exc))
    if len(out) == n_before:
        try:
            StochasticBitRock(seed=cfg.seed, **st)
        except ParameterError as exc:
            bad("stochastic", str(exc))


SIGNALS = ("bit_velocity", "bit_omega")
NODAL_FIELDS = ("u", "v", "w", "tx", "ty", "tz")


def parse_signal(spec: str):
    """``bit_velocity``, ``bit_omega`` or ``<field>[_dot]@<x>`` (e.g. ``w_dot@50``)."""
    if spec in SIGNALS:
        return spec, None, None
    if "@" in spec:
        name, x = spec.split("@", 1)
        rate = 1 if name.endswith("_dot") else 0
        fld = name[:-4] if rate else name
        try:
            xv = float(x)
        except ValueError:
            xv = None
        if fld in NODAL_FIELDS and xv is not None:
            return fld, xv, rate
    raise ValueError(f"unknown signal {spec!r}")


def build_config(data: dict, text: str | None = None, kind: str | None = None) -> RunConfig:
    """Merge user data over the defaults; raises ConfigError with every violation."""
    out = []
    cfg = RunConfig(source=text)
    for key in data:
        if key not in TOP_LEVEL:
            out.append((key, locate(text, key), f"unknown top-level key; allowed: {sorted(TOP_LEVEL)}"))
    for key, typ in PARAM_BLOCKS.items():
        block = data.get(key) or {}
        if not isinstance(block, dict):
            out.append((key, locate(text, key), "must be an object"))
            continue
        allowed = {f.name for f in fields(typ)}
        for k in block:
            if k not in allowed:
                out.append((f"{key}.{k}", locate(text, f"{key}.{k}"), f"unknown key; allowed: {sorted(allowed)}"))
        errs = []
        _check_block_fields(key, typ, {k: v for k, v in block.items() if k in allowed}, text, errs)
        out.extend(errs)
        cfg.params[key] = {k: v for k, v in block.items() if k in allowed}
    for key in CONTROL_DEFAULTS:
        block = data.get(key) or {}
        if not isinstance(block, dict):
            out.append((key, locate(text, key), "must be an object"))
            continue
        errs = []
        _check_controls(key, block, text, errs)
        out.extend(errs)
        if not errs:
            cfg.controls[key].update(block)
    seed = data.get("seed", 0)
    if not (isinstance(seed, int) and not isinstance(seed, bool) and 0 <= seed < 2**64):
        out.append(("seed", locate(text, "seed"), "must be an integer in [0, 2^64)"))
    else:
        cfg.seed = seed
    cfg.kind = kind or data.get("kind")
    if cfg.kind is not None and cfg.kind not in KINDS + ("validate",):
        out.append(("kind", locate(text, "kind"), f"must be one of {KINDS}"))
    cfg.verbosity = data.get("verbosity", "info")
    if cfg.verbosity not in ("debug", "info", "warning", "error"):
        out.append(("verbosity", locate(text, "verbosity"), "must be debug, info, warning or error"))
    cfg.out = data.get("out", "out")
    # blocks with type errors were not merged, so range checks see their defaults
    _check_ranges(cfg, text, out)
    if out:
        raise ConfigError(out)
    return cfg


def load_config(path: str | None, kind: str | None = None) -> RunConfig:
    if path is None:
        return build_config({}, None, kind)
    if not os.path.exists(path):
        raise ConfigError([("", None, f"config file {path!r} not found")])
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    return build_config(parse_text(text), text, kind)


def validate(data: dict | str | None) -> list[str]:
    """Dry-run check; returns the formatted violations (empty when valid)."""
    text = None
    if isinstance(data, str):
        text = data
        try:
            data = parse_text(text)
        except ConfigError as exc:
            return [format_violation(v) for v in exc.violations]
    try:
        build_config(data or {}, text)
    except ConfigError as exc:
        return [format_violation(v) for v in exc.violations]
    return []
