"""Geometry, physical constants and configuration ingestion.

A :class:`Scenario` is the immutable description of every thin wire in the
link: transmit antennas, RIS scatterers on a rectangular grid and receive
antennas. All wires are parallel to the z axis.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import constants as _sc

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

# a/l bound for the thin-wire regime
THIN_WIRE_RATIO = 0.1
# fraction of a wavelength below which two points count as the same
POSITION_TOL_WAVELENGTHS = 1e-12


class ConfigError(ValueError):
    """Invalid scenario configuration."""


class Role(str, Enum):
    TRANSMIT = "transmit"
    SCATTERER = "scatterer"
    RECEIVE = "receive"


@dataclass(frozen=True)
class PhysicalConstants:
    frequency: float
    omega: float
    wavelength: float
    k0: float
    eps0: float
    mu0: float
    eta0: float
    c0: float

    @classmethod
    def from_frequency(cls, frequency: float) -> "PhysicalConstants":
        frequency = float(frequency)
        if not (frequency > 0 and math.isfinite(frequency)):
            raise ConfigError(f"frequency must be positive and finite, got {frequency}")
        eps0, mu0 = _sc.epsilon_0, _sc.mu_0
        c0 = 1.0 / math.sqrt(eps0 * mu0)
        wavelength = c0 / frequency
        return cls(
            frequency=frequency,
            omega=2 * math.pi * frequency,
            wavelength=wavelength,
            k0=2 * math.pi / wavelength,
            eps0=eps0,
            mu0=mu0,
            eta0=math.sqrt(mu0 / eps0),
            c0=c0,
        )


@dataclass(frozen=True)
class WireElement:
    """A z-directed thin wire centred at ``position``."""

    position: tuple[float, float, float]
    length: float
    radius: float
    role: Role = Role.SCATTERER
    index: int = 0

    def __post_init__(self):
        pos = tuple(float(v) for v in self.position)
        if len(pos) != 3 or not all(math.isfinite(v) for v in pos):
            raise ConfigError(f"element position must be three finite numbers, got {self.position}")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "role", Role(self.role))
        if not self.length > 0:
            raise ConfigError(f"element length must be positive, got {self.length}")
        if not self.radius > 0:
            raise ConfigError(f"element radius must be positive, got {self.radius}")
        if self.radius / self.length >= THIN_WIRE_RATIO:
            raise ConfigError(
                f"thin-wire regime violated: a/l = {self.radius / self.length:.3g} >= {THIN_WIRE_RATIO}")

    @property
    def x(self) -> float:
        return self.position[0]

    @property
    def y(self) -> float:
        return self.position[1]

    @property
    def z(self) -> float:
        return self.position[2]

    @property
    def half_length(self) -> float:
        return 0.5 * self.length

    def translated(self, shift) -> "WireElement":
        return replace(self, position=tuple(np.add(self.position, shift)))


# ----------------------------------------------------------------------------
# configuration

_LENGTH_RE = re.compile(
    r"^\s*(?P<num>[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?)?\s*\*?\s*"
    r"(?P<unit>lambda|λ|m|mm|cm)?\s*(/\s*(?P<den>[-+]?(\d+\.?\d*|\.\d+)([eE][-+]?\d+)?))?\s*$")
_UNITS = {None: 1.0, "m": 1.0, "mm": 1e-3, "cm": 1e-2}


def parse_length(value, wavelength: float) -> float:
    """Resolve a length given in metres or as a wavelength multiple.

    Numbers are metres. Strings may carry a unit suffix: ``"lambda/32"``,
    ``"0.5 lambda"``, ``"2.5mm"``.
    """
    if isinstance(value, bool):
        raise ConfigError(f"invalid length {value!r}")
    if isinstance(value, (int, float)):
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"invalid length {value!r}")
    m = _LENGTH_RE.match(value)
    if not m or (m.group("num") is None and m.group("unit") is None):
        raise ConfigError(f"cannot parse length {value!r}")
    num = float(m.group("num")) if m.group("num") else 1.0
    unit = m.group("unit")
    scale = wavelength if unit in ("lambda", "λ") else _UNITS[unit]
    den = float(m.group("den")) if m.group("den") else 1.0
    if den == 0:
        raise ConfigError(f"zero denominator in length {value!r}")
    return num * scale / den


def _complex(value, what: str) -> complex:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return complex(value)
    if isinstance(value, (list, tuple)) and len(value) == 2:
        return complex(float(value[0]), float(value[1]))
    raise ConfigError(f"{what} must be a number or a [re, im] pair, got {value!r}")


def _complex_list(value, n: int, what: str) -> tuple[complex, ...]:
    """A single [re, im] pair (broadcast) or one pair per element."""
    if isinstance(value, (list, tuple)) and value and isinstance(value[0], (list, tuple)):
        out = tuple(_complex(v, what) for v in value)
        if len(out) != n:
            raise ConfigError(f"{what}: expected {n} entries, got {len(out)}")
        return out
    return (_complex(value, what),) * n


def _check_keys(section: dict, allowed: set, name: str):
    if not isinstance(section, dict):
        raise ConfigError(f"[{name}] must be a table")
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(unknown))}")


@dataclass(frozen=True)
class ArrayConfig:
    """Transmit or receive array: explicit element positions."""

    positions: tuple = ()
    length: float | str = "lambda/2"
    radius: float | str = "lambda/500"
    impedance: tuple[complex, ...] | complex = 50.0
    voltages: tuple[complex, ...] | None = None


@dataclass(frozen=True)
class LoadOverride:
    index: int
    resistance: float | None = None
    inductance: float | None = None
    capacitance: float | None = None
    impedance: complex | None = None


@dataclass(frozen=True)
class LoadConfig:
    mode: str = "series"
    resistance: float = 1.0
    inductance: float = 1e-9
    capacitance: float = 0.0
    impedances: tuple[complex, ...] = ()
    overrides: tuple[LoadOverride, ...] = ()

    def __post_init__(self):
        if self.mode not in ("series", "parallel", "explicit"):
            raise ConfigError(f"ris.load.mode must be series, parallel or explicit, got {self.mode!r}")


@dataclass(frozen=True)
class RisConfig:
    rows: int = 0
    cols: int = 0
    spacing: float | str = "lambda/2"
    center: tuple = (0.0, 0.0, 0.0)
    length: float | str = "lambda/32"
    radius: float | str = "lambda/500"
    plane: str = "xz"
    load: LoadConfig = field(default_factory=LoadConfig)


@dataclass(frozen=True)
class ScenarioConfig:
    frequency_hz: float
    transmitter: ArrayConfig = field(default_factory=ArrayConfig)
    receiver: ArrayConfig = field(default_factory=ArrayConfig)
    ris: RisConfig = field(default_factory=RisConfig)
    quadrature: dict = field(default_factory=dict)


def _array_from_dict(d: dict, name: str, imp_key: str) -> ArrayConfig:
    allowed = {"positions", "length", "radius", imp_key}
    if name == "transmitter":
        allowed.add("voltages")
    _check_keys(d, allowed, name)
    positions = d.get("positions", [])
    if not isinstance(positions, list) or any(
            not isinstance(p, (list, tuple)) or len(p) != 3 for p in positions):
        raise ConfigError(f"[{name}] positions must be a list of [x, y, z] triples")
    n = len(positions)
    kw = dict(positions=tuple(tuple(p) for p in positions))
    if "length" in d:
        kw["length"] = d["length"]
    if "radius" in d:
        kw["radius"] = d["radius"]
    kw["impedance"] = _complex_list(d.get(imp_key, 50.0), n, f"{name}.{imp_key}")
    if d.get("voltages") is not None:
        kw["voltages"] = _complex_list(d["voltages"], n, "transmitter.voltages")
    return ArrayConfig(**kw)


def _load_from_dict(d: dict) -> LoadConfig:
    _check_keys(d, {"mode", "resistance", "inductance", "capacitance", "impedances", "override"},
                "ris.load")
    kw = {k: d[k] for k in ("mode", "resistance", "inductance", "capacitance") if k in d}
    for k in ("resistance", "inductance", "capacitance"):
        if k in kw:
            kw[k] = float(kw[k])
    if "impedances" in d:
        kw["impedances"] = tuple(_complex(v, "ris.load.impedances") for v in d["impedances"])
    overrides = []
    for o in d.get("override", []):
        _check_keys(o, {"index", "resistance", "inductance", "capacitance", "impedance"},
                    "ris.load.override")
        if "index" not in o:
            raise ConfigError("ris.load.override entries need an index")
        overrides.append(LoadOverride(
            index=int(o["index"]),
            resistance=o.get("resistance"),
            inductance=o.get("inductance"),
            capacitance=o.get("capacitance"),
            impedance=_complex(o["impedance"], "override.impedance") if "impedance" in o else None,
        ))
    kw["overrides"] = tuple(overrides)
    return LoadConfig(**kw)


def config_from_dict(d: dict) -> ScenarioConfig:
    """Validate a nested mapping (as parsed from TOML) into a config."""
    _check_keys(d, {"system", "transmitter", "receiver", "ris", "quadrature"}, "root")
    system = d.get("system")
    if system is None or "frequency_hz" not in system:
        raise ConfigError("[system] frequency_hz is required")
    _check_keys(system, {"frequency_hz"}, "system")
    kw = dict(frequency_hz=float(system["frequency_hz"]))
    if "transmitter" in d:
        kw["transmitter"] = _array_from_dict(d["transmitter"], "transmitter", "generator_impedance")
    if "receiver" in d:
        kw["receiver"] = _array_from_dict(d["receiver"], "receiver", "load_impedance")
    if "ris" in d:
        r = d["ris"]
        _check_keys(r, {"rows", "cols", "spacing", "center", "length", "radius", "plane", "load"}, "ris")
        rkw = {k: r[k] for k in ("rows", "cols", "spacing", "length", "radius", "plane") if k in r}
        if "center" in r:
            rkw["center"] = tuple(r["center"])
        if "load" in r:
            rkw["load"] = _load_from_dict(r["load"])
        kw["ris"] = RisConfig(**rkw)
    if "quadrature" in d:
        _check_keys(d["quadrature"], {"order", "rtol", "max_subdivisions", "near_panel_width"},
                    "quadrature")
        kw["quadrature"] = dict(d["quadrature"])
    return ScenarioConfig(**kw)


def load_config(path) -> ScenarioConfig:
    """Read a TOML scenario file. I/O errors propagate as ``OSError``."""
    with open(Path(path), "rb") as fh:
        try:
            data = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
    return config_from_dict(data)


def _pair(z: complex) -> list:
    return [float(z.real), float(z.imag)]


def config_to_dict(cfg: ScenarioConfig) -> dict:
    """Inverse of :func:`config_from_dict` (lengths kept as given)."""
    def arr(a: ArrayConfig, imp_key):
        out = {"positions": [list(p) for p in a.positions], "length": a.length, "radius": a.radius}
        imp = a.impedance if isinstance(a.impedance, tuple) else (a.impedance,)
        out[imp_key] = [_pair(complex(z)) for z in imp] if imp else [50.0, 0.0]
        if a.voltages is not None:
            out["voltages"] = [_pair(v) for v in a.voltages]
        return out

    load = cfg.ris.load
    ld = {"mode": load.mode, "resistance": load.resistance, "inductance": load.inductance,
          "capacitance": load.capacitance}
    if load.impedances:
        ld["impedances"] = [_pair(z) for z in load.impedances]
    if load.overrides:
        ld["override"] = []
        for o in load.overrides:
            od = {"index": o.index}
            for k in ("resistance", "inductance", "capacitance"):
                if getattr(o, k) is not None:
                    od[k] = getattr(o, k)
            if o.impedance is not None:
                od["impedance"] = _pair(o.impedance)
            ld["override"].append(od)
    out = {
        "system": {"frequency_hz": cfg.frequency_hz},
        "transmitter": arr(cfg.transmitter, "generator_impedance"),
        "receiver": arr(cfg.receiver, "load_impedance"),
        "ris": {"rows": cfg.ris.rows, "cols": cfg.ris.cols, "spacing": cfg.ris.spacing,
                "center": list(cfg.ris.center), "length": cfg.ris.length,
                "radius": cfg.ris.radius, "plane": cfg.ris.plane, "load": ld},
    }
    if cfg.quadrature:
        out["quadrature"] = dict(cfg.quadrature)
    return out


# ----------------------------------------------------------------------------
# geometry

def ris_grid_positions(center, M: int, N: int, d: float, plane: str = "xz") -> np.ndarray:
    """Centres of an M x N lattice with spacing ``d``, symmetric about ``center``.

    Rows are stacked along x and columns along z for ``plane="xz"``; rows
    along y for ``plane="yz"``. Element ``(m, n)`` sits at row-major index
    ``m * N + n``.
    """
    if M < 1 or N < 1:
        raise ValueError(f"grid needs M, N >= 1, got {M}x{N}")
    if not d > 0:
        raise ValueError(f"grid spacing must be positive, got {d}")
    if plane not in ("xz", "yz"):
        raise ValueError(f"plane must be 'xz' or 'yz', got {plane!r}")
    center = np.asarray(center, dtype=float)
    m = (np.arange(M) - 0.5 * (M - 1)) * d
    n = (np.arange(N) - 0.5 * (N - 1)) * d
    mm, nn = np.meshgrid(m, n, indexing="ij")
    offsets = np.zeros((M * N, 3))
    offsets[:, 0 if plane == "xz" else 1] = mm.ravel()
    offsets[:, 2] = nn.ravel()
    return center + offsets


@dataclass(frozen=True)
class Scenario:
    constants: PhysicalConstants
    transmit: tuple[WireElement, ...] = ()
    ris: tuple[WireElement, ...] = ()
    receive: tuple[WireElement, ...] = ()
    ris_rows: int = 0
    ris_cols: int = 0
    ris_spacing: float = 0.0
    ris_center: tuple = (0.0, 0.0, 0.0)
    config: ScenarioConfig | None = field(default=None, compare=False, repr=False)

    @property
    def n_t(self) -> int:
        return len(self.transmit)

    @property
    def n_ris(self) -> int:
        return len(self.ris)

    @property
    def n_r(self) -> int:
        return len(self.receive)

    @property
    def elements(self) -> tuple[WireElement, ...]:
        """All wires in system order: transmit, RIS, receive."""
        return self.transmit + self.ris + self.receive

    def geometry_hash(self) -> str:
        payload = {
            "f": repr(self.constants.frequency),
            "e": [[repr(v) for v in (*e.position, e.length, e.radius)] + [e.role.value]
                  for e in self.elements],
        }
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()


def _check_geometry(elements, wavelength: float):
    if len(elements) < 2:
        return
    pos = np.array([e.position for e in elements])
    tol = POSITION_TOL_WAVELENGTHS * wavelength
    diff = pos[:, None, :] - pos[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    if dist.min() <= tol:
        i, j = np.unravel_index(np.argmin(dist), dist.shape)
        raise ConfigError(f"elements {i} and {j} coincide at {tuple(pos[i])}")
    # collinear wires must not overlap along their common axis
    rho = np.hypot(diff[..., 0], diff[..., 1])
    half = np.array([e.half_length for e in elements])
    overlap = (rho <= tol) & (np.abs(diff[..., 2]) < half[:, None] + half[None, :])
    np.fill_diagonal(overlap, False)
    if overlap.any():
        i, j = np.argwhere(overlap)[0]
        raise ConfigError(f"collinear elements {i} and {j} overlap along z")


def build_scenario(config: ScenarioConfig) -> Scenario:
    """Resolve lengths, lay out the RIS grid and validate the geometry."""
    const = PhysicalConstants.from_frequency(config.frequency_hz)
    lam = const.wavelength

    def group(arr: ArrayConfig, role: Role):
        if not arr.positions:
            return ()
        length = parse_length(arr.length, lam)
        radius = parse_length(arr.radius, lam)
        return tuple(
            WireElement(tuple(parse_length(c, lam) for c in p), length, radius, role, i)
            for i, p in enumerate(arr.positions))

    tx = group(config.transmitter, Role.TRANSMIT)
    rx = group(config.receiver, Role.RECEIVE)
    r = config.ris
    if r.rows < 0 or r.cols < 0:
        raise ConfigError("RIS rows/cols must be >= 0")
    ris = ()
    spacing = 0.0
    center = tuple(parse_length(c, lam) for c in r.center)
    if r.rows * r.cols > 0:
        spacing = parse_length(r.spacing, lam)
        if not spacing > 0:
            raise ConfigError(f"RIS spacing must be positive, got {spacing}")
        length = parse_length(r.length, lam)
        radius = parse_length(r.radius, lam)
        pts = ris_grid_positions(center, r.rows, r.cols, spacing, r.plane)
        ris = tuple(WireElement(tuple(p), length, radius, Role.SCATTERER, i) for i, p in enumerate(pts))
    _check_geometry(tx + ris + rx, lam)
    return Scenario(const, tx, ris, rx, r.rows if ris else 0, r.cols if ris else 0,
                    spacing, center, config)


def scenario_to_config(s: Scenario) -> ScenarioConfig:
    """Serialise a scenario back to a config with every length in metres."""
    base = s.config or ScenarioConfig(s.constants.frequency)

    def arr(elems, cfg: ArrayConfig):
        if not elems:
            return replace(cfg, positions=())
        return replace(cfg, positions=tuple(e.position for e in elems),
                       length=elems[0].length, radius=elems[0].radius)

    ris = base.ris
    if s.ris:
        ris = replace(ris, rows=s.ris_rows, cols=s.ris_cols, spacing=s.ris_spacing,
                      center=tuple(s.ris_center), length=s.ris[0].length, radius=s.ris[0].radius)
    else:
        ris = replace(ris, rows=0, cols=0)
    return replace(base, frequency_hz=s.constants.frequency,
                   transmitter=arr(s.transmit, base.transmitter),
                   receiver=arr(s.receive, base.receiver), ris=ris)


@dataclass(frozen=True)
class SpacingWarning:
    i: int
    j: int
    distance: float
    threshold: float

    def __str__(self):
        return (f"elements {self.i} and {self.j} are {self.distance:.4g} m apart, below "
                f"{self.threshold:.4g} m; the sinusoidal current model may be inaccurate")


def validate_spacing(s: Scenario, threshold: float | None = None) -> list[SpacingWarning]:
    """Flag element pairs closer than ``threshold`` (default a tenth of a wavelength)."""
    if threshold is None:
        threshold = s.constants.wavelength / 10
    elems = s.elements
    if len(elems) < 2:
        return []
    pos = np.array([e.position for e in elems])
    dist = np.sqrt(((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1))
    ii, jj = np.nonzero(np.triu(dist < threshold, k=1))
    return [SpacingWarning(int(i), int(j), float(dist[i, j]), threshold) for i, j in zip(ii, jj)]
