"""Port terminations: generators, receiver loads and RIS tuning circuits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenario import ConfigError, LoadConfig, Scenario


@dataclass(frozen=True)
class PinDiodeParams:
    """Lumped PIN diode model; ``C`` is only used in reverse bias."""

    R: float
    L: float
    C: float = 0.0
    bias: str = "forward"

    def __post_init__(self):
        if self.R < 0 or self.L < 0 or self.C < 0:
            raise ValueError(f"PIN diode R, L, C must be >= 0, got {self.R}, {self.L}, {self.C}")
        if self.bias not in ("forward", "reverse"):
            raise ValueError(f"bias must be 'forward' or 'reverse', got {self.bias!r}")

    def impedance(self, omega: float) -> complex:
        if self.bias == "forward":
            return pin_series(self.R, self.L, omega)
        return pin_parallel(self.R, self.C, self.L, omega)


def pin_series(R: float, L: float, omega: float) -> complex:
    """Forward-biased diode: ``R + j w L``."""
    if R < 0 or L < 0:
        raise ValueError("R and L must be >= 0")
    if not omega > 0:
        raise ValueError("omega must be > 0")
    return complex(R, omega * L)


def pin_parallel(R: float, C: float, L: float, omega: float) -> complex:
    """Reverse-biased diode: ``R || C`` in series with ``L``.

    ``R = inf`` is allowed and leaves the ideal series LC.
    """
    if R < 0 or C < 0 or L < 0:
        raise ValueError("R, C and L must be >= 0")
    if not omega > 0:
        raise ValueError("omega must be > 0")
    if C == 0:
        if R == 0 or np.isinf(R):
            raise ValueError("degenerate parallel branch: needs 0 < R < inf when C = 0")
        return pin_series(R, L, omega)
    conductance = 0.0 if np.isinf(R) else (np.inf if R == 0 else 1.0 / R)
    if np.isinf(conductance):
        z_par = 0j
    else:
        z_par = 1.0 / complex(conductance, omega * C)
    return z_par + 1j * omega * L


def build_ris_load_matrix(params, omega: float) -> np.ndarray:
    """Diagonal ``Z_RIS`` from per-element diode parameters or complex loads."""
    z = np.array([p.impedance(omega) if isinstance(p, PinDiodeParams) else complex(p)
                  for p in params], dtype=complex)
    if np.any(z.real < 0):
        bad = int(np.flatnonzero(z.real < 0)[0])
        raise ValueError(f"RIS load {bad} has negative resistance {z.real[bad]:g} ohm")
    return np.diag(z)


@dataclass(frozen=True)
class LoadNetwork:
    """Diagonal terminations (stored as their diagonals) and the excitation."""

    z_g: np.ndarray
    z_ris: np.ndarray
    z_l: np.ndarray
    v_g: np.ndarray

    def __post_init__(self):
        for name in ("z_g", "z_ris", "z_l", "v_g"):
            arr = np.array(getattr(self, name), dtype=complex).ravel()
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if len(self.v_g) != len(self.z_g):
            raise ValueError("v_g and z_g must have one entry per transmit antenna")
        if np.any(self.z_ris.real < 0):
            raise ValueError("RIS loads must be passive (Re >= 0)")

    @property
    def Z_G(self):
        return np.diag(self.z_g)

    @property
    def Z_RIS(self):
        return np.diag(self.z_ris)

    @property
    def Z_L(self):
        return np.diag(self.z_l)

    def with_ris(self, z_ris) -> "LoadNetwork":
        return LoadNetwork(self.z_g, z_ris, self.z_l, self.v_g)

    def with_excitation(self, v_g) -> "LoadNetwork":
        return LoadNetwork(self.z_g, self.z_ris, self.z_l, v_g)


def default_excitation(n_t: int) -> np.ndarray:
    """1 V on the first transmit port, 0 elsewhere."""
    v = np.zeros(n_t, complex)
    if n_t:
        v[0] = 1.0
    return v


def ris_loads_from_config(load: LoadConfig, n_ris: int, omega: float) -> np.ndarray:
    """Per-element RIS impedances for a ``[ris.load]`` section."""
    if load.mode == "explicit":
        if len(load.impedances) != n_ris:
            raise ConfigError(f"ris.load.impedances has {len(load.impedances)} entries, "
                              f"expected {n_ris}")
        params = list(load.impedances)
    else:
        bias = "forward" if load.mode == "series" else "reverse"
        params = [PinDiodeParams(load.resistance, load.inductance, load.capacitance, bias)] * n_ris
    for o in load.overrides:
        if not 0 <= o.index < n_ris:
            raise ConfigError(f"ris.load.override index {o.index} out of range")
        if o.impedance is not None:
            params[o.index] = o.impedance
        else:
            base = params[o.index]
            if not isinstance(base, PinDiodeParams):
                raise ConfigError("circuit overrides need mode = series or parallel")
            params[o.index] = PinDiodeParams(
                base.R if o.resistance is None else float(o.resistance),
                base.L if o.inductance is None else float(o.inductance),
                base.C if o.capacitance is None else float(o.capacitance),
                base.bias)
    try:
        return np.diag(build_ris_load_matrix(params, omega)).copy()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def load_network(s: Scenario) -> LoadNetwork:
    """Terminations described by the scenario's configuration."""
    cfg = s.config
    if cfg is None:
        raise ValueError("scenario has no configuration to read loads from")

    def per_element(value, n):
        vals = value if isinstance(value, tuple) else (value,) * n
        return np.array(vals[:n] if n else [], dtype=complex)

    z_g = per_element(cfg.transmitter.impedance, s.n_t)
    z_l = per_element(cfg.receiver.impedance, s.n_r)
    v_g = (np.array(cfg.transmitter.voltages, dtype=complex)
           if cfg.transmitter.voltages is not None else default_excitation(s.n_t))
    z_ris = ris_loads_from_config(cfg.ris.load, s.n_ris, s.constants.omega) if s.n_ris else np.zeros(0)
    return LoadNetwork(z_g, z_ris, z_l, v_g)
