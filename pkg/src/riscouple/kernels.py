"""Thin-wire kernels: current profile, Green function, field factor, radiated field.

Time convention is ``exp(+j w t)``, so outgoing waves carry ``exp(-j k0 R)``.
All functions broadcast over numpy arrays of axial coordinates.
"""

from __future__ import annotations

import math

import numpy as np

from .quadrature import QuadratureSpec, adaptive_integrate, graded_breaks
from .scenario import POSITION_TOL_WAVELENGTHS, WireElement

# |sin(k0 l / 2)| below this makes the unit-port-current profile undefined
RESONANCE_GUARD = 1e-12


class ResonantElementError(ValueError):
    """The element length makes sin(k0 l / 2) vanish."""


def profile_denominator(e: WireElement, k0: float) -> float:
    s = math.sin(k0 * e.half_length)
    if abs(s) < RESONANCE_GUARD:
        raise ResonantElementError(
            f"sin(k0 l/2) = {s:.3g}: element length {e.length:g} m is a multiple of the wavelength")
    return s


def current_profile(zp, e: WireElement, k0: float):
    """Sinusoidal axial current for a unit port current.

    Equal to 1 at the feed and exactly 0 at both wire ends.
    """
    zp = np.asarray(zp, dtype=float)
    h = e.half_length
    u = np.abs(zp - e.z)
    if np.any(u > h * (1 + 1e-12)):
        raise ValueError(f"axial coordinate outside the wire span [{e.z - h}, {e.z + h}]")
    return np.sin(k0 * (h - np.minimum(u, h))) / profile_denominator(e, k0)


def _on_axis(dx, dy, tol):
    return np.hypot(dx, dy) <= tol


def distance_R(r, e: WireElement, zp, wavelength: float | None = None):
    """Source-to-observation distance for a point on the wire axis at ``zp``.

    On the wire's own axis the distance is measured to the wire surface,
    ``sqrt(a^2 + (z - zp)^2)``. ``wavelength`` sets the tolerance of the
    on-axis test (1e-12 wavelengths); without it equality is exact.
    """
    r = np.asarray(r, dtype=float)
    dx = r[..., 0] - e.x
    dy = r[..., 1] - e.y
    dz = r[..., 2] - np.asarray(zp, dtype=float)
    tol = 0.0 if wavelength is None else POSITION_TOL_WAVELENGTHS * wavelength
    rho2 = np.where(_on_axis(dx, dy, tol), e.radius ** 2, dx * dx + dy * dy)
    return np.sqrt(rho2 + dz * dz)


def scalar_green(r, e: WireElement, zp, k0: float):
    R = distance_R(r, e, zp, 2 * math.pi / k0)
    return np.exp(-1j * k0 * R) / R


def _field_factor(dz, R, k0):
    q = dz * dz / (R * R)
    return q * (3 / (R * R) + 3j * k0 / R - k0 * k0) - (1j * k0 + 1 / R) / R + k0 * k0


def field_factor(r, e: WireElement, zp, k0: float):
    """Differential operator (d^2/dz^2 + k0^2) applied to G, divided by G."""
    r = np.asarray(r, dtype=float)
    R = distance_R(r, e, zp, 2 * math.pi / k0)
    dz = r[..., 2] - np.asarray(zp, dtype=float)
    return _field_factor(dz, R, k0)


def kernel_FG(rho2, dz, k0):
    """``F * G`` from squared transverse distance and axial offset."""
    R = np.sqrt(rho2 + dz * dz)
    return _field_factor(dz, R, k0) * np.exp(-1j * k0 * R) / R


def field_breaks(e: WireElement, z_obs: float, rho_eff: float, h_max: float,
                 near_width: float | None = None) -> np.ndarray:
    """Initial panel breakpoints on the source wire for one observation point."""
    lo, hi = e.z - e.half_length, e.z + e.half_length
    centers = [e.z]
    if rho_eff < 4 * h_max:
        centers.append(min(max(z_obs, lo), hi))
    width = near_width or rho_eff
    br = graded_breaks(lo, hi, centers, min(width, h_max), h_max)
    if e.z not in br:
        br = np.unique(np.append(br, e.z))
    return br


def radiated_field_z(r, e: WireElement, port_current: complex, k0: float, eta0: float,
                     quad: QuadratureSpec = QuadratureSpec()):
    """Axial electric field (V/m) radiated by ``e`` carrying ``port_current``.

    ``r`` is one point ``(3,)`` or an array of points ``(n, 3)``. The integral
    over the source wire is computed adaptively, with initial panels graded
    toward the projection of each observation point on the wire.
    """
    r = np.asarray(r, dtype=float)
    single = r.ndim == 1
    pts = np.atleast_2d(r)
    lam = 2 * math.pi / k0
    dx = pts[:, 0] - e.x
    dy = pts[:, 1] - e.y
    on_axis = _on_axis(dx, dy, POSITION_TOL_WAVELENGTHS * lam)
    rho2 = np.where(on_axis, e.radius ** 2, dx * dx + dy * dy)
    rho = np.sqrt(rho2)
    zo = pts[:, 2]
    h_max = min(lam / 8, e.length / 4)
    breaks = [field_breaks(e, z, rr, h_max, quad.near_panel_width) for z, rr in zip(zo, rho)]
    denom = profile_denominator(e, k0)
    h = e.half_length

    def integrand(task, zp):
        prof = np.sin(k0 * (h - np.minimum(np.abs(zp - e.z), h))) / denom
        return kernel_FG(rho2[task], zo[task] - zp, k0) * prof

    vals, _, _ = adaptive_integrate(integrand, breaks, quad.order, quad.rtol,
                                    max_depth=quad.max_subdivisions + 30)
    c_e = -1j * eta0 / (4 * math.pi * k0)
    field = c_e * port_current * vals
    return complex(field[0]) if single else field
