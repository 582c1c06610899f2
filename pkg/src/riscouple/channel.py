"""Coupled port network solution and end-to-end channel matrices.

The port equations ``V = Z I`` closed with the generator, RIS and receiver
terminations form one dense complex system. Its direct solution is the
reference; the block-eliminated closed form and the far-field scalar form
are checked against it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.linalg import lapack

from .impedance import ImpedanceBlocks
from .loads import LoadNetwork

# solves whose one-norm condition estimate exceeds this are refused
MAX_CONDITION = 1e14
RANK_RTOL = 1e-10


class SingularMatrixError(np.linalg.LinAlgError):
    """A matrix that must be inverted is singular or too ill-conditioned."""

    def __init__(self, name: str, condition: float):
        self.name = name
        self.condition = condition
        super().__init__(f"{name} is singular or ill-conditioned (cond ~ {condition:.3g})")


def _factor(A: np.ndarray, name: str):
    """LU factorisation with a condition estimate; raises on singularity."""
    if A.size == 0:
        return None, 1.0
    if not np.all(np.isfinite(A)):
        raise SingularMatrixError(name, np.inf)
    lu, piv, info = lapack.zgetrf(np.asarray(A, dtype=complex))
    if info > 0:
        raise SingularMatrixError(name, np.inf)
    rcond, _ = lapack.zgecon(lu, np.linalg.norm(A, 1), norm="1")
    cond = np.inf if rcond == 0 else 1.0 / rcond
    if cond > MAX_CONDITION:
        raise SingularMatrixError(name, cond)
    return (lu, piv), cond


def _solve(A: np.ndarray, B: np.ndarray, name: str) -> np.ndarray:
    fac, _ = _factor(A, name)
    if fac is None:
        return np.zeros_like(B, dtype=complex)
    return sla.lu_solve(fac, B)


def _diag(v):
    return np.diag(np.asarray(v, dtype=complex))


def system_matrix(b: ImpedanceBlocks, n: LoadNetwork) -> np.ndarray:
    """``Z + diag(Z_G, Z_RIS, Z_L)``, the matrix acting on all port currents."""
    _check_dims(b, n)
    return b.full + _diag(np.concatenate((n.z_g, n.z_ris, n.z_l)))


def _check_dims(b: ImpedanceBlocks, n: LoadNetwork):
    if (len(n.z_g), len(n.z_ris), len(n.z_l)) != b.shape:
        raise ValueError(f"load network sizes {(len(n.z_g), len(n.z_ris), len(n.z_l))} "
                         f"do not match impedance blocks {b.shape}")


@dataclass(frozen=True)
class PortSolution:
    v_t: np.ndarray
    i_t: np.ndarray
    v_s: np.ndarray
    i_s: np.ndarray
    v_l: np.ndarray
    i_l: np.ndarray
    residual: float = 0.0
    condition: float = 1.0

    @property
    def voltages(self):
        return np.concatenate((self.v_t, self.v_s, self.v_l))

    @property
    def currents(self):
        return np.concatenate((self.i_t, self.i_s, self.i_l))


def solve_ports_direct(b: ImpedanceBlocks, n: LoadNetwork) -> PortSolution:
    """Solve ``(Z + diag(Z_G, Z_RIS, Z_L)) I = [V_G; 0; 0]`` for every port."""
    A = system_matrix(b, n)
    nt, ns, _ = b.shape
    rhs = np.concatenate((n.v_g, np.zeros(A.shape[0] - nt, complex)))
    fac, cond = _factor(A, "Z + diag(Z_G, Z_RIS, Z_L)")
    I = sla.lu_solve(fac, rhs) if fac is not None else np.zeros(0, complex)
    i_t, i_s, i_l = I[:nt], I[nt:nt + ns], I[nt + ns:]
    v_t = n.v_g - n.z_g * i_t
    v_s = -n.z_ris * i_s
    v_l = -n.z_l * i_l
    V = np.concatenate((v_t, v_s, v_l))
    scale = np.linalg.norm(V)
    residual = float(np.linalg.norm(V - b.full @ I) / scale) if scale > 0 else 0.0
    return PortSolution(v_t, i_t, v_s, i_s, v_l, i_l, residual, cond)


def pair_constitutive_check(b: ImpedanceBlocks, sol: PortSolution) -> float:
    """Largest residual of the two-port equations ``V_p = Z_pp I_p + Z_pq I_q`` (V)."""
    if sum(b.shape) != 2:
        raise ValueError(f"pair check needs exactly two elements, got {sum(b.shape)}")
    return float(np.max(np.abs(sol.voltages - b.full @ sol.currents)))


def _phi(b: ImpedanceBlocks, z_ris, coupling: bool = True) -> np.ndarray:
    z_ris = np.asarray(z_ris, dtype=complex)
    if z_ris.ndim == 2:
        z_ris = np.diag(z_ris)
    zss = b.SS if coupling else np.diag(np.diag(b.SS))
    return _solve(_diag(z_ris) + zss, np.eye(b.n_s, dtype=complex), "Z_RIS + Z_SS")


def coupling_kernel_P(x: str, y: str, b: ImpedanceBlocks, z_ris) -> np.ndarray:
    """``Z_XY - Z_XS (Z_RIS + Z_SS)^-1 Z_SY``: the X-Y coupling seen through the RIS."""
    zxy = b.block(x, y)
    if b.n_s == 0:
        return zxy.copy()
    return zxy - b.block(x, "S") @ _phi(b, z_ris) @ b.block("S", y)


@dataclass(frozen=True)
class ChannelMetrics:
    singular_values: np.ndarray
    rank: int
    frobenius: float
    entry_power: np.ndarray


def channel_metrics(H) -> ChannelMetrics:
    H = np.atleast_2d(np.asarray(H, dtype=complex))
    s = np.linalg.svd(H, compute_uv=False) if H.size else np.zeros(0)
    rank = int(np.sum(s > RANK_RTOL * s[0])) if s.size and s[0] > 0 else 0
    return ChannelMetrics(s, rank, float(np.linalg.norm(H)), np.abs(H) ** 2)


@dataclass(frozen=True)
class ChannelResult:
    """End-to-end channel and its decomposition; every matrix is ``N_r x N_t``.

    ``h_vlos`` is the RIS-mediated term ``Z_RS Phi Z_ST`` and ``h_los`` the
    direct term ``Z_RT``; ``y0`` is only set by the far-field form.
    """

    h_e2e: np.ndarray
    h_los: np.ndarray
    h_vlos: np.ndarray
    h_vlos_no_coupling: np.ndarray
    phi: np.ndarray
    method: str
    y0: complex | None = None
    residual: float = 0.0
    metrics: ChannelMetrics = field(default=None, repr=False)

    def __post_init__(self):
        if self.metrics is None:
            object.__setattr__(self, "metrics", channel_metrics(self.h_e2e))

    @property
    def singular_values(self):
        return self.metrics.singular_values


def vlos_decomposition(b: ImpedanceBlocks, n: LoadNetwork, coupling: bool = True) -> np.ndarray:
    """RIS-mediated term ``Z_RS Phi Z_ST``.

    With ``coupling=False`` the off-diagonal part of ``Z_SS`` is dropped, so
    each scatterer reradiates independently: ``sum_u Phi_uu Z_ST(u) Z_RS(u)``.
    """
    _check_dims(b, n)
    if b.n_s == 0:
        return np.zeros((b.n_r, b.n_t), complex)
    return b.RS @ _phi(b, n.z_ris, coupling) @ b.ST


def _decomposition(b, n):
    phi = _phi(b, n.z_ris) if b.n_s else np.zeros((0, 0), complex)
    return (b.RT.copy(), vlos_decomposition(b, n, True), vlos_decomposition(b, n, False), phi)


def e2e_matrix_direct(b: ImpedanceBlocks, n: LoadNetwork) -> ChannelResult:
    """``H_E2E`` column by column: one solve per unit transmit excitation."""
    A = system_matrix(b, n)
    nt, ns, nr = b.shape
    B = np.zeros((A.shape[0], nt), complex)
    B[:nt] = np.eye(nt)
    fac, _ = _factor(A, "Z + diag(Z_G, Z_RIS, Z_L)")
    X = sla.lu_solve(fac, B) if fac is not None else np.zeros_like(B)
    residual = float(np.linalg.norm(A @ X - B) / np.linalg.norm(B)) if nt else 0.0
    H = -n.z_l[:, None] * X[nt + ns:]
    los, vlos, vlos_nc, phi = _decomposition(b, n)
    return ChannelResult(H, los, vlos, vlos_nc, phi, "direct", residual=residual)


def e2e_closed_form(b: ImpedanceBlocks, n: LoadNetwork) -> ChannelResult:
    """``H = (I + P_RSR Z_L^-1 - P_RST P_GTST^-1 P_TSR Z_L^-1)^-1 P_RST P_GTST^-1``.

    ``P_XSY`` are the RIS-eliminated couplings (:func:`coupling_kernel_P`) and
    ``P_GTST = Z_G + P_TST``.
    """
    _check_dims(b, n)
    nt, _, nr = b.shape
    if np.any(n.z_l == 0):
        raise SingularMatrixError("Z_L", np.inf)
    p_tst = coupling_kernel_P("T", "T", b, n.z_ris)
    p_tsr = coupling_kernel_P("T", "R", b, n.z_ris)
    p_rst = coupling_kernel_P("R", "T", b, n.z_ris)
    p_rsr = coupling_kernel_P("R", "R", b, n.z_ris)
    zl_inv = _diag(1.0 / n.z_l)
    # P_RST P_GTST^-1 computed as a solve against the transpose
    g = _solve((_diag(n.z_g) + p_tst).T, p_rst.T, "P_GTST").T
    M = np.eye(nr) + p_rsr @ zl_inv - g @ p_tsr @ zl_inv
    H = _solve(M, g, "I + P_RSR Z_L^-1 - P_RST P_GTST^-1 P_TSR Z_L^-1")
    los, vlos, vlos_nc, phi = _decomposition(b, n)
    return ChannelResult(H, los, vlos, vlos_nc, phi, "closed_form")


def far_field_siso(b: ImpedanceBlocks, n: LoadNetwork) -> ChannelResult:
    """Single-antenna link with weak Tx/Rx/RIS interaction: ``Y0 (Z_RT - Z_RS Phi Z_ST)``.

    ``Y0 = Z_L / ((Z_L + Z_RR)(Z_G + Z_TT))``.
    """
    if b.n_t != 1 or b.n_r != 1:
        raise ValueError(f"far-field form needs N_t = N_r = 1, got {b.n_t} and {b.n_r}")
    _check_dims(b, n)
    zl, zg = n.z_l[0], n.z_g[0]
    y0 = zl / ((zl + b.RR[0, 0]) * (zg + b.TT[0, 0]))
    los, vlos, vlos_nc, phi = _decomposition(b, n)
    H = y0 * (los - vlos)
    return ChannelResult(H, los, vlos, vlos_nc, phi, "far_field", y0=complex(y0))


def max_relative_discrepancy(A, B) -> float:
    """Largest entrywise ``|A - B| / |B|``."""
    A, B = np.asarray(A), np.asarray(B)
    if A.size == 0:
        return 0.0
    return float(np.max(np.abs(A - B) / np.abs(B)))
