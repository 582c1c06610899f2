"""RIS load tuning: projected gradient ascent on the tunable reactances.

Each RIS element is terminated by ``R_u + j X_u`` with a fixed resistance.
The objective is the received-power proxy ``|H_VLOS|^2`` (Frobenius norm
for MIMO links) or one entry of ``|H_E2E|^2``. Gradients follow from the
resolvent identity ``dPhi/dX_u = -Phi (j e_u e_u^T) Phi``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg as sla

from .channel import SingularMatrixError, _factor, system_matrix
from .impedance import ImpedanceBlocks
from .loads import LoadNetwork

log = logging.getLogger(__name__)

OBJECTIVES = ("vlos_power", "e2e_entry_power")
PARAMETERIZATIONS = ("reactance", "inductance")
ARMIJO_C = 1e-4
MAX_BACKTRACK = 60


class NoFeasibleStart(RuntimeError):
    """Every multi-start point gave a singular or non-finite objective."""


def decouple_ris(b: ImpedanceBlocks) -> ImpedanceBlocks:
    """Blocks with the RIS-RIS coupling removed (``Z_SS`` replaced by its diagonal)."""
    full = b.full.copy()
    s = b._slice("S")
    zss = full[s, s]
    full[s, s] = np.diag(np.diag(zss))
    return ImpedanceBlocks(full, b.n_t, b.n_s, b.n_r, b.errors, dict(b.meta))


def _resolvent(b: ImpedanceBlocks, loads) -> np.ndarray:
    A = b.SS + np.diag(np.asarray(loads, dtype=complex))
    fac, _ = _factor(A, "Z_RIS + Z_SS")
    return sla.lu_solve(fac, np.eye(b.n_s, dtype=complex))


def objective_vlos_power(loads, blocks: ImpedanceBlocks) -> float:
    """``||Z_RS (Z_RIS + Z_SS)^-1 Z_ST||_F^2``; ``|H_VLOS|^2`` for a single link."""
    if blocks.n_s == 0:
        return 0.0
    H = blocks.RS @ _resolvent(blocks, loads) @ blocks.ST
    return float(np.sum(np.abs(H) ** 2))


def _vlos_value_grad(loads, b: ImpedanceBlocks):
    """Objective, gradient and Hessian diagonal of ``||Z_RS Phi Z_ST||_F^2``."""
    phi = _resolvent(b, loads)
    W = b.RS @ phi
    V = phi @ b.ST
    H = W @ b.ST
    # dH/dX_u = -j W[:, u] V[u, :],  d2H/dX_u^2 = -2 Phi_uu W[:, u] V[u, :]
    e = np.einsum("rt,ru,ut->u", H.conj(), W, V)
    g = 2 * np.real(-1j * e)
    hd = 2 * np.sum(np.abs(W) ** 2, axis=0) * np.sum(np.abs(V) ** 2, axis=1) \
        + 2 * np.real(-2 * np.diag(phi) * e)
    return float(np.sum(np.abs(H) ** 2)), g, hd


def _e2e_value_grad(loads, b: ImpedanceBlocks, net: LoadNetwork, entry):
    """Objective, gradient and Hessian diagonal of ``|H_E2E[r, t]|^2``."""
    r, t = entry
    A = system_matrix(b, net.with_ris(loads))
    fac, _ = _factor(A, "Z + diag(Z_G, Z_RIS, Z_L)")
    n_t, n_s, _ = b.shape
    row = n_t + n_s + r
    s = slice(n_t, n_t + n_s)
    e_t = np.zeros(A.shape[0], complex)
    e_t[t] = 1.0
    e_r = np.zeros(A.shape[0], complex)
    e_r[row] = 1.0
    col = sla.lu_solve(fac, e_t)            # A^-1 e_t
    rowv = sla.lu_solve(fac, e_r, trans=1)  # (e_r^T A^-1)^T
    E_s = np.zeros((A.shape[0], n_s), complex)
    E_s[s] = np.eye(n_s)
    c = np.diag(sla.lu_solve(fac, E_s)[s])  # diagonal of A^-1 on the RIS ports
    h = -net.z_l[r] * col[row]
    ab = rowv[s] * col[s]
    dh = 1j * net.z_l[r] * ab
    d2h = 2 * net.z_l[r] * c * ab
    hd = 2 * np.abs(dh) ** 2 + 2 * np.real(np.conj(h) * d2h)
    return float(abs(h) ** 2), 2 * np.real(np.conj(h) * dh), hd


def gradient_objective(loads, blocks: ImpedanceBlocks, objective: str = "vlos_power",
                       network: LoadNetwork | None = None, entry=(0, 0)) -> np.ndarray:
    """Analytic derivative of the objective with respect to each reactance (1/ohm units of the objective)."""
    return _value_grad(loads, blocks, objective, network, entry)[1]


def hessian_diagonal(loads, blocks: ImpedanceBlocks, objective: str = "vlos_power",
                     network: LoadNetwork | None = None, entry=(0, 0)) -> np.ndarray:
    """Second derivatives ``d2 objective / dX_u^2``."""
    return _value_grad(loads, blocks, objective, network, entry)[2]


def objective_value(loads, blocks, objective="vlos_power", network=None, entry=(0, 0)) -> float:
    if objective == "vlos_power":
        return objective_vlos_power(loads, blocks)
    return _value_grad(loads, blocks, objective, network, entry)[0]


def _value_grad(loads, blocks, objective, network, entry):
    if objective == "vlos_power":
        if blocks.n_s == 0:
            return 0.0, np.zeros(0), np.zeros(0)
        return _vlos_value_grad(loads, blocks)
    if objective == "e2e_entry_power":
        if network is None:
            raise ValueError("e2e_entry_power needs the load network")
        return _e2e_value_grad(loads, blocks, network, entry)
    raise ValueError(f"unknown objective {objective!r}")


@dataclass(frozen=True)
class OptimizationProblem:
    """Tunable RIS reactances ``X_u`` with fixed resistances ``R_u``.

    In ``inductance`` mode the variable is ``L_u >= 0`` with ``X_u = omega L_u``,
    i.e. the reactance is confined to ``[max(0, x_min), x_max]``.
    """

    n_ris: int
    resistance: float | tuple = 1.0
    x_min: float = -1000.0
    x_max: float = 1000.0
    parameterization: str = "reactance"
    omega: float | None = None
    objective: str = "vlos_power"
    coupling_aware: bool = True
    entry: tuple = (0, 0)
    network: LoadNetwork | None = field(default=None, repr=False)
    max_iter: int = 500
    step_tol: float = 1e-9
    obj_tol: float = 1e-14
    n_starts: int = 8
    seed: int = 0
    x0: tuple | None = None

    def __post_init__(self):
        if not (math.isfinite(self.x_min) and math.isfinite(self.x_max) and self.x_min < self.x_max):
            raise ValueError(f"reactance bounds must be finite and ordered, got [{self.x_min}, {self.x_max}]")
        if self.parameterization not in PARAMETERIZATIONS:
            raise ValueError(f"parameterization must be one of {PARAMETERIZATIONS}")
        if self.parameterization == "inductance":
            if self.omega is None or self.omega <= 0:
                raise ValueError("inductance mode needs omega > 0")
            if self.x_max <= 0:
                raise ValueError("inductance mode needs x_max > 0")
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if np.any(self.resistances < 0):
            raise ValueError("fixed resistances must be >= 0")
        if self.n_starts < 1 or self.max_iter < 1:
            raise ValueError("n_starts and max_iter must be >= 1")
        if self.x0 is not None and len(self.x0) != self.n_ris:
            raise ValueError(f"x0 has {len(self.x0)} entries, expected {self.n_ris}")

    @property
    def resistances(self) -> np.ndarray:
        r = np.asarray(self.resistance, dtype=float)
        return np.broadcast_to(r, (self.n_ris,)).copy() if r.ndim == 0 else r

    @property
    def bounds(self) -> tuple[float, float]:
        lo = max(0.0, self.x_min) if self.parameterization == "inductance" else self.x_min
        return lo, self.x_max

    def loads(self, x) -> np.ndarray:
        return self.resistances + 1j * np.asarray(x, dtype=float)


@dataclass(frozen=True)
class OptimizationResult:
    loads: np.ndarray
    reactances: np.ndarray
    objective: float
    trajectory: tuple
    iterations: int
    converged: bool
    start_index: int
    start_objectives: tuple
    seed: int
    wall_s: float
    inductances: np.ndarray | None = None

    def to_dict(self) -> dict:
        d = {
            "loads_re": self.loads.real.tolist(), "loads_im": self.loads.imag.tolist(),
            "reactances": self.reactances.tolist(), "objective": self.objective,
            "trajectory": list(self.trajectory), "iterations": self.iterations,
            "converged": self.converged, "start_index": self.start_index,
            "start_objectives": list(self.start_objectives), "seed": self.seed,
        }
        if self.inductances is not None:
            d["inductances"] = self.inductances.tolist()
        return d


class _Evaluator:
    def __init__(self, p: OptimizationProblem, blocks: ImpedanceBlocks):
        self.p = p
        self.blocks = blocks if p.coupling_aware else decouple_ris(blocks)

    def __call__(self, x):
        """Objective, gradient and Hessian diagonal, or ``None`` at an invalid point."""
        try:
            f, g, hd = _value_grad(self.p.loads(x), self.blocks, self.p.objective,
                                   self.p.network, self.p.entry)
        except (SingularMatrixError, np.linalg.LinAlgError):
            return None
        if not (math.isfinite(f) and np.all(np.isfinite(g)) and np.all(np.isfinite(hd))):
            return None
        return f, g, hd


def _log_derivatives(f, g, hd):
    """Gradient and Hessian diagonal of ``log f`` (of ``f`` itself when f = 0)."""
    if f > 0:
        gl = g / f
        return gl, hd / f - gl * gl
    return g, hd


def _ascend(ev: _Evaluator, x, lo, hi, p: OptimizationProblem):
    """One projected-gradient run from ``x`` maximising ``log f``.

    The gradient is scaled by the inverse magnitude of the Hessian diagonal
    (a diagonal metric, so projection onto the box stays a clip). Steps are
    accepted by Armijo backtracking and only if the objective does not drop.
    """
    res = ev(x)
    if res is None:
        return None
    f, g, hd = res
    traj = [f]
    alpha = 1.0
    converged = False
    flat = 0
    it = 0
    for it in range(1, p.max_iter + 1):
        gl, hl = _log_derivatives(f, g, hd)
        curv = np.abs(hl)
        curv = np.maximum(curv, 1e-12 * np.max(curv, initial=0.0) + 1e-300)
        direction = gl / curv
        alpha = min(1.0, 4 * alpha)
        accepted = False
        for _ in range(MAX_BACKTRACK):
            xc = np.clip(x + alpha * direction, lo, hi)
            step = xc - x
            if np.max(np.abs(step), initial=0.0) < p.step_tol:
                break
            res = ev(xc)
            if res is not None:
                if res[0] > 0 and f > 0:
                    ok = math.log(res[0]) >= math.log(f) + ARMIJO_C * float(gl @ step)
                else:
                    ok = res[0] >= f + ARMIJO_C * float(gl @ step)
                if ok and res[0] >= f:
                    accepted = True
                    break
            alpha *= 0.5
        if not accepted:
            converged = True
            break
        gain = (res[0] - f) / f if f > 0 else math.inf
        x, (f, g, hd) = xc, res
        traj.append(f)
        if np.max(np.abs(step)) < p.step_tol:
            converged = True
            break
        flat = flat + 1 if gain < p.obj_tol else 0
        if flat >= 3:
            converged = True
            break
    return x, f, tuple(traj), it, converged


def _starts(p: OptimizationProblem, lo, hi):
    rng = np.random.default_rng(p.seed)
    starts = [] if p.x0 is None else [np.clip(np.asarray(p.x0, float), lo, hi)]
    while len(starts) < p.n_starts:
        starts.append(rng.uniform(lo, hi, p.n_ris))
    return starts


def optimize_ris_loads(p: OptimizationProblem, blocks: ImpedanceBlocks) -> OptimizationResult:
    """Multi-start projected gradient ascent; the best run is reported.

    Starts are drawn uniformly over the bounds from ``default_rng(seed)``
    (preceded by ``x0`` when given), so the result is deterministic.
    """
    if blocks.n_s != p.n_ris:
        raise ValueError(f"problem has {p.n_ris} RIS elements, blocks have {blocks.n_s}")
    t0 = time.perf_counter()
    lo, hi = p.bounds
    ev = _Evaluator(p, blocks)
    best = None
    finals = []
    for i, x in enumerate(_starts(p, lo, hi)):
        out = _ascend(ev, x, lo, hi, p)
        if out is None:
            finals.append(float("nan"))
            continue
        finals.append(out[1])
        log.debug("start %d: objective %.6g after %d iterations", i, out[1], out[3])
        if best is None or out[1] > best[1][1]:
            best = (i, out)
    if best is None:
        raise NoFeasibleStart(f"no feasible nonsingular start among {len(finals)} starts "
                              f"(seed {p.seed})")
    i, (x, f, traj, iters, converged) = best
    induct = x / p.omega if p.parameterization == "inductance" else None
    return OptimizationResult(p.loads(x), x.copy(), f, traj, iters, converged, i,
                              tuple(finals), p.seed, time.perf_counter() - t0, induct)


@dataclass(frozen=True)
class CouplingComparison:
    aware: OptimizationResult
    unaware: OptimizationResult
    aware_objective: float
    unaware_objective: float


def compare_coupling_awareness(p: OptimizationProblem, blocks: ImpedanceBlocks) -> CouplingComparison:
    """Optimise with and without RIS-RIS coupling; score both under the coupled model.

    The coupling-unaware optimum is also used as a warm start of the
    coupling-aware search, so the aware optimum can only do better.
    """
    unaware = optimize_ris_loads(replace(p, coupling_aware=False), blocks)
    aware = optimize_ris_loads(replace(p, coupling_aware=True, x0=tuple(unaware.reactances)), blocks)

    def score(res):
        return objective_value(res.loads, blocks, p.objective, p.network, p.entry)

    return CouplingComparison(aware, unaware, score(aware), score(unaware))
