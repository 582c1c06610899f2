"""Gauss-Legendre panel rules and a batched adaptive integrator.

Both the impedance assembly and the field evaluation integrate smooth but
sharply peaked complex kernels along straight wires. Everything here works on
plain numpy arrays so that many integrals can be advanced in lock step.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np


class QuadratureError(RuntimeError):
    """Raised when an integral does not reach the requested tolerance."""


@dataclass(frozen=True)
class QuadratureSpec:
    """Accuracy knobs shared by every integral in the package.

    Parameters
    ----------
    order : int
        Gauss-Legendre points per panel.
    rtol : float
        Target relative error of each integral.
    max_subdivisions : int
        How many times the panel layout may be halved (fixed rules) or how
        deep the bisection may go (adaptive rules).
    near_panel_width : float or None
        Width (m) of the panels placed around a near singularity of the
        kernel. ``None`` uses the wire radius.
    """

    order: int = 16
    rtol: float = 1e-9
    max_subdivisions: int = 8
    near_panel_width: float | None = None

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 2:
            raise ValueError(f"quadrature order must be an integer >= 2, got {self.order}")
        if not self.rtol > 0:
            raise ValueError(f"quadrature rtol must be > 0, got {self.rtol}")
        if self.max_subdivisions < 0:
            raise ValueError("max_subdivisions must be >= 0")
        if self.near_panel_width is not None and not self.near_panel_width > 0:
            raise ValueError("near_panel_width must be > 0 when given")

    def to_dict(self) -> dict:
        return asdict(self)

    def with_rtol(self, rtol: float) -> "QuadratureSpec":
        return QuadratureSpec(self.order, rtol, self.max_subdivisions, self.near_panel_width)


@lru_cache(maxsize=64)
def gauss_legendre(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights on [-1, 1]; cached and read-only."""
    x, w = np.polynomial.legendre.leggauss(order)
    x.setflags(write=False)
    w.setflags(write=False)
    return x, w


def panel_rule(breaks, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Composite rule over consecutive panels ``breaks[i]..breaks[i+1]``."""
    breaks = np.asarray(breaks, dtype=float)
    x, w = gauss_legendre(order)
    half = 0.5 * np.diff(breaks)
    mid = 0.5 * (breaks[1:] + breaks[:-1])
    nodes = mid[:, None] + half[:, None] * x[None, :]
    weights = half[:, None] * w[None, :]
    return nodes.ravel(), weights.ravel()


def graded_breaks(lo: float, hi: float, centers, width: float, h_max: float) -> np.ndarray:
    """Breakpoints on [lo, hi] refined around ``centers``.

    Around every center, panels of width ``width`` are laid out to ten widths
    on either side, after which they grow geometrically until they reach
    ``h_max``. Any remaining gap is split uniformly into panels <= ``h_max``.
    """
    pts = [lo, hi]
    if width > 0:
        offsets = list(width * np.arange(1, 11))
        panel = width
        while panel < h_max:
            panel = min(2 * panel, h_max)
            offsets.append(offsets[-1] + panel)
        offsets = np.asarray(offsets)
        for c in centers:
            if c < lo - offsets[-1] or c > hi + offsets[-1]:
                continue
            cand = np.concatenate(([c], c - offsets, c + offsets))
            pts.extend(cand[(cand > lo) & (cand < hi)])
    pts = np.unique(np.asarray(pts, dtype=float))
    # drop slivers that would only add cancellation noise
    span = hi - lo
    keep = np.concatenate(([True], np.diff(pts) > 1e-9 * span))
    pts = pts[keep]
    pts[-1] = hi
    out = [pts[0]]
    for a, b in zip(pts[:-1], pts[1:]):
        n = max(1, int(np.ceil((b - a) / h_max - 1e-9)))
        out.extend(np.linspace(a, b, n + 1)[1:])
    return np.asarray(out)


def adaptive_integrate(f, task_breaks, order: int = 16, rtol: float = 1e-9,
                       atol: float = 0.0, max_depth: int = 30):
    """Integrate many complex 1-D integrands together by panel bisection.

    Parameters
    ----------
    f : callable
        ``f(task, z)`` returns the integrand values for the integral indices
        ``task`` at abscissae ``z`` (both 1-D arrays of equal length).
    task_breaks : sequence of 1-D arrays
        Initial breakpoints of every integral.

    Returns
    -------
    values, errors, panels : ndarray
        Integral values, error estimates and the final panel count per task.

    A panel is split while its two-halves estimate differs from the whole
    panel estimate by more than its length-proportional share of the task
    tolerance. Raises :class:`QuadratureError` past ``max_depth`` levels.
    """
    x, w = gauss_legendre(order)
    n_tasks = len(task_breaks)
    tasks, lo, hi = [], [], []
    for i, br in enumerate(task_breaks):
        br = np.asarray(br, dtype=float)
        tasks.append(np.full(len(br) - 1, i))
        lo.append(br[:-1])
        hi.append(br[1:])
    tasks = np.concatenate(tasks) if tasks else np.zeros(0, int)
    lo = np.concatenate(lo) if lo else np.zeros(0)
    hi = np.concatenate(hi) if hi else np.zeros(0)
    length = np.zeros(n_tasks)
    np.add.at(length, tasks, hi - lo)

    def rule(t, a, b):
        half = 0.5 * (b - a)
        z = 0.5 * (a + b)[:, None] + half[:, None] * x[None, :]
        vals = f(np.repeat(t, order), z.ravel()).reshape(z.shape)
        return half * (vals @ w), half * (np.abs(vals) @ w)

    whole, _ = rule(tasks, lo, hi)
    done_val = np.zeros(n_tasks, complex)
    done_err = np.zeros(n_tasks)
    done_abs = np.zeros(n_tasks)
    panels = np.zeros(n_tasks, int)

    def accumulate(target, idx, vals):
        if np.iscomplexobj(target):
            target += np.bincount(idx, vals.real, n_tasks) + 1j * np.bincount(idx, vals.imag, n_tasks)
        else:
            target += np.bincount(idx, vals, n_tasks)

    for _ in range(max_depth + 1):
        if tasks.size == 0:
            break
        mid = 0.5 * (lo + hi)
        left, labs = rule(tasks, lo, mid)
        right, rabs = rule(tasks, mid, hi)
        fine = left + right
        err = np.abs(fine - whole)
        absint = labs + rabs

        tot_val = done_val.copy()
        accumulate(tot_val, tasks, fine)
        tot_err = done_err.copy()
        accumulate(tot_err, tasks, err)
        tot_abs = done_abs.copy()
        accumulate(tot_abs, tasks, absint)
        floor = 64 * np.finfo(float).eps * tot_abs
        limit = np.maximum(np.maximum(rtol * np.abs(tot_val), atol), floor)
        task_ok = tot_err <= limit
        share = limit[tasks] * (hi - lo) / length[tasks]
        panel_ok = task_ok[tasks] | (err <= share)

        accumulate(done_val, tasks[panel_ok], fine[panel_ok])
        accumulate(done_err, tasks[panel_ok], err[panel_ok])
        accumulate(done_abs, tasks[panel_ok], absint[panel_ok])
        np.add.at(panels, tasks[panel_ok], 2)

        split = ~panel_ok
        t, a, m, b = tasks[split], lo[split], mid[split], hi[split]
        tasks = np.concatenate((t, t))
        lo = np.concatenate((a, m))
        hi = np.concatenate((m, b))
        whole = np.concatenate((left[split], right[split]))
    else:
        bad = np.unique(tasks)
        raise QuadratureError(
            f"adaptive quadrature did not converge to rtol={rtol:g} within "
            f"{max_depth} bisections (integrals {bad[:10].tolist()})")
    return done_val, done_err, panels
