"""Self and mutual impedances of parallel thin wires and their block assembly.

The production path evaluates the double integral of the reaction kernel
``j eta0 / (4 pi k0) * F * G`` weighted by both sinusoidal current profiles.
Well separated pairs use a tensor Gauss-Legendre rule; self terms and nearly
collinear pairs, whose kernel is peaked along ``z' = z''`` with width equal to
the wire radius, use a nested rule whose inner panels follow the peak.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import kernel_FG, profile_denominator, radiated_field_z
from .quadrature import (QuadratureError, QuadratureSpec, adaptive_integrate,
                         gauss_legendre, graded_breaks, panel_rule)
from .scenario import POSITION_TOL_WAVELENGTHS, Scenario, WireElement

log = logging.getLogger(__name__)

GROUPS = ("T", "S", "R")
# pairs closer than (longest wire)/NEAR_RATIO use the nested rule
NEAR_RATIO = 16
_CHUNK_EVALS = 2_000_000


@dataclass(frozen=True)
class MutualImpedance:
    value: complex
    p: int = 0
    q: int = 0
    panels: int = 0
    error: float = 0.0


# ----------------------------------------------------------------------------
# pair tasks

@dataclass
class _Tasks:
    """Struct-of-arrays description of pair integrals, source at z = 0."""

    hp: np.ndarray      # source half length
    hq: np.ndarray      # observer half length
    rho2: np.ndarray    # squared transverse distance (radius^2 on axis)
    dz: np.ndarray      # observer centre minus source centre

    def __len__(self):
        return len(self.hp)

    def take(self, idx):
        return _Tasks(self.hp[idx], self.hq[idx], self.rho2[idx], self.dz[idx])


def _pair_geometry(p: WireElement, q: WireElement, wavelength: float):
    dx, dy = q.x - p.x, q.y - p.y
    rho = math.hypot(dx, dy)
    if rho <= POSITION_TOL_WAVELENGTHS * wavelength:
        rho = p.radius
    return rho * rho, q.z - p.z


def _lower_order(order: int) -> int:
    """Companion rule used for the error estimate; always strictly lower."""
    return max(1, min(order - 1, (3 * order) // 4))


def _tensor_reference(panels_per_half: int, order: int):
    br = np.concatenate((np.linspace(-1, 0, panels_per_half + 1),
                         np.linspace(0, 1, panels_per_half + 1)[1:]))
    return panel_rule(br, order)


def _tensor_sum(t: _Tasks, pp: int, pq: int, order: int, k0: float) -> np.ndarray:
    """Tensor Gauss-Legendre sum of the reaction integrand for a batch."""
    sr, swr = _tensor_reference(pp, order)
    tr, twr = _tensor_reference(pq, order)
    out = np.empty(len(t), complex)
    step = max(1, _CHUNK_EVALS // (len(sr) * len(tr)))
    for a in range(0, len(t), step):
        b = min(a + step, len(t))
        hp, hq = t.hp[a:b, None], t.hq[a:b, None]
        s, ws = hp * sr, hp * swr
        u, wu = hq * tr, hq * twr
        fp = ws * np.sin(k0 * (hp - np.abs(s))) / np.sin(k0 * hp)
        fq = wu * np.sin(k0 * (hq - np.abs(u))) / np.sin(k0 * hq)
        dz = t.dz[a:b, None, None] + u[:, None, :] - s[:, :, None]
        kern = kernel_FG(t.rho2[a:b, None, None], dz, k0)
        out[a:b] = np.einsum("bi,bij,bj->b", fp, kern, fq)
    return out


def _panels_per_half(h, scale, lam):
    width = np.minimum(np.minimum(lam / 8, h / 2), scale)
    return np.maximum(1, np.ceil(h / width - 1e-9)).astype(int)


def _tensor_tasks(t: _Tasks, k0: float, quad: QuadratureSpec):
    lam = 2 * math.pi / k0
    n = len(t)
    vals = np.zeros(n, complex)
    errs = np.zeros(n)
    panels = np.zeros(n, int)
    gap = np.maximum(0.0, np.abs(t.dz) - t.hp - t.hq)
    scale = np.sqrt(t.rho2 + gap * gap)
    pp = _panels_per_half(t.hp, scale, lam)
    pq = _panels_per_half(t.hq, scale, lam)
    todo = np.arange(n)
    for level in range(quad.max_subdivisions + 1):
        if todo.size == 0:
            break
        keys = np.stack((pp[todo], pq[todo]), axis=1)
        uniq, inv = np.unique(keys, axis=0, return_inverse=True)
        inv = inv.ravel()
        still = []
        for g, (a, b) in enumerate(uniq):
            idx = todo[inv == g]
            sub = t.take(idx)
            hi = _tensor_sum(sub, a, b, quad.order, k0)
            lo = _tensor_sum(sub, a, b, _lower_order(quad.order), k0)
            err = np.abs(hi - lo)
            vals[idx], errs[idx] = hi, err
            panels[idx] = 4 * a * b
            bad = err > quad.rtol * np.abs(hi)
            still.append(idx[bad])
        todo = np.concatenate(still) if still else np.zeros(0, int)
        pp[todo] *= 2
        pq[todo] *= 2
    if todo.size:
        raise QuadratureError(f"tensor rule did not reach rtol={quad.rtol:g}", todo)
    return vals, errs, panels


def _nested_sum(hp, hq, rho2, dz, k0, order, width, h_max_p, h_max_q):
    """Inner integral over the source follows the kernel peak at z' = z''."""
    lo_q, hi_q = dz - hq, dz + hq
    outer_br = graded_breaks(lo_q, hi_q, [dz, lo_q, hi_q, 0.0, -hp, hp], width, h_max_q)
    if dz not in outer_br and lo_q < dz < hi_q:
        outer_br = np.unique(np.append(outer_br, dz))
    zo, wo = panel_rule(outer_br, order)
    nodes, weights, owner = [], [], []
    n_panels = len(outer_br) - 1
    for k, z in enumerate(zo):
        br = graded_breaks(-hp, hp, [0.0, min(max(z, -hp), hp)], width, h_max_p)
        if 0.0 not in br:
            br = np.unique(np.append(br, 0.0))
        x, w = panel_rule(br, order)
        n_panels += len(br) - 1
        nodes.append(x)
        weights.append(w)
        owner.append(np.full(len(x), k))
    zp = np.concatenate(nodes)
    wp = np.concatenate(weights)
    owner = np.concatenate(owner)
    prof_p = np.sin(k0 * (hp - np.abs(zp))) / math.sin(k0 * hp)
    vals = wp * prof_p * kernel_FG(rho2, zo[owner] - zp, k0)
    inner = np.bincount(owner, vals.real, len(zo)) + 1j * np.bincount(owner, vals.imag, len(zo))
    prof_q = np.sin(k0 * (hq - np.minimum(np.abs(zo - dz), hq))) / math.sin(k0 * hq)
    return np.sum(wo * prof_q * inner), n_panels


def _nested_task(hp, hq, rho2, dz, k0, quad: QuadratureSpec):
    lam = 2 * math.pi / k0
    width = quad.near_panel_width or math.sqrt(rho2)
    hmp, hmq = min(lam / 8, hp / 2), min(lam / 8, hq / 2)
    width = min(width, hmp, hmq)
    for level in range(quad.max_subdivisions + 1):
        hi, n = _nested_sum(hp, hq, rho2, dz, k0, quad.order, width, hmp, hmq)
        lo, _ = _nested_sum(hp, hq, rho2, dz, k0, _lower_order(quad.order), width, hmp, hmq)
        err = abs(hi - lo)
        if err <= quad.rtol * abs(hi):
            return hi, err, n
        width, hmp, hmq = width / 2, hmp / 2, hmq / 2
    raise QuadratureError(f"nested rule did not reach rtol={quad.rtol:g}")


def _compute_tasks(t: _Tasks, k0: float, eta0: float, quad: QuadratureSpec):
    """Integrate every task; returns impedances, error estimates, node counts."""
    n = len(t)
    vals = np.zeros(n, complex)
    errs = np.zeros(n)
    panels = np.zeros(n, int)
    gap = np.maximum(0.0, np.abs(t.dz) - t.hp - t.hq)
    scale = np.sqrt(t.rho2 + gap * gap)
    near = scale < 2 * np.maximum(t.hp, t.hq) / NEAR_RATIO
    far_idx = np.flatnonzero(~near)
    if far_idx.size:
        try:
            v, e, p = _tensor_tasks(t.take(far_idx), k0, quad)
        except QuadratureError as exc:
            bad = far_idx[exc.args[1]] if len(exc.args) > 1 else far_idx
            raise QuadratureError(exc.args[0], bad) from None
        vals[far_idx], errs[far_idx], panels[far_idx] = v, e, p
    for i in np.flatnonzero(near):
        try:
            vals[i], errs[i], panels[i] = _nested_task(t.hp[i], t.hq[i], t.rho2[i], t.dz[i], k0, quad)
        except QuadratureError as exc:
            raise QuadratureError(exc.args[0], np.array([i])) from None
    c = 1j * eta0 / (4 * math.pi * k0)
    return c * vals, abs(c) * errs, panels


def _check_profiles(elements, k0):
    for e in {(el.length, el.radius): el for el in elements}.values():
        profile_denominator(e, k0)


def mutual_impedance(p: WireElement, q: WireElement, k0: float, eta0: float,
                     quad: QuadratureSpec = QuadratureSpec()) -> MutualImpedance:
    """Impedance ``Z_qp`` (ohm) coupling source ``p`` into observer ``q``.

    ``p is q`` (or two equal elements) gives the self impedance.
    """
    _check_profiles((p, q), k0)
    rho2, dz = _pair_geometry(p, q, 2 * math.pi / k0)
    t = _Tasks(np.array([p.half_length]), np.array([q.half_length]), np.array([rho2]), np.array([dz]))
    v, e, n = _compute_tasks(t, k0, eta0, quad)
    return MutualImpedance(complex(v[0]), p.index, q.index, int(n[0]), float(e[0]))


def mutual_impedance_field_oracle(p: WireElement, q: WireElement, k0: float, eta0: float,
                                  quad: QuadratureSpec = QuadratureSpec(),
                                  test_current: complex = 1.0) -> MutualImpedance:
    """Same impedance via the reaction of the radiated field on ``q``.

    Drives ``p`` with ``test_current``, evaluates its axial field along the
    axis of ``q`` and integrates it against the current of ``q``; the result
    is normalised by both port currents. Independent of the assembly path:
    both integrals are adaptive bisections started from coarse breakpoints.
    """
    _check_profiles((p, q), k0)
    lam = 2 * math.pi / k0
    lo, hi = q.z - q.half_length, q.z + q.half_length
    marks = [q.z, p.z, p.z - p.half_length, p.z + p.half_length]
    br = np.unique([lo, hi] + [m for m in marks if lo < m < hi])
    inner = quad.with_rtol(quad.rtol / 10)
    denom_q = profile_denominator(q, k0)

    def integrand(task, z):
        pts = np.column_stack((np.full_like(z, q.x), np.full_like(z, q.y), z))
        field = radiated_field_z(pts, p, test_current, k0, eta0, inner)
        prof = np.sin(k0 * (q.half_length - np.minimum(np.abs(z - q.z), q.half_length))) / denom_q
        return field * test_current * prof

    vals, errs, panels = adaptive_integrate(integrand, [br], quad.order, quad.rtol,
                                            max_depth=quad.max_subdivisions + 30)
    scale = test_current * test_current
    return MutualImpedance(complex(-vals[0] / scale), p.index, q.index, int(panels[0]),
                           float(errs[0] / abs(scale)))


# ----------------------------------------------------------------------------
# block matrices

@dataclass(frozen=True)
class ImpedanceBlocks:
    """The full system impedance matrix split by group (T, S, R).

    Blocks are exposed as attributes ``TT, TS, ..., RR``; ``Z_XY`` has shape
    ``(N_x, N_y)``.
    """

    full: np.ndarray
    n_t: int
    n_s: int
    n_r: int
    errors: np.ndarray | None = field(default=None, compare=False, repr=False)
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        n = self.n_t + self.n_s + self.n_r
        full = np.asarray(self.full, dtype=complex)
        if full.shape != (n, n):
            raise ValueError(f"full matrix shape {full.shape} does not match {n}x{n}")
        full.setflags(write=False)
        object.__setattr__(self, "full", full)

    def _slice(self, g):
        a = {"T": 0, "S": self.n_t, "R": self.n_t + self.n_s}[g]
        b = a + {"T": self.n_t, "S": self.n_s, "R": self.n_r}[g]
        return slice(a, b)

    def block(self, x: str, y: str) -> np.ndarray:
        return self.full[self._slice(x), self._slice(y)]

    def __getattr__(self, name):
        if len(name) == 2 and name[0] in "TSR" and name[1] in "TSR":
            return self.block(name[0], name[1])
        raise AttributeError(name)

    @property
    def shape(self):
        return self.n_t, self.n_s, self.n_r

    @classmethod
    def from_blocks(cls, blocks: dict, n_t: int, n_s: int, n_r: int) -> "ImpedanceBlocks":
        """Build from a mapping ``{"TT": ..., "TS": ..., ...}``."""
        sizes = {"T": n_t, "S": n_s, "R": n_r}
        rows = [np.hstack([np.asarray(blocks[x + y], complex).reshape(sizes[x], sizes[y])
                           for y in GROUPS]) for x in GROUPS]
        return cls(np.vstack(rows), n_t, n_s, n_r)

    def select_ris(self, idx) -> "ImpedanceBlocks":
        """Keep only the RIS elements ``idx`` (in the given order)."""
        idx = np.asarray(idx, dtype=int)
        keep = np.concatenate((np.arange(self.n_t), self.n_t + idx,
                               self.n_t + self.n_s + np.arange(self.n_r)))
        return ImpedanceBlocks(self.full[np.ix_(keep, keep)], self.n_t, len(idx), self.n_r)


def enforce_reciprocity(b: ImpedanceBlocks) -> tuple[ImpedanceBlocks, float]:
    """Symmetrise the system matrix; returns the blocks and the max asymmetry removed."""
    Z = b.full
    asym = float(np.max(np.abs(Z - Z.T))) if Z.size else 0.0
    if asym == 0.0:
        return b, 0.0
    sym = 0.5 * (Z + Z.T)
    return ImpedanceBlocks(sym, b.n_t, b.n_s, b.n_r, b.errors, dict(b.meta)), asym


def _chunk_worker(args):
    t, k0, eta0, quad = args
    return _compute_tasks(t, k0, eta0, quad)


def _pair_keys(elements, wavelength):
    """Translation/reflection invariant key of every lower-triangle pair."""
    pos = np.array([e.position for e in elements])
    types = {}
    tid = np.array([types.setdefault((e.length, e.radius), len(types)) for e in elements])
    radius = np.array([e.radius for e in elements])
    iq, jp = np.tril_indices(len(elements))
    d = pos[iq] - pos[jp]
    rho = np.hypot(d[:, 0], d[:, 1])
    tol = POSITION_TOL_WAVELENGTHS * wavelength
    on_axis = rho <= tol
    rho = np.where(on_axis, radius[jp], rho)
    keys = np.column_stack((
        np.round(rho / wavelength, 12), np.round(np.abs(d[:, 2]) / wavelength, 12),
        on_axis, tid[jp], tid[iq]))
    return iq, jp, keys


def assemble_impedance_blocks(s: Scenario, quad: QuadratureSpec = QuadratureSpec(),
                              jobs: int = 1, dedupe: bool = True) -> ImpedanceBlocks:
    """Fill the nine blocks of the system impedance matrix.

    Only the lower triangle is integrated; the upper one is its mirror image.
    With ``dedupe`` pairs sharing the same element types, transverse distance
    and |axial offset| are integrated once (exact for translated geometry, as
    on a uniform RIS grid). Work is split into ``jobs`` interleaved chunks and
    scattered back by index, so the matrix does not depend on ``jobs``.
    """
    elements = s.elements
    n = len(elements)
    k0, eta0, lam = s.constants.k0, s.constants.eta0, s.constants.wavelength
    _check_profiles(elements, k0)
    t0 = time.perf_counter()
    full = np.zeros((n, n), complex)
    errors = np.zeros((n, n))
    if n:
        iq, jp, keys = _pair_keys(elements, lam)
        if dedupe:
            _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
            inverse = inverse.ravel()
        else:
            first, inverse = np.arange(len(iq)), np.arange(len(iq))
        rep_q, rep_p = iq[first], jp[first]
        geo = [_pair_geometry(elements[p], elements[q], lam) for p, q in zip(rep_p, rep_q)]
        tasks = _Tasks(np.array([elements[p].half_length for p in rep_p]),
                       np.array([elements[q].half_length for q in rep_q]),
                       np.array([g[0] for g in geo]), np.array([g[1] for g in geo]))
        log.info("assembling %d elements: %d pairs, %d distinct integrals, %d job(s)",
                 n, len(iq), len(tasks), jobs)
        n_chunks = max(1, min(jobs, len(tasks)))
        # interleaved so that costly near-field pairs are spread over all workers
        chunks = [np.arange(i, len(tasks), n_chunks) for i in range(n_chunks)]
        vals = np.zeros(len(tasks), complex)
        errs = np.zeros(len(tasks))
        try:
            if len(chunks) == 1:
                results = [_compute_tasks(tasks, k0, eta0, quad)]
            else:
                with ProcessPoolExecutor(max_workers=len(chunks)) as pool:
                    results = list(pool.map(_chunk_worker,
                                            [(tasks.take(c), k0, eta0, quad) for c in chunks]))
        except QuadratureError as exc:
            raise _annotate(exc, rep_p, rep_q) from None
        for c, (v, e, _) in zip(chunks, results):
            vals[c], errs[c] = v, e
        full[iq, jp] = vals[inverse]
        full[jp, iq] = vals[inverse]
        errors[iq, jp] = errs[inverse]
        errors[jp, iq] = errs[inverse]
    meta = {"geometry_hash": s.geometry_hash(), "quadrature": quad.to_dict(),
            "frequency_hz": s.constants.frequency, "dedupe": dedupe, "jobs": jobs,
            "assembly_s": time.perf_counter() - t0}
    return ImpedanceBlocks(full, s.n_t, s.n_ris, s.n_r, errors, meta)


def _annotate(exc, rep_p, rep_q):
    msg = exc.args[0]
    if len(exc.args) > 1 and len(np.atleast_1d(exc.args[1])):
        i = int(np.atleast_1d(exc.args[1])[0])
        msg += f" (pair source={int(rep_p[i])}, observer={int(rep_q[i])})"
    return QuadratureError(msg)


# ----------------------------------------------------------------------------
# on-disk cache

def cache_key(s: Scenario, quad: QuadratureSpec) -> str:
    payload = json.dumps({"geometry": s.geometry_hash(), "quadrature": quad.to_dict()},
                         sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()


def save_blocks(path, b: ImpedanceBlocks, header: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, full=b.full, errors=b.errors if b.errors is not None else np.zeros(b.full.shape),
                 dims=np.array([b.n_t, b.n_s, b.n_r]), header=np.array(json.dumps(header, sort_keys=True)))
    tmp.replace(path)


def load_blocks(path) -> tuple[ImpedanceBlocks, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        n_t, n_s, n_r = (int(v) for v in data["dims"])
        header = json.loads(str(data["header"]))
        return ImpedanceBlocks(data["full"], n_t, n_s, n_r, data["errors"], header), header


def cached_impedance_blocks(s: Scenario, quad: QuadratureSpec = QuadratureSpec(),
                            cache_dir=None, jobs: int = 1) -> tuple[ImpedanceBlocks, bool]:
    """Assemble or load the blocks from a content-addressed cache directory.

    Returns the blocks and whether the cache was hit.
    """
    if cache_dir is None:
        return assemble_impedance_blocks(s, quad, jobs), False
    path = Path(cache_dir) / f"{cache_key(s, quad)}.npz"
    if path.exists():
        try:
            b, header = load_blocks(path)
            if header.get("geometry_hash") == s.geometry_hash() and b.shape == (s.n_t, s.n_ris, s.n_r):
                return b, True
        except (OSError, ValueError, KeyError):
            log.warning("ignoring unreadable cache file %s", path)
    b = assemble_impedance_blocks(s, quad, jobs)
    header = {"geometry_hash": s.geometry_hash(), "frequency_hz": s.constants.frequency,
              "quadrature": quad.to_dict(), "dims": [s.n_t, s.n_ris, s.n_r]}
    save_blocks(path, b, header)
    return b, False
