"""Semiconvex energies, their subgradients and the energy metric.

An :class:`EnergyHandle` bundles a batched value map (``+inf`` off the
effective domain), a proximal map and the semiconvexity modulus ``omega``:
``u -> E(u) + omega/2 |u|^2`` is convex. Subgradients use the semiconvex
characterization

    E(v) - E(u) + omega/2 |v - u|^2 >= <f, v - u>   for all v,

which :func:`check_subgradient` tests on a probe set. Slopes are computed
as limits of Moreau-Yosida quotients ``|u - prox(u, lam)| / lam``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import spsolve

from .hilbert import Grid, GridFunction

SUBGRADIENT_TOL = 1e-8
PROX_TOL = 1e-9


class DomainError(ValueError):
    """A point lies outside the effective domain of an energy."""


class ParameterError(ValueError):
    """A step size or other parameter violates a well-posedness bound."""


class ProxError(RuntimeError):
    """An iterative proximal solver failed to reach its tolerance."""

    def __init__(self, message: str, history=()):
        super().__init__(message)
        self.history = list(history)


class SlopeError(RuntimeError):
    """The Moreau-Yosida quotient ladder did not settle."""

    def __init__(self, message: str, history=()):
        super().__init__(message)
        self.history = list(history)


def _arr(u) -> np.ndarray:
    return u.values if isinstance(u, GridFunction) else np.asarray(u, dtype=float)


@dataclass(frozen=True, eq=False)
class EnergyHandle:
    """A proper, lower semicontinuous, ``omega``-semiconvex energy on a grid.

    Parameters
    ----------
    name : str
        Catalogue-style identifier.
    grid : Grid
        Space the energy lives on.
    value_fn : callable
        ``value_fn(arr)`` for ``arr`` of shape ``(..., *grid.shape)``; returns
        one value per batch entry, ``+inf`` outside the domain.
    prox_fn : callable
        ``prox_fn(v, lam)`` returning ``argmin_u E(u) + |u - v|^2 / (2 lam)``
        for ``0 < lam < 1/omega``.
    omega : float
        Semiconvexity modulus, ``>= 0``.
    project_fn : callable, optional
        Projection onto the closure of the domain; used to place probes.
    """

    name: str
    grid: Grid
    value_fn: Callable[[np.ndarray], np.ndarray]
    prox_fn: Callable[[np.ndarray, float], np.ndarray]
    omega: float = 0.0
    project_fn: Optional[Callable[[np.ndarray], np.ndarray]] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.omega >= 0:
            raise ValueError(f"omega must be nonnegative, got {self.omega}")

    @property
    def max_step(self) -> float:
        """Supremum of admissible prox steps, ``1/omega``."""
        return math.inf if self.omega == 0 else 1.0 / self.omega

    def value(self, u) -> float:
        return float(self.value_fn(self.grid.check(_arr(u))))

    def values(self, batch: np.ndarray) -> np.ndarray:
        return np.asarray(self.value_fn(self.grid.check(batch)), dtype=float)

    def in_domain(self, u) -> bool:
        return math.isfinite(self.value(u))

    def prox(self, v, lam: float):
        """Proximal map; returns a :class:`GridFunction` iff given one."""
        if not 0 < lam < self.max_step:
            raise ParameterError(
                f"prox step {lam} outside (0, 1/omega) = (0, {self.max_step}) for {self.name}")
        out = self.prox_fn(self.grid.check(_arr(v)), float(lam))
        return GridFunction(self.grid, out) if isinstance(v, GridFunction) else out

    def project(self, arr: np.ndarray) -> np.ndarray:
        return arr if self.project_fn is None else self.project_fn(arr)

    def __repr__(self):
        return f"EnergyHandle({self.name!r}, omega={self.omega})"


# -- energy metric ---------------------------------------------------------

@dataclass(frozen=True)
class EnergyMetricValue:
    d: float
    de: float


def energy_metric(E: EnergyHandle, u, v) -> EnergyMetricValue:
    """``d_E(u, v) = |u - v|_H + |E(u) - E(v)|`` on the effective domain."""
    a, b = _arr(u), _arr(v)
    ea, eb = E.value(a), E.value(b)
    for label, e in (("u", ea), ("v", eb)):
        if not math.isfinite(e):
            raise DomainError(f"{label} lies outside dom {E.name} (energy {e})")
    d = float(np.sqrt(E.grid.integrate((a - b) ** 2)))
    return EnergyMetricValue(d, d + abs(ea - eb))


# -- slopes ----------------------------------------------------------------

def _hnorm(grid: Grid, a: np.ndarray) -> float:
    return float(np.sqrt(grid.integrate(a * a)))


def minimal_selection(E: EnergyHandle, u, lam: float) -> GridFunction:
    """Moreau-Yosida approximation ``(u - prox(u, lam)) / lam`` of the
    minimal-norm subgradient."""
    if not 0 < lam < E.max_step:
        raise ParameterError(f"lam={lam} must lie in (0, 1/omega) = (0, {E.max_step})")
    a = _arr(u)
    return GridFunction(E.grid, (a - E.prox(a, lam)) / lam)


def moreau_yosida_quotient(E: EnergyHandle, u, lam: float) -> float:
    a = _arr(u)
    return _hnorm(E.grid, a - E.prox(a, lam)) / lam


def _ladder_start(E: EnergyHandle) -> float:
    return 1e-2 if E.omega == 0 else min(1e-2, 1.0 / (4.0 * E.omega))


def slope(E: EnergyHandle, u, tol: float = 1e-8, rtol: float = 0.0,
          max_refinements: int = 40) -> float:
    """Slope ``|dE(u)|`` from a halving ladder of Moreau-Yosida quotients.

    Quotients ``q_j`` are taken at ``lam_j = lam_0 2^-j``. The ladder stops
    once consecutive Richardson extrapolates ``2 q_{j+1} - q_j`` agree to
    ``tol + rtol * q``, widened by the rounding floor ``~eps |u| / lam``;
    the last extrapolate is returned. Points outside the
    domain have slope ``inf``.
    """
    a = _arr(u)
    if not E.in_domain(a):
        return math.inf
    lam = _ladder_start(E)
    q_prev = moreau_yosida_quotient(E, a, lam)
    history = [(lam, q_prev)]
    r_prev = None
    # rounding in u - prox(u) limits every quotient to about eps |u| / lam
    unorm = _hnorm(E.grid, a)
    for _ in range(max_refinements):
        lam *= 0.5
        q = moreau_yosida_quotient(E, a, lam)
        history.append((lam, q))
        r = max(2.0 * q - q_prev, 0.0)
        if q == q_prev:
            return q
        noise = 8.0 * np.finfo(float).eps * unorm / lam
        if r_prev is not None and abs(r - r_prev) <= tol + rtol * abs(r) + noise:
            return r
        q_prev, r_prev = q, r
    raise SlopeError(f"slope ladder for {E.name} did not settle", history)


def refined_selection(E: EnergyHandle, u, tol: float = 1e-12,
                      max_refinements: int = 40) -> np.ndarray:
    """Vector Richardson limit of :func:`minimal_selection` as ``lam -> 0``."""
    a = _arr(u)
    lam = _ladder_start(E)
    g_prev = (a - E.prox(a, lam)) / lam
    r_prev = None
    unorm = _hnorm(E.grid, a)
    for _ in range(max_refinements):
        lam *= 0.5
        g = (a - E.prox(a, lam)) / lam
        r = 2.0 * g - g_prev
        scale = max(1.0, _hnorm(E.grid, r))
        noise = 8.0 * np.finfo(float).eps * unorm / lam
        # piecewise-linear prox maps (TV, boxes) give a selection that is
        # exactly constant below some step; stop once it stops moving
        if _hnorm(E.grid, g - g_prev) <= tol * scale + noise:
            return g
        if r_prev is not None and _hnorm(E.grid, r - r_prev) <= tol * scale + noise:
            return r
        g_prev, r_prev = g, r
    raise SlopeError(f"selection ladder for {E.name} did not settle")


# -- subgradient inequality -------------------------------------------------

@dataclass(frozen=True, eq=False)
class SubgradientElement:
    point: GridFunction
    element: GridFunction
    tested: bool
    worst_violation: float = 0.0
    worst_probe: Optional[np.ndarray] = field(default=None, repr=False)


def _probes(E: EnergyHandle, u: np.ndarray, f: np.ndarray, samples: int,
            rng: np.random.Generator, canonical: bool = True) -> np.ndarray:
    grid = E.grid
    scale = max(1.0, float(np.max(np.abs(u))))
    flat = u.ravel()
    steps = []
    if canonical:
        eye = np.eye(flat.size)
        for s in (1e-3 * scale, 1e-1 * scale):
            steps.append(flat + s * eye)
            steps.append(flat - s * eye)
    rows = [flat[None, :], 2.0 * flat[None, :]]
    for d in (u, f):
        nd = _hnorm(grid, d)
        if nd > 0:
            for s in (1e-4, 1e-2, 1.0):
                rows.append((flat + s * scale * d.ravel() / nd)[None, :])
                rows.append((flat - s * scale * d.ravel() / nd)[None, :])
    if samples > 0:
        xi = rng.standard_normal((samples, flat.size))
        xi /= np.sqrt((xi * xi * grid.weights.ravel()).sum(axis=1))[:, None]
        radii = scale * 10.0 ** rng.uniform(-4, 0, samples)
        rows.append(flat + radii[:, None] * xi)
    batch = np.concatenate(steps + rows).reshape((-1,) + grid.shape)
    return E.project(batch)


def subgradient_violations(E: EnergyHandle, u: np.ndarray, f: np.ndarray,
                           probes: np.ndarray, omega: float | None = None) -> np.ndarray:
    """Scaled violation of the subgradient inequality at each probe.

    Positive entries are violations; probes outside the domain give ``-inf``.
    """
    omega = E.omega if omega is None else omega
    grid = E.grid
    eu = E.value(u)
    ev = E.values(probes)
    dv = probes - u
    lin = grid.integrate(f * dv)
    quad = 0.5 * omega * grid.integrate(dv * dv)
    with np.errstate(invalid="ignore"):
        scale = np.maximum.reduce([np.ones_like(ev), np.full_like(ev, abs(eu)),
                                   np.abs(np.where(np.isfinite(ev), ev, 0.0)),
                                   np.abs(lin), quad])
        viol = (lin - (ev - eu + quad)) / scale
    return np.where(np.isfinite(ev), viol, -np.inf)


def check_subgradient(E: EnergyHandle, u, f, samples: int = 16,
                      tol: float = SUBGRADIENT_TOL, seed: int = 0,
                      omega: float | None = None,
                      canonical: bool = True) -> SubgradientElement:
    """Test ``f in dE(u)`` on deterministic and random probes.

    Deterministic probes are ``v = u``, ``v = 2u``, ``u +- s e_i`` for every
    node and two step sizes, and moves along ``+-u`` and ``+-f``; ``samples``
    random directions with log-uniform radii are added. Probes are projected
    onto the domain when the energy provides a projection. ``canonical=False``
    drops the per-node probes, which dominate the cost on large grids.
    """
    a, g = _arr(u), _arr(f)
    if not E.in_domain(a):
        raise DomainError(f"point outside dom {E.name}")
    probes = _probes(E, a, g, samples, np.random.default_rng(seed), canonical)
    viol = subgradient_violations(E, a, g, probes, omega)
    k = int(np.argmax(viol))
    worst = float(viol[k])
    return SubgradientElement(GridFunction(E.grid, a), GridFunction(E.grid, g),
                              tested=worst <= tol, worst_violation=worst,
                              worst_probe=None if worst <= tol else probes[k])


def prox_residual(E: EnergyHandle, v, lam: float, p, samples: int = 8,
                  seed: int = 0, canonical: bool = True) -> float:
    """Worst violation of ``(v - p)/lam in dE(p)``; zero for an exact prox."""
    a, pa = _arr(v), _arr(p)
    if not E.in_domain(pa):
        return math.inf
    el = check_subgradient(E, pa, (a - pa) / lam, samples=samples, seed=seed,
                            canonical=canonical)
    return max(0.0, el.worst_violation)


# -- combinators -----------------------------------------------------------

def sum_energy(E1: EnergyHandle, E2_value: Callable, E2_gradient: Callable, L: float,
               name: str | None = None, gtol: float = 1e-10,
               max_iter: int = 10_000) -> EnergyHandle:
    """``E1 + E2`` for a smooth ``E2`` whose H-gradient is ``L``-Lipschitz.

    ``E2_value`` must accept batched arrays like ``value_fn``. The prox
    subproblem ``E1 + E2 + |. - v|^2/(2 lam)`` is strongly convex for
    ``lam < 1/(omega1 + L)`` and is solved by proximal-gradient descent with
    step ``1/(L + 1/lam)``, stopping once the gradient-mapping norm is below
    ``gtol``.
    """
    grid = E1.grid

    def value_fn(arr):
        return E1.value_fn(arr) + E2_value(arr)

    def prox_fn(v, lam):
        s = 1.0 / (L + 1.0 / lam)
        u = E1.prox_fn(v, min(s, lam))
        history = []
        for _ in range(max_iter):
            grad = E2_gradient(u) + (u - v) / lam
            u_new = E1.prox_fn(u - s * grad, s)
            step = _hnorm(grid, u_new - u)
            history.append(step / s)
            u = u_new
            if step <= max(gtol * s, 8 * np.finfo(float).eps * _hnorm(grid, u)):
                return u
        raise ProxError(f"proximal-gradient prox of {name or 'sum'} stalled", history[-20:])

    return EnergyHandle(name or f"{E1.name}+smooth", grid, value_fn, prox_fn,
                        omega=E1.omega + L, project_fn=E1.project_fn,
                        meta={"parts": (E1.name, "smooth"), "L": L})


@dataclass(frozen=True)
class Box:
    """Pointwise bound constraint ``lo <= u <= hi``."""

    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"empty box [{self.lo}, {self.hi}]")

    def project(self, arr):
        return np.clip(arr, self.lo, self.hi)

    def contains(self, arr, axes=None):
        ok = (arr >= self.lo) & (arr <= self.hi)
        return np.all(ok, axis=axes)


def constrained_energy(E: EnergyHandle, C, witness=None, name: str | None = None,
                       tol: float = 1e-13, max_sweeps: int = 10_000) -> EnergyHandle:
    """Restriction ``E + 1_C`` of ``E`` to a convex set ``C``.

    ``C`` needs ``project(arr)`` and ``contains(arr, axes)``. The prox is
    computed by the Dykstra-like proximal splitting of ``E`` and ``1_C``;
    for ``omega > 0`` the quadratic shift ``E + omega/2 |.|^2`` is split
    instead, which keeps both pieces convex.
    """
    grid = E.grid
    w0 = np.zeros(grid.shape) if witness is None else _arr(witness)
    if not C.contains(w0) or not E.in_domain(w0):
        raise ValueError(f"witness point is not in dom {E.name} intersected with C")
    omega = E.omega

    def value_fn(arr):
        inside = C.contains(arr, axes=grid.axes)
        return np.where(inside, E.value_fn(arr), np.inf)

    Q = E.meta.get("quadratic_form")
    if Q is not None and isinstance(C, Box):
        def prox_fn(v, lam):
            return _box_qp_prox(Q, grid.weights.ravel(), v, lam, C, max_sweeps).reshape(grid.shape)
    else:
        prox_fn = _dykstra_prox(E, C, grid, omega, name, tol, max_sweeps)

    def project_fn(arr):
        return C.project(E.project(arr))

    return EnergyHandle(name or f"constrained({E.name})", grid, value_fn, prox_fn,
                        omega=omega, project_fn=project_fn,
                        meta={"inner": E, "constraint": C})


def _box_qp_prox(Q, m, v, lam, box: Box, max_iter: int) -> np.ndarray:
    """Primal-dual active set method for ``min 1/2 u.Q.u + |u - v|_M^2/(2 lam)``
    over a box. ``M + lam Q`` is an M-matrix for the catalogue quadratics, so
    the iteration stops after finitely many active-set updates."""
    K = (sparse.diags(m) + lam * Q).tocsr()
    b = m * v.ravel()
    c = float(K.diagonal().mean())
    u = np.clip(spsolve(K.tocsc(), b), box.lo, box.hi)
    mult = b - K @ u
    prev = None
    for _ in range(max_iter):
        up = mult + c * (u - box.hi) > 0
        low = -mult + c * (box.lo - u) > 0
        key = (up.tobytes(), low.tobytes())
        if key == prev:
            return u
        prev = key
        free = ~(up | low)
        u = np.where(up, box.hi, np.where(low, box.lo, 0.0))
        if free.any():
            Kf = K[free][:, free]
            u[free] = spsolve(Kf.tocsc(), b[free] - K[free] @ u)
        mult = np.where(free, 0.0, b - K @ u)
    raise ProxError("active set iteration for the box-constrained prox did not settle")


def _dykstra_prox(E: EnergyHandle, C, grid: Grid, omega: float, name, tol: float,
                  max_sweeps: int):
    def prox_fn(v, lam):
        # prox_{E+1_C}(v, lam) = prox_{Et+1_C}(v', lam') with Et = E + omega/2|.|^2
        shrink = 1.0 - lam * omega
        x = v / shrink
        p = np.zeros_like(x)
        q = np.zeros_like(x)
        y_old = None
        history = []
        for _ in range(max_sweeps):
            y = C.project(x + p)
            p = x + p - y
            # prox of Et at step lam/shrink, expressed through prox of E
            x = E.prox_fn((y + q) * shrink, lam)
            q = y + q - x
            gap = _hnorm(grid, x - y)
            move = math.inf if y_old is None else _hnorm(grid, y - y_old)
            history.append(gap)
            if gap <= tol * max(1.0, _hnorm(grid, y)) and move <= tol * max(1.0, _hnorm(grid, y)):
                return y
            y_old = y
        raise ProxError(f"Dykstra splitting for {name or E.name} did not converge", history[-20:])

    return prox_fn
