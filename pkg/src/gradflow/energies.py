"""Catalogue of concrete energies with exact or certified proximal maps.

Names understood by :func:`make_energy` (the run-config contract)::

    quadratic            1/2 |u|^2 on a 65-node line (``quadratic(n)`` to resize)
    power(p)             |u|^p / p on a single node of weight 1
    dirichlet1d(n)       1/2 int |u'|^2, Neumann boundary
    dirichlet2d(n)       1/2 int |grad u|^2 on the unit square
    semilinear(n, well=double)
                         dirichlet1d(n) + int F(u), F a truncated double well
    tv1d(n)              total variation sum |u_{i+1} - u_i|
    constrained(inner, box=[lo,hi])
                         inner energy restricted to lo <= u <= hi
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.linalg import solve_banded
from scipy.sparse.linalg import LinearOperator, cg

from .energy import Box, EnergyHandle, constrained_energy, sum_energy
from .hilbert import Grid, dirichlet_form


# -- calibration energies --------------------------------------------------

def quadratic(n: int = 65, dim: int = 1) -> EnergyHandle:
    """``1/2 |u|_H^2``; prox is ``v / (1 + lam)``."""
    grid = Grid(n, dim)

    def value_fn(arr):
        return 0.5 * grid.integrate(arr * arr)

    def prox_fn(v, lam):
        return v / (1.0 + lam)

    name = "quadratic" if (n, dim) == (65, 1) else f"quadratic({n})"
    return EnergyHandle(name, grid, value_fn, prox_fn, omega=0.0,
                        meta={"quadratic_form": sparse.diags(grid.weights.ravel()).tocsr()})


def _power_prox_scalar(v: float, lam: float, p: float) -> float:
    # r + lam r^(p-1) = |v| on [0, |v|], safeguarded Newton
    b = abs(v)
    if b == 0.0:
        return 0.0
    lo, hi = 0.0, b
    r = b / (1.0 + lam * b ** (p - 2.0)) if p >= 2 else 0.5 * b
    for _ in range(200):
        g = r + lam * r ** (p - 1.0) - b
        if g > 0:
            hi = r
        else:
            lo = r
        dg = 1.0 + lam * (p - 1.0) * r ** (p - 2.0) if r > 0 else math.inf
        r_new = r - g / dg
        if not lo < r_new < hi:
            r_new = 0.5 * (lo + hi)
        if abs(r_new - r) <= 1e-16 * b or hi - lo <= 4e-16 * b:
            r = r_new
            break
        r = r_new
    return math.copysign(r, v)


def power(p: float) -> EnergyHandle:
    """``|u|^p / p`` on a single node; Lojasiewicz exponent ``(p-1)/p`` at 0."""
    if not p > 1:
        raise ValueError(f"power energy needs p > 1, got {p}")
    grid = Grid.point()

    def value_fn(arr):
        return np.abs(arr[..., 0]) ** p / p

    def prox_fn(v, lam):
        return np.array([_power_prox_scalar(float(v[0]), lam, p)])

    return EnergyHandle(f"power({p:g})", grid, value_fn, prox_fn, omega=0.0,
                        meta={"p": p})


# -- Dirichlet energy ------------------------------------------------------

def neumann_stiffness(grid: Grid) -> sparse.csr_matrix:
    """Euclidean matrix ``A`` with ``1/2 u.A.u`` equal to the Dirichlet form."""
    n, h = grid.n, grid.h
    main = np.full(n, 2.0)
    main[0] = main[-1] = 1.0
    a1 = sparse.diags([-np.ones(n - 1), main, -np.ones(n - 1)], [-1, 0, 1]) / h
    if grid.dim == 1:
        return a1.tocsr()
    w = sparse.diags(grid.weights_1d)
    return (sparse.kron(a1, w) + sparse.kron(w, a1)).tocsr()


def neumann_laplacian(grid: Grid) -> sparse.csr_matrix:
    """H-gradient of the Dirichlet form: ``M^-1 A``."""
    return (sparse.diags(1.0 / grid.weights.ravel()) @ neumann_stiffness(grid)).tocsr()


def dirichlet_prox(v: np.ndarray, lam: float, grid: Grid) -> np.ndarray:
    """Solve ``(M + lam A) u = M v``, the implicit Euler heat step."""
    if not lam > 0:
        raise ValueError(f"prox step must be positive, got {lam}")
    w = grid.weights
    if grid.dim == 1:
        n, h = grid.n, grid.h
        ab = np.empty((3, n))
        ab[0, :] = -lam / h
        ab[2, :] = -lam / h
        diag = np.full(n, 2.0 * lam / h)
        diag[0] = diag[-1] = lam / h
        ab[1] = w + diag
        u = solve_banded((1, 1), ab, w * v, check_finite=False)
        return u
    A = neumann_stiffness(grid)
    mw = w.ravel()
    op = LinearOperator(A.shape, matvec=lambda x: mw * x + lam * (A @ x), dtype=float)
    diag = mw + lam * A.diagonal()
    pre = LinearOperator(A.shape, matvec=lambda x: x / diag, dtype=float)
    rhs = mw * v.ravel()
    u, info = cg(op, rhs, x0=v.ravel().copy(), rtol=1e-12, atol=0.0, M=pre,
                 maxiter=10 * grid.size)
    if info != 0:
        raise np.linalg.LinAlgError(f"CG for the 2-D heat step stopped with info={info}")
    return u.reshape(grid.shape)


def dirichlet(n: int, dim: int = 1) -> EnergyHandle:
    grid = Grid(n, dim)
    return EnergyHandle(f"dirichlet{dim}d({n})", grid,
                        lambda arr: dirichlet_form(arr, grid),
                        lambda v, lam: dirichlet_prox(v, lam, grid), omega=0.0,
                        meta={"quadratic_form": neumann_stiffness(grid)})


def dirichlet1d(n: int) -> EnergyHandle:
    return dirichlet(n, 1)


def dirichlet2d(n: int) -> EnergyHandle:
    return dirichlet(n, 2)


# -- semilinear energy -----------------------------------------------------

@dataclass(frozen=True)
class DoubleWell:
    """``F(s) = (1 - s^2)^2 / 4`` for ``|s| <= cut``, continued by its
    second-order Taylor polynomial with curvature ``F''(cut)`` outside, so
    that ``F'`` is globally Lipschitz with constant ``3 cut^2 - 1``."""

    cut: float = 2.0

    @property
    def lipschitz(self) -> float:
        return 3.0 * self.cut**2 - 1.0

    def _edge(self):
        c = self.cut
        return 0.25 * (1 - c * c) ** 2, c**3 - c, self.lipschitz

    def F(self, s):
        s = np.asarray(s, dtype=float)
        f0, f1, f2 = self._edge()
        a = np.abs(s)
        d = a - self.cut
        outer = f0 + f1 * d + 0.5 * f2 * d * d
        return np.where(a <= self.cut, 0.25 * (1 - s * s) ** 2, outer)

    def dF(self, s):
        s = np.asarray(s, dtype=float)
        _, f1, f2 = self._edge()
        a = np.abs(s)
        outer = np.sign(s) * (f1 + f2 * (a - self.cut))
        return np.where(a <= self.cut, s**3 - s, outer)


WELLS = {"double": DoubleWell}


def semilinear(n: int, well: DoubleWell | str = "double") -> EnergyHandle:
    """``1/2 int |u'|^2 + int F(u)`` with ``omega = L = sup |F''|``."""
    F = WELLS[well]() if isinstance(well, str) else well
    base = dirichlet1d(n)
    grid = base.grid
    label = well if isinstance(well, str) else "custom"
    return sum_energy(base,
                      lambda arr: grid.integrate(F.F(arr)),
                      F.dF,
                      F.lipschitz,
                      name=f"semilinear({n}, well={label})")


# -- total variation -------------------------------------------------------

def _taut_string(x: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slopes of the shortest path from ``(x0, lo0)`` to ``(xN, loN)`` through
    the tube ``lo <= y <= hi`` at abscissae ``x``; returns one slope per cell
    ``[x_k, x_{k+1}]``."""
    N = len(x) - 1
    slopes = np.empty(N)
    a, ya = 0, lo[0]
    while a < N:
        L, il = -math.inf, a
        U, iu = math.inf, a
        j = a + 1
        bent = False
        while j <= N:
            dx = x[j] - x[a]
            sl = (lo[j] - ya) / dx
            su = (hi[j] - ya) / dx
            if sl > U:
                b, yb = iu, hi[iu]
                bent = True
                break
            if su < L:
                b, yb = il, lo[il]
                bent = True
                break
            if sl > L:
                L, il = sl, j
            if su < U:
                U, iu = su, j
            j += 1
        if not bent:
            b, yb = N, lo[N]
        slopes[a:b] = (yb - ya) / (x[b] - x[a])
        a, ya = b, yb
    return slopes


def tv_prox(v: np.ndarray, lam: float, weights: np.ndarray) -> np.ndarray:
    """Exact prox of ``sum |u_{i+1} - u_i|`` in the ``weights`` inner product.

    The solution is the derivative of the taut string through the tube of
    half-width ``lam`` around the cumulative weighted data, parametrized by
    cumulative weight.
    """
    if not lam > 0:
        raise ValueError(f"prox step must be positive, got {lam}")
    x = np.concatenate([[0.0], np.cumsum(weights)])
    s = np.concatenate([[0.0], np.cumsum(weights * v)])
    lo = s - lam
    hi = s + lam
    lo[0] = hi[0] = 0.0
    lo[-1] = hi[-1] = s[-1]
    return _taut_string(x, lo, hi)


def tv_value(arr: np.ndarray) -> np.ndarray:
    return np.sum(np.abs(np.diff(arr, axis=-1)), axis=-1)


def tv1d(n: int) -> EnergyHandle:
    grid = Grid(n, 1)
    return EnergyHandle(f"tv1d({n})", grid, tv_value,
                        lambda v, lam: tv_prox(v, lam, grid.weights), omega=0.0)


def constrained(inner: EnergyHandle, box=(0.0, 1.0), witness=None) -> EnergyHandle:
    lo, hi = (float(b) for b in box)
    C = Box(lo, hi)
    if witness is None:
        witness = np.full(inner.grid.shape, min(max(0.0, lo), hi))
    return constrained_energy(inner, C, witness,
                              name=f"constrained({inner.name}, box=[{lo:g},{hi:g}])")


# -- catalogue parsing -----------------------------------------------------

_CALL = re.compile(r"^\s*([a-z0-9_]+)\s*(?:\((.*)\))?\s*$", re.S)


def _split_args(body: str) -> list[str]:
    parts, depth, cur = [], 0, []
    for ch in body:
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    if "".join(cur).strip():
        parts.append("".join(cur).strip())
    return parts


def _literal(tok: str):
    tok = tok.strip()
    if tok.startswith("["):
        return [_literal(t) for t in _split_args(tok[1:-1])]
    try:
        return int(tok)
    except ValueError:
        pass
    try:
        return float(tok)
    except ValueError:
        return tok


def parse_energy(text: str) -> dict:
    """``"constrained(dirichlet1d(65), box=[0,1])"`` -> nested dict form."""
    m = _CALL.match(text)
    if not m:
        raise ValueError(f"cannot parse energy name {text!r}")
    name, body = m.group(1), m.group(2)
    args, kwargs = [], {}
    for tok in _split_args(body or ""):
        key, eq, val = tok.partition("=")
        if eq and re.fullmatch(r"[a-z_]+", key.strip()):
            kwargs[key.strip()] = _literal(val)
        elif _CALL.match(tok) and not re.fullmatch(r"[-+.0-9eE]+", tok):
            args.append(parse_energy(tok))
        else:
            args.append(_literal(tok))
    return {"name": name, "args": args, **kwargs}


_POSITIONAL = {
    "quadratic": ["n"],
    "power": ["p"],
    "dirichlet1d": ["n"],
    "dirichlet2d": ["n"],
    "semilinear": ["n", "well"],
    "tv1d": ["n"],
    "constrained": ["inner", "box"],
}


def resolve_energy_spec(spec) -> dict:
    """Normalize a string or dict energy spec to ``{"name": ..., params}``."""
    if isinstance(spec, str):
        spec = parse_energy(spec)
    spec = dict(spec)
    name = spec.pop("name", None)
    if name not in _POSITIONAL:
        raise ValueError(f"unknown energy {name!r}; known: {sorted(_POSITIONAL)}")
    args = spec.pop("args", [])
    params = dict(zip(_POSITIONAL[name], args))
    if len(args) > len(_POSITIONAL[name]):
        raise ValueError(f"too many arguments for {name}")
    params.update(spec)
    unknown = set(params) - set(_POSITIONAL[name])
    if unknown:
        raise ValueError(f"unknown parameters {sorted(unknown)} for {name}")
    if name == "quadratic":
        params.setdefault("n", 65)
    if name == "semilinear":
        params.setdefault("well", "double")
        if params["well"] not in WELLS:
            raise ValueError(f"unknown well {params['well']!r}")
    if name == "constrained":
        if "inner" not in params:
            raise ValueError("constrained needs an inner energy")
        params["inner"] = resolve_energy_spec(params["inner"])
        box = params.setdefault("box", [0.0, 1.0])
        if len(box) != 2 or not float(box[0]) <= float(box[1]):
            raise ValueError(f"box must be [lo, hi] with lo <= hi, got {box}")
        params["box"] = [float(box[0]), float(box[1])]
    if "n" in params:
        if not isinstance(params["n"], int) or params["n"] < 2:
            raise ValueError(f"{name}: n must be an integer >= 2, got {params['n']!r}")
    if name == "power":
        if "p" not in params or not float(params["p"]) > 1:
            raise ValueError(f"power: p must be > 1, got {params.get('p')!r}")
        params["p"] = float(params["p"])
    return {"name": name, **params}


def make_energy(spec) -> EnergyHandle:
    """Build a catalogue energy from a name string or a dict spec."""
    s = resolve_energy_spec(spec)
    name = s["name"]
    if name == "quadratic":
        return quadratic(s["n"])
    if name == "power":
        return power(s["p"])
    if name == "dirichlet1d":
        return dirichlet1d(s["n"])
    if name == "dirichlet2d":
        return dirichlet2d(s["n"])
    if name == "semilinear":
        return semilinear(s["n"], s["well"])
    if name == "tv1d":
        return tv1d(s["n"])
    return constrained(make_energy(s["inner"]), s["box"])
