"""Weighted grid spaces discretizing L^2 on the unit interval and unit square.

A :class:`Grid` fixes the node layout and trapezoidal quadrature weights, a
:class:`GridFunction` pairs a grid with node values. Every energy in the
package is built from :func:`inner`, :func:`norm` and the forward-difference
Dirichlet form defined here.

Numerical kernels elsewhere work on plain arrays whose trailing axes match
``grid.shape``; leading axes are treated as a batch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np


class DimensionError(ValueError):
    """Grid functions or weights of incompatible shape were combined."""


@dataclass(frozen=True)
class Grid:
    """Uniform node grid on (0, 1) (``dim=1``) or (0, 1)^2 (``dim=2``).

    ``n`` is the node count per axis. The special case ``n=1, dim=1`` is a
    single node with weight 1, used by the scalar calibration energies.
    """

    n: int
    dim: int = 1

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise ValueError(f"dim must be 1 or 2, got {self.dim}")
        if self.n < 1 or (self.n == 1 and self.dim != 1):
            raise ValueError(f"grid needs n >= 2 nodes per axis, got n={self.n}")

    @classmethod
    def point(cls) -> "Grid":
        return cls(1, 1)

    @property
    def h(self) -> float:
        return 1.0 if self.n == 1 else 1.0 / (self.n - 1)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.dim

    @property
    def size(self) -> int:
        return self.n**self.dim

    @property
    def axes(self) -> tuple[int, ...]:
        """Trailing axes occupied by grid values in a batched array."""
        return tuple(range(-self.dim, 0))

    @cached_property
    def weights_1d(self) -> np.ndarray:
        if self.n == 1:
            return np.ones(1)
        w = np.full(self.n, self.h)
        w[0] = w[-1] = 0.5 * self.h
        return w

    @cached_property
    def weights(self) -> np.ndarray:
        w = self.weights_1d
        if self.dim == 2:
            w = np.multiply.outer(w, w)
        w.setflags(write=False)
        return w

    @cached_property
    def nodes(self) -> np.ndarray | tuple[np.ndarray, np.ndarray]:
        x = np.linspace(0.0, 1.0, self.n) if self.n > 1 else np.zeros(1)
        if self.dim == 1:
            return x
        return tuple(np.meshgrid(x, x, indexing="ij"))

    def inner_spec(self) -> "InnerProductSpec":
        return InnerProductSpec(self.weights)

    def integrate(self, values: np.ndarray) -> np.ndarray | float:
        """Quadrature of ``values`` over the trailing grid axes."""
        if self.dim == 1:
            out = values @ self.weights
        else:
            out = np.einsum("...ij,ij->...", values, self.weights)
        return float(out) if np.ndim(out) == 0 else out

    def check(self, arr: np.ndarray) -> np.ndarray:
        arr = np.asarray(arr, dtype=float)
        if arr.shape[arr.ndim - self.dim:] != self.shape:
            raise DimensionError(
                f"array of shape {arr.shape} does not live on grid {self.shape}")
        return arr


@dataclass(frozen=True)
class InnerProductSpec:
    """Positive quadrature weights summing to the measure of the domain."""

    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if not np.all(w > 0):
            raise ValueError("quadrature weights must be strictly positive")
        if abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"weights sum to {w.sum()!r}, expected 1")
        object.__setattr__(self, "weights", w)


@dataclass(frozen=True, eq=False)
class GridFunction:
    """Node values of a function on a :class:`Grid`.

    The values array is copied and made read-only on construction.
    """

    grid: Grid
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.shape != self.grid.shape:
            raise DimensionError(f"values of shape {v.shape} do not match grid {self.grid.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("grid function values must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def from_callable(cls, grid: Grid, fn) -> "GridFunction":
        nodes = grid.nodes
        vals = fn(*nodes) if grid.dim == 2 else fn(nodes)
        return cls(grid, np.broadcast_to(np.asarray(vals, dtype=float), grid.shape))

    @classmethod
    def constant(cls, grid: Grid, c: float) -> "GridFunction":
        return cls(grid, np.full(grid.shape, float(c)))

    @property
    def n(self) -> int:
        return self.grid.n

    @property
    def h(self) -> float:
        return self.grid.h

    @property
    def dim(self) -> int:
        return self.grid.dim

    def __eq__(self, other):
        if not isinstance(other, GridFunction):
            return NotImplemented
        return self.grid == other.grid and np.array_equal(self.values, other.values)

    __hash__ = None

    def __add__(self, other):
        return GridFunction(self.grid, self.values + _values(other))

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - _values(other))

    def __mul__(self, scalar: float):
        return GridFunction(self.grid, self.values * float(scalar))

    __rmul__ = __mul__

    def __neg__(self):
        return GridFunction(self.grid, -self.values)


def _values(u) -> np.ndarray:
    return u.values if isinstance(u, GridFunction) else np.asarray(u, dtype=float)


def _weights(u: GridFunction, spec: InnerProductSpec | None) -> np.ndarray:
    w = u.grid.weights if spec is None else spec.weights
    if w.shape != u.values.shape:
        raise DimensionError(f"weights of shape {w.shape} do not match values {u.values.shape}")
    return w


def inner(u: GridFunction, v: GridFunction, spec: InnerProductSpec | None = None) -> float:
    """Weighted inner product ``sum_i w_i u_i v_i``."""
    if u.values.shape != v.values.shape:
        raise DimensionError(f"cannot pair shapes {u.values.shape} and {v.values.shape}")
    return float(np.sum(_weights(u, spec) * (u.values * v.values)))


def norm(u: GridFunction, spec: InnerProductSpec | None = None) -> float:
    return float(np.sqrt(np.sum(_weights(u, spec) * u.values**2)))


def dirichlet_form(arr: np.ndarray, grid: Grid) -> np.ndarray | float:
    """Batched forward-difference Dirichlet form, see
    :func:`forward_difference_energy_quadratic_form`."""
    if grid.n == 1:
        return np.zeros(np.shape(arr)[: np.ndim(arr) - 1])
    h = grid.h
    if grid.dim == 1:
        return 0.5 * np.sum(np.diff(arr, axis=-1) ** 2, axis=-1) / h
    w = grid.weights_1d
    # each row/column difference is weighted by the trapezoid weight across it
    gx = np.sum(np.diff(arr, axis=-2) ** 2 * w, axis=(-2, -1))
    gy = np.sum(np.diff(arr, axis=-1) ** 2 * w[:, None], axis=(-2, -1))
    return 0.5 * (gx + gy) / h


def forward_difference_energy_quadratic_form(u: GridFunction) -> float:
    """Discrete ``1/2 int |grad u|^2`` from forward differences.

    In 1-D this is ``1/2 sum_i (u_{i+1} - u_i)^2 / h``, exact for
    piecewise-linear interpolants. In 2-D the 1-D forms along rows and
    columns are summed with the trapezoid weight of the transverse axis.
    """
    if u.n < 2:
        raise DimensionError("Dirichlet form needs at least two nodes per axis")
    return float(dirichlet_form(u.values, u.grid))


# -- serialization ---------------------------------------------------------

def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def to_csv(u: GridFunction) -> str:
    lines = [f"# n={u.n} h={_fmt(u.h)} dim={u.dim}"]
    lines.extend(_fmt(x) for x in u.values.ravel())
    return "\n".join(lines) + "\n"


def from_csv(text: str) -> GridFunction:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ValueError("missing '# n=<n> h=<h> dim=<d>' header")
    header = dict(tok.split("=", 1) for tok in lines[0].lstrip("#").split())
    grid = Grid(int(header["n"]), int(header["dim"]))
    if abs(float(header["h"]) - grid.h) > 1e-15:
        raise ValueError(f"header h={header['h']} inconsistent with n={grid.n}")
    vals = np.array([float(x) for x in lines[1:]])
    if vals.size != grid.size:
        raise DimensionError(f"expected {grid.size} values, found {vals.size}")
    return GridFunction(grid, vals.reshape(grid.shape))


def to_json(u: GridFunction) -> str:
    # json emits repr() floats, which round-trip exactly
    return json.dumps({"n": u.n, "h": u.h, "dim": u.dim,
                       "values": [float(x) for x in u.values.ravel()]})


def from_json(text: str) -> GridFunction:
    obj = json.loads(text)
    grid = Grid(int(obj["n"]), int(obj["dim"]))
    if abs(float(obj["h"]) - grid.h) > 1e-15:
        raise ValueError(f"h={obj['h']} inconsistent with n={grid.n}")
    return GridFunction(grid, np.asarray(obj["values"], dtype=float).reshape(grid.shape))


def save_csv(u: GridFunction, path: str | Path) -> None:
    Path(path).write_text(to_csv(u))


def load_csv(path: str | Path) -> GridFunction:
    return from_csv(Path(path).read_text())
