"""Minimizing-movement integration of ``u' + dE(u) ∋ f``.

Each step is ``u+ = prox_E(u + tau f_k, tau)`` with left-endpoint forcing
``f_k = f(t_k)``; the implicit inclusion ``(u+ - u)/tau + dE(u+) ∋ f_k``
is certified through :func:`gradflow.energy.prox_residual`. A
:class:`Trajectory` keeps per-step energies, norms and dissipation defects
so the energy identity and the decrease of ``H`` can be audited afterwards.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import hilbert
from .energy import (PROX_TOL, DomainError, EnergyHandle, ParameterError, _arr,
                     prox_residual, slope)
from .hilbert import GridFunction

Forcing = Callable[[float], np.ndarray]


class FlowError(RuntimeError):
    """A step failed; ``partial`` holds the trajectory computed so far."""

    def __init__(self, message: str, step: int, partial: "Trajectory"):
        super().__init__(message)
        self.step = step
        self.partial = partial


@dataclass(frozen=True)
class FlowConfig:
    """Time stepping parameters.

    ``record_every=None`` picks 1 for grids of at most 256 nodes, else 10.
    ``certify`` runs the prox residual check after every step; ``slopes``
    evaluates the slope at recorded steps.
    """

    tau: float
    t_end: float
    forcing: Optional[Forcing] = None
    prox_tol: float = PROX_TOL
    record_every: Optional[int] = None
    certify: bool = True
    slopes: bool = True
    slope_tol: float = 1e-10
    slope_rtol: float = 1e-8

    def __post_init__(self):
        if not self.tau > 0:
            raise ParameterError(f"tau must be positive, got {self.tau}")
        if not self.t_end >= self.tau:
            raise ParameterError(f"t_end={self.t_end} must be at least tau={self.tau}")
        if self.record_every is not None and self.record_every < 1:
            raise ParameterError("record_every must be >= 1")

    @property
    def n_steps(self) -> int:
        return int(round(self.t_end / self.tau))

    def stride(self, grid_size: int) -> int:
        if self.record_every is not None:
            return self.record_every
        return 1 if grid_size <= 256 else 10

    def validate_for(self, E: EnergyHandle) -> None:
        if E.omega > 0 and not self.tau < 1.0 / (2.0 * E.omega):
            raise ParameterError(
                f"tau={self.tau} violates tau < 1/(2 omega) = {1.0 / (2.0 * E.omega):.6g} "
                f"for {E.name}")


@dataclass
class Trajectory:
    """Discrete solution record.

    Per-step arrays (length ``K``) describe the step from ``t_k`` to
    ``t_{k+1}``; per-time arrays have length ``K + 1``. ``slopes`` is NaN
    where no slope was evaluated; ``states`` holds the recorded states at
    indices ``recorded``.
    """

    grid: hilbert.Grid
    tau: float
    energy_name: str
    omega: float
    times: list = field(default_factory=list)
    energies: list = field(default_factory=list)
    slopes: list = field(default_factory=list)
    H_values: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    forcing_norms: list = field(default_factory=list)
    selection_norms: list = field(default_factory=list)
    dissipation_residuals: list = field(default_factory=list)
    inequality_violations: list = field(default_factory=list)
    prox_residuals: list = field(default_factory=list)
    recorded: list = field(default_factory=list)
    states: list = field(default_factory=list)
    last_state: Optional[np.ndarray] = None

    @property
    def n_steps(self) -> int:
        return len(self.step_norms)

    @property
    def cumulative_length(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.step_norms)])

    def state(self, k: int) -> GridFunction:
        return GridFunction(self.grid, self.states[self.recorded.index(k)])

    def arrays(self) -> dict:
        return {name: np.asarray(getattr(self, name), dtype=float)
                for name in ("times", "energies", "slopes", "H_values", "step_norms",
                             "forcing_norms", "selection_norms", "dissipation_residuals",
                             "inequality_violations")}


def _hnorm(grid, a) -> float:
    return float(np.sqrt(grid.integrate(a * a)))


def step(E: EnergyHandle, u, f_k, tau: float, prox_tol: float = PROX_TOL,
         certify: bool = True):
    """One implicit step; returns ``(u_plus, prox residual)``.

    Raises :class:`ParameterError` when ``tau >= 1/(2 omega)`` and
    ``RuntimeError`` when the certificate exceeds ``prox_tol``.
    """
    if E.omega > 0 and not tau < 1.0 / (2.0 * E.omega):
        raise ParameterError(f"tau={tau} violates tau < 1/(2 omega) for {E.name}")
    a = _arr(u)
    shifted = a if f_k is None else a + tau * _arr(f_k)
    u_plus = E.prox(shifted, tau)
    res = 0.0
    if certify:
        res = prox_residual(E, shifted, tau, u_plus, samples=4, canonical=False)
        if not res <= prox_tol:
            raise RuntimeError(f"step inclusion not certified: residual {res:.3e} > {prox_tol:.1e}")
    if isinstance(u, GridFunction):
        return GridFunction(E.grid, u_plus), res
    return u_plus, res


def run(E: EnergyHandle, u0, cfg: FlowConfig) -> Trajectory:
    """Integrate from ``u0`` to ``cfg.t_end``.

    Unforced runs check the minimizing-movement inequality
    ``E_k - E_{k+1} >= |u_{k+1} - u_k|^2 / (2 tau)`` step by step and store
    any shortfall in ``inequality_violations``. On failure a
    :class:`FlowError` carries the partial trajectory.
    """
    cfg.validate_for(E)
    grid = E.grid
    u = np.array(_arr(u0), dtype=float)
    e = E.value(u)
    if not math.isfinite(e):
        raise DomainError(f"initial state outside dom {E.name}")
    stride = cfg.stride(grid.size)
    tau = cfg.tau
    traj = Trajectory(grid, tau, E.name, E.omega)

    def record(k, t, state, energy):
        traj.times.append(t)
        traj.energies.append(energy)
        if k % stride == 0:
            traj.recorded.append(k)
            traj.states.append(state.copy())
            traj.slopes.append(slope(E, state, tol=cfg.slope_tol, rtol=cfg.slope_rtol)
                               if cfg.slopes else math.nan)
        else:
            traj.slopes.append(math.nan)

    record(0, 0.0, u, e)
    K = cfg.n_steps
    for k in range(K):
        t = k * tau
        f = None if cfg.forcing is None else np.asarray(cfg.forcing(t), dtype=float)
        try:
            u_new, res = step(E, u, f, tau, cfg.prox_tol, cfg.certify)
            e_new = E.value(u_new)
            if not math.isfinite(e_new):
                raise DomainError("step left the effective domain")
        except Exception as exc:  # noqa: BLE001 - rewrapped with context
            traj.last_state = u
            _finish_H(traj, cfg)
            raise FlowError(f"step {k} failed: {exc}", k, traj) from exc
        du = u_new - u
        dn = _hnorm(grid, du)
        delta = du / tau
        fn = 0.0 if f is None else _hnorm(grid, f)
        g = -delta if f is None else f - delta
        gn = _hnorm(grid, g)
        traj.step_norms.append(dn)
        traj.forcing_norms.append(fn)
        traj.selection_norms.append(gn)
        traj.prox_residuals.append(res)
        dn_tau = dn / tau
        traj.dissipation_residuals.append(
            abs(e_new - e + tau * (0.5 * dn_tau**2 + 0.5 * gn**2 - 0.5 * fn**2)))
        if f is None:
            traj.inequality_violations.append(max(0.0, dn * dn / (2 * tau) - (e - e_new)))
        else:
            traj.inequality_violations.append(0.0)
        u, e = u_new, e_new
        record(k + 1, (k + 1) * tau, u, e)
    traj.last_state = u
    if traj.recorded[-1] != K:
        traj.recorded.append(K)
        traj.states.append(u.copy())
        traj.slopes[-1] = (slope(E, u, tol=cfg.slope_tol, rtol=cfg.slope_rtol)
                           if cfg.slopes else math.nan)
    _finish_H(traj, cfg)
    return traj


def _finish_H(traj: Trajectory, cfg: FlowConfig) -> None:
    tail = np.asarray(traj.forcing_norms, dtype=float) ** 2 * traj.tau
    # H_k = E_k + 1/2 sum_{j >= k} tau |f_j|^2 (forcing beyond t_end taken as zero)
    suffix = np.concatenate([np.cumsum(tail[::-1])[::-1], [0.0]])
    traj.H_values = list(np.asarray(traj.energies) + 0.5 * suffix[:len(traj.energies)])


def slack(traj: Trajectory, prox_tol: float = PROX_TOL) -> np.ndarray:
    """Per-step tolerance ``omega tau |du|^2 + 10 prox_tol``."""
    dn = np.asarray(traj.step_norms)
    return traj.omega * traj.tau * dn**2 + 10.0 * prox_tol


@dataclass(frozen=True)
class DefectReport:
    defects: np.ndarray
    max_defect: float
    mean_defect: float


def energy_identity_report(traj: Trajectory) -> DefectReport:
    """Per-step defect of the discrete energy identity

    ``E_{k+1} - E_k + tau (|delta_k|^2 + |g_k|^2 - |f_k|^2) / 2``

    with ``delta_k = (u_{k+1} - u_k)/tau`` and ``g_k = f_k - delta_k``.
    """
    d = np.asarray(traj.dissipation_residuals, dtype=float)
    if d.size == 0:
        return DefectReport(d, 0.0, 0.0)
    return DefectReport(d, float(d.max()), float(d.mean()))


def discrete_H(traj: Trajectory, cfg: FlowConfig | None = None,
               check: bool = True) -> np.ndarray:
    """``H_k = E_k + 1/2 sum_{j >= k} tau |f_j|^2``; optionally asserts it is
    non-increasing within :func:`slack`."""
    H = np.asarray(traj.H_values, dtype=float)
    if check and H.size > 1:
        prox_tol = PROX_TOL if cfg is None else cfg.prox_tol
        rise = np.diff(H) - slack(traj, prox_tol)
        if np.any(rise > 0):
            k = int(np.argmax(rise))
            raise AssertionError(f"H increases at step {k} by {np.diff(H)[k]:.3e}")
    return H


# -- export ----------------------------------------------------------------

TRAJ_HEADER = ["t", "energy", "slope", "step_norm", "cum_length", "H", "defect"]


def _cell(x: float) -> str:
    return "" if x is None or (isinstance(x, float) and math.isnan(x)) else format(float(x), ".17g")


def trajectory_csv(traj: Trajectory) -> str:
    """CSV text; row ``k`` carries the step ``k-1 -> k`` quantities."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRAJ_HEADER)
    cum = traj.cumulative_length
    for k, t in enumerate(traj.times):
        sn = traj.step_norms[k - 1] if k > 0 else 0.0
        df = traj.dissipation_residuals[k - 1] if k > 0 else 0.0
        w.writerow([_cell(t), _cell(traj.energies[k]), _cell(traj.slopes[k]), _cell(sn),
                    _cell(cum[k]), _cell(traj.H_values[k]), _cell(df)])
    return buf.getvalue()


def write_trajectory(traj: Trajectory, out_dir: str | Path, run_id: str,
                     states: bool = True) -> Path:
    """Write ``<run-id>/traj.csv`` and ``<run-id>/state_<k>.csv``."""
    root = Path(out_dir) / run_id
    root.mkdir(parents=True, exist_ok=True)
    (root / "traj.csv").write_text(trajectory_csv(traj))
    if states:
        for k, s in zip(traj.recorded, traj.states):
            hilbert.save_csv(GridFunction(traj.grid, s), root / f"state_{k}.csv")
    return root


def read_trajectory_csv(path: str | Path) -> dict:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return {key: np.array([float(r[key]) if r[key] != "" else math.nan for r in rows])
            for key in TRAJ_HEADER}
