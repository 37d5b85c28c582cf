"""Post-hoc convergence diagnostics for computed trajectories.

Covers the omega-limit report, Lojasiewicz profile fitting and the KLS
inequality check, the chain rule for ``Theta o E``, the discrete
finite-length certificate and convergence in the energy metric.

Verdicts are strings: ``"PASS"``, ``"FAIL"`` or ``"INDETERMINATE"``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from .energy import (EnergyHandle, SlopeError, _arr, _probes, check_subgradient,
                     energy_metric, refined_selection, slope, subgradient_violations)
from .flow import Trajectory, energy_identity_report
from .hilbert import GridFunction

PASS, FAIL, INDETERMINATE = "PASS", "FAIL", "INDETERMINATE"


class FitError(ValueError):
    """Too few usable points for a reliable Lojasiewicz fit."""


@dataclass(frozen=True)
class KLProfile:
    """Lojasiewicz reparameterization ``Theta(s) = c/(1-theta) s^(1-theta)``
    of the energy gap ``s = E - e_inf``."""

    theta: float
    c: float
    e_inf: float
    window: tuple[int, int] = (0, 0)
    margin_min: float = math.nan
    form: str = "lojasiewicz"

    def __post_init__(self):
        if not 0 < self.theta < 1:
            raise ValueError(f"theta must lie in (0, 1), got {self.theta}")
        if not self.c > 0:
            raise ValueError(f"c must be positive, got {self.c}")

    def Theta(self, s):
        """Odd extension, strictly increasing on the real line."""
        s = np.asarray(s, dtype=float)
        return np.sign(s) * self.c / (1.0 - self.theta) * np.abs(s) ** (1.0 - self.theta)

    def dTheta(self, s):
        s = np.asarray(s, dtype=float)
        with np.errstate(divide="ignore"):
            return self.c * np.abs(s) ** (-self.theta)


# -- omega-limit -------------------------------------------------------------

@dataclass
class OmegaLimitReport:
    candidate_phi: GridFunction
    tail_indices: np.ndarray
    tail_H_distances: np.ndarray
    tail_energy_gaps: np.ndarray
    tail_dE_distances: np.ndarray
    slope_at_phi: float
    energy_at_phi: float
    converged: bool
    verdict: str
    notes: list = field(default_factory=list)


def omega_limit_report(traj: Trajectory, E: EnergyHandle, tail_fraction: float = 0.2,
                       threshold: float = 1e-6, slope_threshold: float = 1e-6,
                       min_states: int = 10) -> OmegaLimitReport:
    """Tail diagnostics around ``phi`` = last recorded state.

    CONVERGED means every H-distance and energy gap over the last
    ``tail_fraction`` of recorded states is below ``threshold``; the
    energy-metric distances must then vanish with them and the slope at
    ``phi`` must be below ``slope_threshold``.
    """
    n_rec = len(traj.recorded)
    start = int(math.floor((1.0 - tail_fraction) * n_rec))
    idx = np.arange(start, n_rec)
    if idx.size < min_states:
        raise ValueError(f"tail window holds {idx.size} recorded states, need {min_states}")
    phi = traj.states[-1]
    e_phi = E.value(phi)
    grid = traj.grid
    dH = np.array([math.sqrt(grid.integrate((traj.states[i] - phi) ** 2)) for i in idx])
    gaps = np.array([abs(traj.energies[traj.recorded[i]] - e_phi) for i in idx])
    dE = np.array([energy_metric(E, traj.states[i], phi).de for i in idx])
    try:
        s_phi = slope(E, phi, tol=1e-10, rtol=1e-8)
    except SlopeError:
        s_phi = math.inf
    notes = []
    converged = bool(dH.max() <= threshold and gaps.max() <= threshold)
    if converged:
        if not dE.max() <= dH.max() + gaps.max() + 1e-15:
            notes.append("energy-metric tail does not follow the norm tail")
            converged = False
        if not s_phi <= slope_threshold:
            notes.append(f"slope at phi {s_phi:.3e} above {slope_threshold:.1e}")
            converged = False
    verdict = PASS if converged else INDETERMINATE
    return OmegaLimitReport(GridFunction(grid, phi), idx, dH, gaps, dE, s_phi, e_phi,
                            converged, verdict, notes)


def tail_clusters(traj: Trajectory, E: EnergyHandle, tail_fraction: float = 0.2,
                  radius: float = 1e-3) -> list[float]:
    """Energies of greedy radius-``radius`` clusters of tail states."""
    n_rec = len(traj.recorded)
    reps: list[np.ndarray] = []
    for i in range(int((1 - tail_fraction) * n_rec), n_rec):
        s = traj.states[i]
        if all(math.sqrt(traj.grid.integrate((s - r) ** 2)) > radius for r in reps):
            reps.append(s)
    return [E.value(r) for r in reps]


# -- Lojasiewicz fit ---------------------------------------------------------

def estimate_e_inf(traj: Trajectory) -> tuple[float, float]:
    """Returns ``(e_inf, noise_floor)``.

    ``e_inf`` is the final energy minus ten times the last dissipation
    defect. The noise floor also covers the energy still being released
    over the last tenth of the run, which bounds how well ``e_inf`` is
    resolved when the run stops before the energy has levelled off.
    """
    E = np.asarray(traj.energies, dtype=float)
    d_last = traj.dissipation_residuals[-1] if traj.dissipation_residuals else 0.0
    e_inf = E[-1] - 10.0 * d_last
    m = max(1, len(E) // 10)
    drop = E[-1 - m] - E[-1] if len(E) > m else 0.0
    floor = max(10.0 * d_last, drop, 1e-14 * max(1.0, abs(E[0])))
    return float(e_inf), float(floor)


def select_window(traj: Trajectory, e_inf: float, floor: float) -> tuple[int, int]:
    """First index with slope below half its maximum, through the last index
    whose gap exceeds a hundred noise floors (inclusive)."""
    s = np.asarray(traj.slopes, dtype=float)
    gaps = np.asarray(traj.energies, dtype=float) - e_inf
    ok = np.isfinite(s)
    if not ok.any():
        raise FitError("no slopes recorded")
    smax = np.nanmax(s)
    start_candidates = np.nonzero(ok & (s < 0.5 * smax))[0]
    end_candidates = np.nonzero(gaps > 100.0 * floor)[0]
    if end_candidates.size == 0:
        raise FitError("trajectory never enters the fit regime")
    end = int(end_candidates[-1])
    early = start_candidates[start_candidates < end] if start_candidates.size else start_candidates
    if early.size == 0:
        # the slope holds its maximum until the gap closes (finite-time
        # extinction); there is no transient to cut, fit from the start
        start = int(np.nonzero(ok)[0][0])
        if start >= end:
            raise FitError("trajectory never enters the fit regime")
        return start, end
    return int(early[0]), end


def _loglog_fit(gaps, s, max_points):
    """Thinned least squares of ``log s`` on ``log gap``; returns
    ``(theta, c, rms, lg, ls)``."""
    lg, ls = np.log(gaps), np.log(s)
    grid_pts = np.linspace(lg.max(), lg.min(), min(max_points, lg.size))
    order = np.argsort(lg)
    pick = np.unique(order[np.clip(np.searchsorted(lg[order], grid_pts), 0, lg.size - 1)])
    A = np.column_stack([lg[pick], np.ones(pick.size)])
    (theta, b), *_ = np.linalg.lstsq(A, ls[pick], rcond=None)
    rms = float(np.sqrt(np.mean((A @ np.array([theta, b]) - ls[pick]) ** 2)))
    theta = float(np.clip(theta, 1e-3, 1 - 1e-3))
    c = float(math.exp(-(np.mean(ls[pick]) - theta * np.mean(lg[pick]))))
    return theta, c, rms, lg, ls


def fit_kl_profile(traj: Trajectory, window: Optional[tuple[int, int]] = None,
                   e_inf: Optional[float] = None, max_points: int = 400,
                   refine_e_inf: bool = True) -> KLProfile:
    """Least-squares fit of ``log s = theta log(E - e_inf) - log c``.

    Points are thinned to roughly uniform spacing in ``log(E - e_inf)`` so a
    long slow tail does not dominate the fit. The returned profile carries
    the smallest KLS margin ``c (E - e_inf)^-theta |dE|`` over the window.

    With ``refine_e_inf`` (and no ``e_inf`` given) the limit energy is
    lowered from the end-point estimate to the value that makes the window
    most nearly a power law. Runs that stop during a slow algebraic decay
    otherwise leave ``e_inf`` too high, which bends the log-log curve and
    biases ``theta`` low.
    """
    est, floor = estimate_e_inf(traj)
    given = e_inf is not None
    if not given:
        e_inf = est
    if window is None:
        window = select_window(traj, e_inf, floor)
    k0, k1 = window
    s = np.asarray(traj.slopes, dtype=float)[k0:k1 + 1]
    energy = np.asarray(traj.energies, dtype=float)[k0:k1 + 1]
    use = np.isfinite(s) & (s > 0) & (energy - e_inf > max(floor, 0.0))
    if use.sum() < 5:
        raise FitError(f"only {int(use.sum())} usable points in window {window}")
    s, energy = s[use], energy[use]
    if math.log(energy.max() - e_inf) - math.log(energy.min() - e_inf) < 1e-6:
        raise FitError("energy gaps do not vary over the window")
    theta, c, rms, lg, ls = _loglog_fit(energy - e_inf, s, max_points)
    if refine_e_inf and not given:
        span = float(energy.max() - energy.min())
        for shift in span * np.logspace(-12, 0, 97):
            cand = _loglog_fit(energy - (e_inf - shift), s, max_points)
            if cand[2] < rms * (1 - 1e-9):
                theta, c, rms, lg, ls = cand
                best = e_inf - shift
        e_inf = locals().get("best", e_inf)
    margins = c * np.exp(-theta * lg) * np.exp(ls)
    return KLProfile(theta, c, float(e_inf), (int(k0), int(k1)), float(margins.min()))


@dataclass
class MarginReport:
    margins: np.ndarray
    skipped: int
    indeterminate: int
    margin_min: float
    verdict: str


def check_kls_inequality(E: EnergyHandle, profile: KLProfile, points: Iterable,
                         slope_resolution: float = 1e-12, threshold: float = 0.95,
                         slopes: Optional[Iterable[float]] = None) -> MarginReport:
    """Margins ``Theta'(E(v) - e_inf) |dE(v)|``; PASS if all are at least
    ``threshold``.

    Points with ``E <= e_inf`` are skipped, and so are equilibria, where
    ``0 in dE(v)`` passes the subgradient test. Other points whose slope is
    below resolution are indeterminate."""
    margins, skipped, indet = [], 0, 0
    slopes = None if slopes is None else list(slopes)
    for i, v in enumerate(points):
        gap = E.value(v) - profile.e_inf
        s = slope(E, v, tol=1e-12, rtol=1e-10) if slopes is None else slopes[i]
        if gap <= 0 or s == 0:
            skipped += 1
            continue
        if s < slope_resolution:
            if check_subgradient(E, v, np.zeros_like(_arr(v))).tested:
                skipped += 1
            else:
                indet += 1
            continue
        margins.append(float(profile.dTheta(gap) * s))
    m = np.asarray(margins)
    mmin = float(m.min()) if m.size else math.nan
    if m.size == 0:
        verdict = INDETERMINATE
    else:
        verdict = PASS if mmin >= threshold else FAIL
    return MarginReport(m, skipped, indet, mmin, verdict)


# -- chain rule --------------------------------------------------------------

def chain_rule_check(E: EnergyHandle, profile: KLProfile, u, samples: int = 16,
                     radius: float = 1e-3, composite_omega: float = 0.0,
                     seed: int = 0) -> float:
    """Worst violation of ``Theta'(E(u) - e_inf) g in d(Theta o (E - e_inf))(u)``.

    ``g`` is the Richardson-refined minimal selection at ``u``. Probes are
    confined to a ball of radius ``radius * max(1, |u|_inf)`` since the
    composite is in general only locally semiconvex; ``composite_omega`` is
    its allowance there.
    """
    a = _arr(u)
    gap = E.value(a) - profile.e_inf
    if not gap > 0:
        raise ValueError("chain rule check needs E(u) > e_inf")
    g = refined_selection(E, a)
    f = float(profile.dTheta(gap)) * g
    comp = EnergyHandle(f"Theta o {E.name}", E.grid,
                        lambda arr: profile.Theta(E.value_fn(arr) - profile.e_inf),
                        E.prox_fn, omega=composite_omega, project_fn=E.project_fn)
    probes = _probes(comp, a, f, samples, np.random.default_rng(seed))
    # shrink every probe displacement into the local ball
    d = probes - a
    norms = np.sqrt(np.abs(E.grid.integrate(d * d)))
    rad = radius * max(1.0, float(np.max(np.abs(a))))
    scale = np.where(norms > rad, rad / np.where(norms > 0, norms, 1.0), 1.0)
    probes = E.project(a + d * scale.reshape((-1,) + (1,) * E.grid.dim))
    viol = subgradient_violations(comp, a, f, probes)
    return max(0.0, float(np.max(viol)))


# -- finite length -----------------------------------------------------------

@dataclass
class LengthCertificate:
    window: tuple[int, int]
    window_length: float
    bound: float
    total_length: float
    tail_lengths: np.ndarray
    tail_times: np.ndarray
    passed: bool
    verdict: str
    violation_range: Optional[tuple[int, int]] = None


def finite_length_certificate(traj: Trajectory, profile: KLProfile,
                              slack: float = 0.1, window: Optional[tuple[int, int]] = None,
                              n_tail: int = 10) -> LengthCertificate:
    """Discrete integrated length estimate over the window ``[k0, K]``:

    ``sum_{k0 <= k < K} |u_{k+1} - u_k| <= (Theta(gap_k0) - Theta(gap_K)) (1 + slack)``.

    Also reports the remaining length after ``n_tail`` evenly spaced times;
    these must decrease towards zero (Cauchy criterion).
    """
    k0, k1 = profile.window if window is None else window
    K = traj.n_steps
    steps = np.asarray(traj.step_norms, dtype=float)
    gaps = np.asarray(traj.energies, dtype=float) - profile.e_inf
    length = float(steps[k0:K].sum())
    bound = float(profile.Theta(gaps[k0]) - profile.Theta(gaps[K]))
    cum = traj.cumulative_length
    total = float(cum[-1])
    # partial bounds: the estimate also holds from k0 to every later index
    part_len = cum[k0:K + 1] - cum[k0]
    part_bound = (profile.Theta(gaps[k0]) - profile.Theta(gaps[k0:K + 1])) * (1 + slack)
    bad = np.nonzero(part_len > part_bound + 1e-15)[0]
    passed = length <= bound * (1 + slack) and bad.size == 0
    violation = None if bad.size == 0 else (int(k0), int(k0 + bad[0]))
    ticks = np.linspace(0, K, n_tail + 1).astype(int)[:-1]
    tails = np.array([total - cum[k] for k in ticks])
    times = np.asarray(traj.times)[ticks]
    return LengthCertificate((int(k0), int(K)), length, bound, total, tails, times, bool(passed),
                             PASS if passed else FAIL, violation)


# -- tau_E convergence -------------------------------------------------------

@dataclass
class ConvergenceVerdict:
    verdict: str
    dE_final: float
    distances: np.ndarray


def tau_e_convergence_check(traj: Trajectory, E: EnergyHandle, phi,
                            threshold: float = 1e-6, tail_fraction: float = 0.5) -> ConvergenceVerdict:
    """Energy-metric convergence ``d_E(u_k, phi) -> 0`` along the recorded
    tail. PASS if the distances are non-increasing and all below
    ``threshold``; INDETERMINATE if non-increasing but not yet below it;
    FAIL if they grow. ``dE_final`` is the largest tail distance."""
    n_rec = len(traj.recorded)
    idx = range(int((1 - tail_fraction) * n_rec), n_rec)
    d = np.array([energy_metric(E, traj.states[i], phi).de for i in idx])
    if d.size < 2:
        return ConvergenceVerdict(INDETERMINATE, float(d.max()) if d.size else math.nan, d)
    trend = bool(np.all(np.diff(d) <= max(1e-3 * threshold, 1e-12 * d[0])))
    worst = float(d.max())
    if not trend:
        v = FAIL
    else:
        v = PASS if worst <= threshold else INDETERMINATE
    return ConvergenceVerdict(v, worst, d)


# -- run report --------------------------------------------------------------

def analysis_report(traj: Trajectory, E: EnergyHandle, switches: dict) -> dict:
    """Assemble the per-run JSON report: ``kl``, ``omega``, ``length`` and
    ``chain_rule`` sections, each present when its switch is on."""
    out: dict = {}
    profile = None
    if switches.get("kl_fit", True):
        try:
            profile = fit_kl_profile(traj)
            kl = {"theta": profile.theta, "c": profile.c, "e_inf": profile.e_inf,
                  "window": list(profile.window), "margin_min": profile.margin_min}
            if switches.get("kls_check", True):
                k0, k1 = profile.window
                sl = np.asarray(traj.slopes)
                pts = [i for i in range(k0, k1 + 1) if np.isfinite(sl[i])]
                states = {k: s for k, s in zip(traj.recorded, traj.states)}
                pts = [i for i in pts if i in states]
                m = check_kls_inequality(E, profile, [states[i] for i in pts],
                                         slopes=[sl[i] for i in pts],
                                         threshold=switches.get("kls_threshold", 0.95))
                kl["kls_verdict"] = m.verdict
                kl["kls_margin_min"] = m.margin_min
            out["kl"] = kl
        except FitError as exc:
            out["kl"] = {"theta": None, "c": None, "e_inf": None, "window": None,
                         "margin_min": None, "error": str(exc)}
    if switches.get("omega", True):
        try:
            rep = omega_limit_report(traj, E, threshold=switches.get("omega_threshold", 1e-6))
            out["omega"] = {"converged": rep.converged,
                            "dE_final": float(rep.tail_dE_distances.max()),
                            "slope_at_phi": rep.slope_at_phi, "energy_at_phi": rep.energy_at_phi}
        except ValueError as exc:
            out["omega"] = {"converged": False, "dE_final": None, "slope_at_phi": None,
                            "error": str(exc)}
    if switches.get("length", True):
        if profile is not None:
            cert = finite_length_certificate(traj, profile)
            out["length"] = {"total": cert.total_length, "window_length": cert.window_length,
                             "bound": cert.bound, "pass": cert.passed}
        else:
            out["length"] = {"total": float(traj.cumulative_length[-1]), "bound": None,
                             "pass": None}
    if switches.get("chain_rule", False) and profile is not None:
        k0, k1 = profile.window
        states = dict(zip(traj.recorded, traj.states))
        ks = [k for k in range(k0, k1 + 1) if k in states]
        picks = ks[:: max(1, len(ks) // 10)]
        defects = []
        for k in picks:
            try:
                defects.append(chain_rule_check(E, profile, states[k]))
            except (ValueError, SlopeError):
                continue
        out["chain_rule"] = {"max_defect": max(defects) if defects else None}
    defects = energy_identity_report(traj)
    out["energy_identity"] = {"max_defect": defects.max_defect, "mean_defect": defects.mean_defect}
    return out


def profile_dict(profile: KLProfile) -> dict:
    return asdict(profile)
