"""Randomized property suites behind ``gradflow verify``.

Every property returns a :class:`PropertyResult`; a failure carries the
offending data so it can be reproduced. Suites are deterministic for a
fixed seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import analysis, energies, flow
from .energy import (EnergyHandle, check_subgradient, energy_metric, prox_residual,
                     refined_selection)


@dataclass
class PropertyResult:
    suite: str
    name: str
    passed: bool
    detail: str = ""
    counterexample: dict = field(default_factory=dict)

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        text = f"{tag} {self.suite}: {self.name}"
        if self.detail:
            text += f" ({self.detail})"
        if not self.passed and self.counterexample:
            text += f" counterexample={self.counterexample}"
        return text


def catalogue() -> list[EnergyHandle]:
    """Energies exercised by the suites."""
    return [
        energies.quadratic(65),
        energies.power(2.0),
        energies.power(4.0),
        energies.dirichlet1d(65),
        energies.dirichlet2d(17),
        energies.semilinear(65),
        energies.tv1d(64),
        energies.constrained(energies.dirichlet1d(65), (0.0, 1.0)),
    ]


def random_states(E: EnergyHandle, count: int, rng: np.random.Generator) -> np.ndarray:
    """Domain points mixing smooth and rough profiles of varying amplitude."""
    grid = E.grid
    shape = (count,) + grid.shape
    amp = 10.0 ** rng.uniform(-1, 0.2, count).reshape((count,) + (1,) * grid.dim)
    rough = rng.standard_normal(shape)
    if grid.size > 1:
        x = grid.nodes[0] if grid.dim == 2 else grid.nodes
        k = rng.integers(0, 4, count).reshape((count,) + (1,) * grid.dim)
        phase = rng.uniform(0, 2 * np.pi, count).reshape((count,) + (1,) * grid.dim)
        smooth = np.cos(k * np.pi * x + phase)
        mix = rng.uniform(0, 1, count).reshape((count,) + (1,) * grid.dim)
        rough = mix * smooth + (1 - mix) * 0.3 * rough
    if E.name.startswith("semilinear"):
        amp = np.minimum(amp, 1.0)
    return E.project(amp * rough)


def _metric_distances(E: EnergyHandle, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = np.sqrt(E.grid.integrate((a - b) ** 2))
    return d + np.abs(E.values(a) - E.values(b))


def check_metric(E: EnergyHandle, triples: int = 1000, seed: int = 0,
                 rtol: float = 1e-12) -> PropertyResult:
    """Identity, symmetry, positivity and the triangle inequality for d_E."""
    rng = np.random.default_rng(seed)
    u, v, w = (random_states(E, triples, rng) for _ in range(3))
    duv, dvu = _metric_distances(E, u, v), _metric_distances(E, v, u)
    dvw, duw = _metric_distances(E, v, w), _metric_distances(E, u, w)
    duu = _metric_distances(E, u, u)
    scale = np.maximum(1.0, duv + dvw)
    bad = {
        "identity": np.flatnonzero(duu != 0),
        "symmetry": np.flatnonzero(np.abs(duv - dvu) > rtol * scale),
        "positivity": np.flatnonzero((duv <= 0) & np.any(u != v, axis=tuple(range(1, u.ndim)))),
        "triangle": np.flatnonzero(duw - (duv + dvw) > rtol * scale),
    }
    # the batched evaluation must agree with the pointwise operation
    for i in range(min(5, triples)):
        de = energy_metric(E, u[i], v[i]).de
        if abs(de - duv[i]) > 1e-13 * max(1.0, de):
            return PropertyResult("metric", f"{E.name} batch/pointwise agreement", False,
                                  counterexample={"index": i, "pointwise": de, "batched": duv[i]})
    for axiom, idx in bad.items():
        if idx.size:
            i = int(idx[0])
            return PropertyResult("metric", f"{E.name} {axiom}", False,
                                  f"{idx.size} of {triples} triples",
                                  {"index": i, "d_uv": float(duv[i]), "d_vw": float(dvw[i]),
                                   "d_uw": float(duw[i])})
    return PropertyResult("metric", f"{E.name} metric axioms", True, f"{triples} triples")


def check_selection(E: EnergyHandle, points: int = 4, seed: int = 0,
                    tol: float = 1e-8) -> PropertyResult:
    """The minimal selection passes the subgradient test; a shifted one fails."""
    rng = np.random.default_rng(seed)
    worst = -math.inf
    for u in random_states(E, points, rng):
        g = refined_selection(E, u)
        el = check_subgradient(E, u, g, samples=32, seed=seed, tol=tol,
                               canonical=E.grid.size <= 128)
        worst = max(worst, el.worst_violation)
        if not el.tested:
            return PropertyResult("subgradient", f"{E.name} minimal selection", False,
                                  counterexample={"violation": el.worst_violation})
        # a far-off element is rejected by the probe set
        gn = math.sqrt(E.grid.integrate(g * g))
        bump = (max(1.0, gn) * 10.0) * np.ones(E.grid.shape)
        bad = check_subgradient(E, u, g + bump, samples=32, seed=seed, tol=tol,
                                canonical=E.grid.size <= 128)
        if bad.tested:
            return PropertyResult("subgradient", f"{E.name} rejects non-elements", False,
                                  counterexample={"violation": bad.worst_violation})
    return PropertyResult("subgradient", f"{E.name} minimal selection", True,
                          f"worst violation {worst:.1e}")


def check_prox(E: EnergyHandle, pairs: int = 20, seed: int = 0,
               tol: float = 1e-9) -> PropertyResult:
    """``(v - p)/lam`` lies in ``dE(p)`` for ``p = prox(v, lam)``."""
    rng = np.random.default_rng(seed)
    vs = random_states(E, pairs, rng) + 0.1 * rng.standard_normal((pairs,) + E.grid.shape)
    lam_max = min(1.0, 0.9 * E.max_step)
    lams = lam_max * 10.0 ** rng.uniform(-4, 0, pairs)
    worst = 0.0
    for v, lam in zip(vs, lams):
        p = E.prox(v, lam)
        res = prox_residual(E, v, lam, p, samples=8, canonical=E.grid.size <= 128)
        worst = max(worst, res)
        if not res <= tol:
            return PropertyResult("prox", f"{E.name} prox certificate", False,
                                  counterexample={"lam": float(lam), "residual": res})
    return PropertyResult("prox", f"{E.name} prox certificate", True,
                          f"{pairs} pairs, worst residual {worst:.1e}")


def check_monotone(E: EnergyHandle, starts: int = 5, seed: int = 0, tau: float = 1e-2,
                   steps: int = 20) -> PropertyResult:
    """Unforced energies decrease along the scheme within the step slack."""
    rng = np.random.default_rng(seed)
    tau = min(tau, 0.45 / E.omega) if E.omega > 0 else tau
    cfg = flow.FlowConfig(tau, tau * steps, slopes=False)
    for i, u0 in enumerate(random_states(E, starts, rng)):
        traj = flow.run(E, u0, cfg)
        rise = np.diff(traj.energies) - flow.slack(traj)
        if np.any(rise > 0):
            k = int(np.argmax(rise))
            return PropertyResult("flow", f"{E.name} energy monotone", False,
                                  counterexample={"start": i, "step": k, "rise": float(rise[k])})
    return PropertyResult("flow", f"{E.name} energy monotone", True, f"{starts} starts")


def check_H_decrease(seed: int = 0) -> PropertyResult:
    E = energies.quadratic(65)
    f = np.ones(E.grid.shape)
    zero = np.zeros(E.grid.shape)
    cfg = flow.FlowConfig(1e-2, 3.0, forcing=lambda t: f if t < 1.0 else zero, slopes=False)
    traj = flow.run(E, np.cos(np.pi * E.grid.nodes), cfg)
    try:
        flow.discrete_H(traj, cfg, check=True)
    except AssertionError as exc:
        return PropertyResult("flow", "H non-increasing under forcing", False, str(exc))
    return PropertyResult("flow", "H non-increasing under forcing", True)


def check_defect_order() -> PropertyResult:
    """Energy identity defect of the quadratic run scales like tau^2."""
    E = energies.quadratic(65)
    u0 = np.ones(E.grid.shape)
    defects = []
    for tau in (1e-2, 5e-3, 2.5e-3):
        traj = flow.run(E, u0, flow.FlowConfig(tau, 1.0, slopes=False))
        defects.append(flow.energy_identity_report(traj).max_defect)
    ratios = [defects[i] / defects[i + 1] for i in range(2)]
    ok = all(3.0 <= r <= 5.0 for r in ratios)
    return PropertyResult("flow", "energy identity defect O(tau^2)", ok,
                          "ratios " + ", ".join(f"{r:.3f}" for r in ratios),
                          {} if ok else {"defects": defects})


def check_calibration(tol: float = 0.02) -> list[PropertyResult]:
    out = []
    cases = [("quadratic", energies.quadratic(65), 0.5, 1e-2, 10.0),
             ("power(3)", energies.power(3.0), 2.0 / 3.0, 0.05, 200.0)]
    for label, E, target, tau, t_end in cases:
        traj = flow.run(E, np.ones(E.grid.shape), flow.FlowConfig(tau, t_end))
        prof = analysis.fit_kl_profile(traj)
        ok = abs(prof.theta - target) <= tol and prof.margin_min >= 0.95
        out.append(PropertyResult("analysis", f"{label} Lojasiewicz exponent", ok,
                                  f"theta {prof.theta:.4f} vs {target:.4f}, "
                                  f"margin {prof.margin_min:.3f}"))
    return out


def check_chain_rule(points: int = 10, seed: int = 0, tol: float = 1e-8) -> PropertyResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in (2.0, 3.0, 4.0):
        E = energies.power(p)
        theta = (p - 1.0) / p
        prof = analysis.KLProfile(theta, p ** (-theta), 0.0)
        for u in rng.uniform(0.1, 2.0, points) * rng.choice([-1.0, 1.0], points):
            worst = max(worst, analysis.chain_rule_check(E, prof, np.array([u])))
    return PropertyResult("analysis", "chain rule for Theta o E", worst <= tol,
                          f"max defect {worst:.1e}")


def _suite_metric(seed):
    return [check_metric(E, 1000, seed) for E in catalogue()]


def _suite_subgradient(seed):
    return [check_selection(E, 4, seed) for E in catalogue()]


def _suite_prox(seed):
    return [check_prox(E, 20, seed) for E in catalogue()]


def _suite_flow(seed):
    out = [check_monotone(E, 5, seed) for E in catalogue()]
    return out + [check_H_decrease(seed), check_defect_order()]


def _suite_analysis(seed):
    return check_calibration() + [check_chain_rule(seed=seed)]


SUITES: dict[str, Callable[[int], list[PropertyResult]]] = {
    "metric": _suite_metric,
    "subgradient": _suite_subgradient,
    "prox": _suite_prox,
    "flow": _suite_flow,
    "analysis": _suite_analysis,
}


def run_suite(name: str, seed: int = 0) -> list[PropertyResult]:
    if name == "all":
        return [r for key in SUITES for r in SUITES[key](seed)]
    if name not in SUITES:
        raise KeyError(name)
    return SUITES[name](seed)
