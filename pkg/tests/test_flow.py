import math

import numpy as np
import pytest

from gradflow import energies, flow, hilbert
from gradflow.energy import EnergyHandle, ParameterError, check_subgradient
from gradflow.flow import FlowConfig, FlowError
from gradflow.hilbert import Grid, GridFunction

from oracles import neumann_eigenvalue


def extinction_time(traj):
    for k, s in zip(traj.recorded, traj.states):
        if s.max() == s.min():
            return traj.times[k]
    return math.inf


class TestFlowConfig:
    def test_validation(self):
        with pytest.raises(ParameterError):
            FlowConfig(0.0, 1.0)
        with pytest.raises(ParameterError):
            FlowConfig(0.1, 0.05)
        with pytest.raises(ParameterError):
            FlowConfig(0.1, 1.0, record_every=0)

    def test_step_bound_for_semiconvex(self):
        E = energies.semilinear(9)
        with pytest.raises(ParameterError, match="1/\\(2 omega\\)"):
            FlowConfig(1 / 22, 1.0).validate_for(E)
        FlowConfig(0.04, 1.0).validate_for(E)

    def test_default_stride(self):
        cfg = FlowConfig(0.1, 1.0)
        assert cfg.stride(256) == 1 and cfg.stride(257) == 10
        assert cfg.n_steps == 10


class TestStep:
    def test_equilibrium_fixed(self):
        E = energies.dirichlet1d(33)
        u = np.full(33, 0.7)
        u_plus, res = flow.step(E, u, None, 1e-2)
        assert np.allclose(u_plus, u, atol=1e-10)
        assert res <= 1e-9

    def test_quadratic_closed_form(self):
        E = energies.quadratic(17)
        u = GridFunction.from_callable(E.grid, np.exp)
        u_plus, _ = flow.step(E, u, None, 0.01)
        assert isinstance(u_plus, GridFunction)
        assert np.array_equal(u_plus.values, u.values / 1.01)

    def test_dirichlet_cosine_one_step(self):
        n, tau = 129, 1e-3
        E = energies.dirichlet1d(n)
        u = np.cos(np.pi * E.grid.nodes)
        u_plus, _ = flow.step(E, u, None, tau)
        assert np.allclose(u_plus, u / (1 + tau * neumann_eigenvalue(n, 1)), atol=1e-10)

    def test_forced_step_inclusion(self, rng):
        E = energies.tv1d(32)
        u = rng.standard_normal(32)
        f = rng.standard_normal(32)
        tau = 0.02
        u_plus, _ = flow.step(E, u, f, tau)
        g = f - (u_plus - u) / tau
        assert check_subgradient(E, u_plus, g).tested

    def test_step_bound(self):
        with pytest.raises(ParameterError):
            flow.step(energies.semilinear(9), np.zeros(9), None, 0.05)


class TestRun:
    def test_quadratic_energy_decay(self):
        E = energies.quadratic(65)
        tau = 1e-3
        traj = flow.run(E, np.ones(65), FlowConfig(tau, 5.0, slopes=False))
        assert traj.n_steps == 5000
        exact_recursion = 0.5 * (1 + tau) ** (-2 * 5000)
        assert traj.energies[-1] == pytest.approx(exact_recursion, rel=1e-10)
        assert traj.energies[-1] == pytest.approx(0.5 * math.exp(-10), rel=1e-2)

    def test_dirichlet_mean_conserved(self, rng):
        E = energies.dirichlet1d(65)
        u0 = rng.standard_normal(65)
        traj = flow.run(E, u0, FlowConfig(1e-2, 2.0, slopes=False))
        mean0 = E.grid.integrate(u0)
        assert max(abs(E.grid.integrate(s) - mean0) for s in traj.states) <= 1e-10
        assert np.allclose(traj.last_state, mean0, atol=1e-6)

    def test_tv_extinction_consistent_under_refinement(self):
        E = energies.tv1d(64)
        u0 = np.where(E.grid.nodes > 0.5, 1.0, 0.0)
        coarse = flow.run(E, u0, FlowConfig(1e-2, 0.4, slopes=False))
        fine = flow.run(E, u0, FlowConfig(1e-3, 0.4, slopes=False))
        t_c, t_f = extinction_time(coarse), extinction_time(fine)
        assert t_c < 0.4 and t_f < 0.4
        assert abs(t_c - t_f) <= 0.05 * t_f
        # contrast 1 shrinks by 4 tau per step, so extinction near t = 1/4
        assert t_f == pytest.approx(0.25, abs=2e-3)
        # once flat, it stays flat
        k = coarse.recorded.index(int(round(t_c / 1e-2)))
        assert all(s.max() == s.min() for s in coarse.states[k:])

    def test_contractive_for_convex(self, rng):
        for E in (energies.dirichlet1d(33), energies.tv1d(33), energies.quadratic(33)):
            a, b = rng.standard_normal((2, 33))
            cfg = FlowConfig(1e-2, 0.5, slopes=False)
            ta, tb = flow.run(E, a, cfg), flow.run(E, b, cfg)
            d = [math.sqrt(E.grid.integrate((x - y) ** 2)) for x, y in zip(ta.states, tb.states)]
            assert all(d[i + 1] <= d[i] + 1e-10 for i in range(len(d) - 1))

    @pytest.mark.parametrize("name", ["quadratic", "power(3)", "dirichlet1d(33)",
                                      "dirichlet2d(9)", "semilinear(33)", "tv1d(32)",
                                      "constrained(dirichlet1d(33), box=[0,1])"])
    def test_unforced_energy_monotone(self, name, rng):
        E = energies.make_energy(name)
        tau = 0.01
        for _ in range(5):
            u0 = E.project(rng.uniform(-1.2, 1.2, E.grid.shape))
            traj = flow.run(E, u0, FlowConfig(tau, 0.3, slopes=False))
            assert np.all(np.diff(traj.energies) <= flow.slack(traj))
            assert np.all(np.asarray(traj.inequality_violations) <= flow.slack(traj))

    def test_cumulative_length_nondecreasing(self):
        E = energies.dirichlet1d(33)
        traj = flow.run(E, E.grid.nodes.copy(), FlowConfig(1e-2, 1.0, slopes=False))
        assert np.all(np.diff(traj.cumulative_length) >= 0)

    def test_slopes_recorded_on_stride(self):
        E = energies.quadratic(17)
        traj = flow.run(E, np.ones(17), FlowConfig(0.1, 1.0, record_every=3))
        assert traj.recorded == [0, 3, 6, 9, 10]
        sl = np.asarray(traj.slopes)
        assert np.all(np.isfinite(sl[traj.recorded]))
        assert np.all(np.isnan(np.delete(sl, traj.recorded)))
        assert sl[3] == pytest.approx(1.1**-3, rel=1e-8)

    def test_outside_domain_start(self):
        E = energies.constrained(energies.dirichlet1d(9))
        with pytest.raises(ValueError):
            flow.run(E, np.full(9, 2.0), FlowConfig(0.1, 1.0))

    def test_failure_carries_partial(self):
        g = Grid(5)
        calls = {"n": 0}

        def prox(v, lam):
            calls["n"] += 1
            if calls["n"] > 3:
                raise RuntimeError("solver breakdown")
            return v / (1 + lam)

        E = EnergyHandle("flaky", g, lambda a: 0.5 * g.integrate(a * a), prox)
        with pytest.raises(FlowError) as info:
            flow.run(E, np.ones(5), FlowConfig(0.1, 1.0, certify=False, slopes=False))
        assert info.value.step == 3
        assert info.value.partial.n_steps == 3
        assert len(info.value.partial.H_values) == 4


class TestEnergyIdentity:
    def test_order_tau_squared(self):
        E = energies.quadratic(65)
        d = []
        for tau in (1e-2, 5e-3, 2.5e-3):
            traj = flow.run(E, np.ones(65), FlowConfig(tau, 1.0, slopes=False))
            d.append(flow.energy_identity_report(traj).max_defect)
        assert 3 <= d[0] / d[1] <= 5 and 3 <= d[1] / d[2] <= 5

    def test_equilibrium(self):
        E = energies.dirichlet1d(17)
        traj = flow.run(E, np.full(17, 0.2), FlowConfig(0.1, 1.0, slopes=False))
        assert flow.energy_identity_report(traj).max_defect <= 1e-10

    def test_unforced_identity(self, rng):
        E = energies.tv1d(16)
        tau = 0.01
        traj = flow.run(E, rng.standard_normal(16), FlowConfig(tau, 0.2, slopes=False))
        rep = flow.energy_identity_report(traj)
        dn = np.asarray(traj.step_norms) / tau
        expected = np.abs(np.diff(traj.energies) + tau * dn**2)
        assert np.allclose(rep.defects, expected, rtol=1e-12, atol=1e-15)
        assert rep.mean_defect <= rep.max_defect


class TestDiscreteH:
    def test_unforced_equals_energy(self):
        E = energies.dirichlet1d(17)
        cfg = FlowConfig(0.01, 0.5, slopes=False)
        traj = flow.run(E, E.grid.nodes.copy(), cfg)
        assert np.array_equal(flow.discrete_H(traj, cfg), np.asarray(traj.energies))

    def test_forced_quadratic(self):
        E = energies.quadratic(17)
        one, zero = np.ones(17), np.zeros(17)
        tau = 0.01
        cfg = FlowConfig(tau, 3.0, forcing=lambda t: one if t < 1.0 else zero, slopes=False)
        traj = flow.run(E, np.zeros(17), cfg)
        H = flow.discrete_H(traj, cfg)
        # scalar recursion u_{k+1} = (u_k + tau f_k)/(1 + tau)
        u = 0.0
        for k in range(traj.n_steps):
            u = (u + tau * (1.0 if k * tau < 1.0 - 1e-12 else 0.0)) / (1 + tau)
        assert traj.last_state[0] == pytest.approx(u, rel=1e-12)
        tail = 0.5 * tau * np.sum(np.asarray(traj.forcing_norms) ** 2)
        assert H[0] == pytest.approx(tail, rel=1e-12)
        assert np.all(np.diff(H) <= flow.slack(traj))

    def test_equilibrium_constant(self):
        E = energies.quadratic(9)
        cfg = FlowConfig(0.1, 1.0, slopes=False)
        traj = flow.run(E, np.zeros(9), cfg)
        assert np.all(flow.discrete_H(traj, cfg) == 0.0)

    def test_rise_detected(self):
        E = energies.quadratic(9)
        cfg = FlowConfig(0.1, 1.0, slopes=False)
        traj = flow.run(E, np.ones(9), cfg)
        traj.H_values[5] += 1.0
        with pytest.raises(AssertionError, match="H increases"):
            flow.discrete_H(traj, cfg)


class TestExport:
    def test_csv_layout_and_round_trip(self, tmp_path):
        E = energies.quadratic(9)
        traj = flow.run(E, np.ones(9), FlowConfig(0.1, 1.0, record_every=4))
        root = flow.write_trajectory(traj, tmp_path, "demo")
        text = (root / "traj.csv").read_text()
        lines = text.splitlines()
        assert lines[0] == "t,energy,slope,step_norm,cum_length,H,defect"
        assert len(lines) == 12
        assert lines[2].split(",")[2] == ""  # slope blank off-stride
        data = flow.read_trajectory_csv(root / "traj.csv")
        assert np.array_equal(data["energy"], np.asarray(traj.energies))
        assert np.array_equal(data["cum_length"], traj.cumulative_length)
        assert sorted(p.name for p in root.glob("state_*.csv")) == \
            ["state_0.csv", "state_10.csv", "state_4.csv", "state_8.csv"]
        back = hilbert.load_csv(root / "state_8.csv")
        assert back.values.tobytes() == traj.states[2].tobytes()

    def test_deterministic_text(self):
        E = energies.tv1d(16)
        u0 = np.linspace(0, 1, 16) ** 2
        a = flow.trajectory_csv(flow.run(E, u0, FlowConfig(0.01, 0.2)))
        b = flow.trajectory_csv(flow.run(E, u0, FlowConfig(0.01, 0.2)))
        assert a == b
