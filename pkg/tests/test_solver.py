import io

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stochcl.grid import Field, TorusGrid, l1_norm, l2_norm, mean
from stochcl.model import get_model, polynomial_model
from stochcl.noise import NoisePath, make_sigma
from stochcl.solver import (
    CFLViolation,
    CsvObserver,
    Ensemble,
    NumericalInstability,
    SolverConfig,
    advance,
    Trajectory,
    energy_balance_residual,
    rhs,
    run,
    step,
)

from conftest import zero_mean_field

BURGERS = get_model("burgers")
NOISE_MODES = [(1, 0.3), (2, 0.2, "sin")]


def simulate(u0, model, nm, cfg, t_end, seed=1, substeps=1, observers=()):
    traj = Trajectory.start(u0, seed, cfg, substeps)
    return run(traj, model, nm, cfg, t_end, observers)


class TestSolverConfig:
    def test_convective_limit(self, grid64):
        cfg = SolverConfig(cfl=0.5, max_speed_estimate=2.0, dt_cap=1.0)
        assert cfg.time_step(grid64) == pytest.approx(0.5 / (2.0 * 64))

    def test_diffusive_rate_adds(self, grid64):
        cfg = SolverConfig(cfl=0.5, max_speed_estimate=1.0, max_diffusion_estimate=1.0, dt_cap=1.0)
        dx = 1 / 64
        assert cfg.time_step(grid64) == pytest.approx(1 / (1 / (0.5 * dx) + 1 / (0.5 * dx * dx)))

    def test_cap(self, grid64):
        assert SolverConfig(dt_cap=1e-4).time_step(grid64) == 1e-4

    @pytest.mark.parametrize(
        "kwargs",
        [{"cfl": 0.0}, {"cfl": 1.5}, {"flux_scheme": "upwind"}, {"dt_cap": 0.0},
         {"max_speed_estimate": -1.0}, {"diffusion_stability_factor": 0.7}, {"max_diffusion_estimate": -1.0}],
    )
    def test_rejects_invalid(self, kwargs):
        with pytest.raises(ValueError):
            SolverConfig(**kwargs)


class TestDeterministicDynamics:
    def test_constant_state_is_stationary(self, grid64):
        nm = make_sigma(grid64, [])
        traj = simulate(grid64.constant(0.7), BURGERS, nm, SolverConfig(), 0.5)
        np.testing.assert_array_equal(traj.state.values, 0.7)

    def test_riemann_shock_position(self):
        grid = TorusGrid(1, 512)
        u0 = grid.sample(lambda x: np.where(x < 0.5, 1.0, 0.0))
        cfg = SolverConfig(cfl=0.5, max_speed_estimate=1.0, dt_cap=1.0)
        traj = simulate(u0, BURGERS, make_sigma(grid, []), cfg, 0.5)
        x = grid.coordinates()[0]
        u = traj.state.values
        # Rankine-Hugoniot speed 1/2: the shock starting at 0.5 sits at 0.75
        region = (x > 0.6) & (x < 0.9)
        idx = np.flatnonzero(region & (u < 0.5))[0]
        position = 0.5 * (x[idx - 1] + x[idx])
        assert abs(position - 0.75) <= 3 * grid.spacing
        # the rarefaction from x = 0 has spread to the fan 0 <= x <= t
        fan = (x > 0.05) & (x < 0.45)
        np.testing.assert_allclose(u[fan], x[fan] / 0.5, atol=0.05)

    def test_heat_mode_decay(self):
        grid = TorusGrid(1, 256)
        cfg = SolverConfig(max_speed_estimate=1e-9, max_diffusion_estimate=1.0, dt_cap=1.0)
        u0 = grid.sample(lambda x: np.cos(2 * np.pi * x))
        traj = simulate(u0, get_model("heat"), make_sigma(grid, []), cfg, 0.01)
        assert traj.time == pytest.approx(0.01, abs=traj.dt)
        ratio = traj.state.values[0] / u0.values[0]
        assert ratio == pytest.approx(np.exp(-4 * np.pi**2 * traj.time), rel=1e-2)

    def test_run_to_current_time_is_a_no_op(self, grid64, rng):
        nm = make_sigma(grid64, NOISE_MODES)
        traj = simulate(Field(grid64, zero_mean_field(grid64, rng)), BURGERS, nm, SolverConfig(max_speed_estimate=3.0), 0.1)
        before = traj.state.to_bytes(), traj.step_count, traj.energy_ledger.as_tuple()
        run(traj, BURGERS, nm, SolverConfig(max_speed_estimate=3.0), traj.time)
        assert (traj.state.to_bytes(), traj.step_count, traj.energy_ledger.as_tuple()) == before

    def test_deterministic_substep_never_increases_energy(self, grid64, rng):
        u = zero_mean_field(grid64, rng, amplitude=0.8)
        cfg = SolverConfig(max_speed_estimate=3.0)
        dt = cfg.time_step(grid64)
        nm = make_sigma(grid64, NOISE_MODES)
        path = NoisePath(4, dt)
        for _ in range(2000):
            u_det = u + dt * rhs(u, BURGERS, grid64)
            assert (u_det**2).sum() <= (u**2).sum() * (1 + 1e-15)
            u = u_det + nm.sigma.values * path.next_increment()

    def test_l1_norm_decays(self, grid64, rng):
        u0 = Field(grid64, zero_mean_field(grid64, rng, amplitude=0.6))
        norms = []
        cfg = SolverConfig(max_speed_estimate=2.0)
        simulate(u0, BURGERS, make_sigma(grid64, []), cfg, 1.0, observers=[(1, lambda s: norms.append(l1_norm(s.state)))])
        assert np.all(np.diff(norms) <= 1e-14)

    def test_lax_friedrichs_agrees_before_shock_formation(self):
        errors = []
        for n in (64, 128, 256):
            grid = TorusGrid(1, n)
            u0 = grid.sample(lambda x: 0.5 * np.sin(2 * np.pi * x))
            states = []
            for scheme in ("engquist_osher", "lax_friedrichs"):
                cfg = SolverConfig(cfl=0.4, flux_scheme=scheme, max_speed_estimate=0.5, dt_cap=1.0)
                states.append(simulate(u0, BURGERS, make_sigma(grid, []), cfg, 0.2).state)
            errors.append(l1_norm(states[0] - states[1]))
        assert errors[0] < 0.05
        assert errors[2] < errors[1] < errors[0]

    def test_rhs_is_conservative(self, grid64, rng):
        u = zero_mean_field(grid64, rng) + 0.3
        for name in ("burgers", "porous_medium", "heat"):
            assert abs(rhs(u, get_model(name), grid64).sum()) < 1e-10

    def test_two_dimensional_rhs_of_constant_vanishes(self):
        grid = TorusGrid(2, 16)
        for name in ("burgers2d", "anisotropic", "porous_medium2d"):
            np.testing.assert_allclose(rhs(np.full(grid.shape, 0.4), get_model(name), grid), 0.0, atol=1e-12)


class TestStochasticDynamics:
    def test_pure_noise_is_exact(self, grid64, rng):
        nm = make_sigma(grid64, NOISE_MODES)
        u0 = Field(grid64, zero_mean_field(grid64, rng))
        cfg = SolverConfig(dt_cap=1e-3)
        traj = simulate(u0, get_model("zero"), nm, cfg, 0.5, seed=8)
        w = NoisePath(8, traj.dt).w_at(traj.step_count)
        np.testing.assert_allclose(traj.state.values, u0.values + nm.sigma.values * w, atol=1e-13)
        energy = 0.5 * l2_norm(traj.state) ** 2
        assert abs(energy_balance_residual(traj)) <= 1e-10 * energy

    def test_mean_is_conserved(self, grid64, rng):
        nm = make_sigma(grid64, NOISE_MODES)
        u0 = Field(grid64, zero_mean_field(grid64, rng) + 0.25)
        traj = simulate(u0, BURGERS, nm, SolverConfig(max_speed_estimate=3.0), 2.0)
        assert abs(mean(traj.state) - 0.25) < 1e-13

    def test_energy_residual_first_order(self, grid64, rng):
        nm = make_sigma(grid64, NOISE_MODES)
        u0 = Field(grid64, zero_mean_field(grid64, rng, amplitude=0.4))
        residuals = []
        for cap, sub in ((2e-3, 4), (1e-3, 2), (5e-4, 1)):
            cfg = SolverConfig(max_speed_estimate=2.0, dt_cap=cap)
            residuals.append(abs(energy_balance_residual(simulate(u0, BURGERS, nm, cfg, 0.5, seed=3, substeps=sub))))
        ratios = np.array(residuals[:-1]) / np.array(residuals[1:])
        np.testing.assert_allclose(ratios, 2.0, rtol=0.15)

    def test_energy_residual_bound_at_unit_time(self, rng):
        grid = TorusGrid(1, 256)
        nm = make_sigma(grid, NOISE_MODES)
        u0 = Field(grid, zero_mean_field(grid, rng))
        traj = simulate(u0, BURGERS, nm, SolverConfig(max_speed_estimate=3.0), 1.0, seed=12)
        assert abs(energy_balance_residual(traj)) <= 1e-2 * max(1.0, 0.5 * l2_norm(traj.state) ** 2)

    def test_dissipation_is_nonnegative(self, grid64, rng):
        nm = make_sigma(grid64, NOISE_MODES)
        u0 = Field(grid64, zero_mean_field(grid64, rng))
        ledgers = []
        simulate(u0, BURGERS, nm, SolverConfig(max_speed_estimate=3.0), 1.0,
                 observers=[(1, lambda s: ledgers.append(s.ledger[0]))])
        assert np.all(np.diff(ledgers) >= -1e-15)

    def test_bit_reproducible(self, grid64, rng):
        nm = make_sigma(grid64, NOISE_MODES)
        u0 = Field(grid64, zero_mean_field(grid64, rng))
        cfg = SolverConfig(max_speed_estimate=3.0)
        a = simulate(u0, BURGERS, nm, cfg, 0.5, seed=17)
        b = simulate(u0, BURGERS, nm, cfg, 0.5, seed=17)
        assert a.state.to_bytes() == b.state.to_bytes()
        assert a.energy_ledger == b.energy_ledger

    def test_path_dt_must_match(self, grid64):
        traj = Trajectory(grid64.zeros(), NoisePath(1, 0.123))
        with pytest.raises(ValueError, match="differs"):
            step(traj, BURGERS, make_sigma(grid64, []), SolverConfig())


class TestCoupledPairs:
    """Two solutions driven by the same noise path."""

    def _pair(self, grid, u0, v0, cfg, n_steps, seed=4):
        nm = make_sigma(grid, NOISE_MODES)
        path = NoisePath(seed, cfg.time_step(grid))
        ens = Ensemble(grid, np.stack([u0, v0])[None], [path], BURGERS, nm, cfg)
        gaps, order = [], []

        def hook(before, after):
            gaps.append(np.abs(after[0, 0] - after[0, 1]).sum() * grid.cell_volume)
            order.append(bool(np.all(after[0, 0] <= after[0, 1])))

        ens.run(n_steps, step_hook=hook)
        return np.array(gaps), order

    @settings(max_examples=10)
    @given(st.integers(0, 2**31))
    def test_l1_contraction(self, seed):
        grid = TorusGrid(1, 64)
        rng = np.random.default_rng(seed)
        u0, v0 = zero_mean_field(grid, rng), zero_mean_field(grid, rng) + 0.1
        cfg = SolverConfig(max_speed_estimate=3.0)
        gaps, _ = self._pair(grid, u0, v0, cfg, 400, seed)
        gap0 = np.abs(u0 - v0).sum() * grid.cell_volume
        gaps = np.concatenate([[gap0], gaps])
        # monotone up to summation roundoff
        assert np.all(np.diff(gaps) <= 1e-14 * gaps[:-1])

    def test_comparison_principle(self, grid64, rng):
        u0 = zero_mean_field(grid64, rng)
        v0 = u0 + 0.2 + 0.1 * np.abs(zero_mean_field(grid64, rng))
        _, order = self._pair(grid64, u0, v0, SolverConfig(max_speed_estimate=3.0), 500)
        assert all(order)


class TestEnsemble:
    def test_matches_single_trajectories(self, grid64, rng):
        nm = make_sigma(grid64, NOISE_MODES)
        cfg = SolverConfig(max_speed_estimate=3.0)
        dt = cfg.time_step(grid64)
        u0s = [zero_mean_field(grid64, rng) for _ in range(2)]
        seeds = [31, 32]
        states = np.array([[u] for u in u0s])
        ens = Ensemble(grid64, states, [NoisePath(s, dt) for s in seeds], BURGERS, nm, cfg).run(300)
        for p, (u0, s) in enumerate(zip(u0s, seeds)):
            traj = Trajectory.start(Field(grid64, u0), s, cfg)
            for _ in range(300):
                step(traj, BURGERS, nm, cfg)
            np.testing.assert_array_equal(ens.states[p, 0], traj.state.values)
            assert ens.energy_balance_residual()[p, 0] == pytest.approx(energy_balance_residual(traj), abs=1e-14)

    def test_snapshot_extremes_cover_the_path(self, grid64):
        nm = make_sigma(grid64, NOISE_MODES)
        cfg = SolverConfig(dt_cap=1e-3)
        path = NoisePath(6, cfg.time_step(grid64))
        snaps = []
        Ensemble(grid64, np.zeros((1, 1, 64)), [path], get_model("zero"), nm, cfg).run(100, every=10, callback=snaps.append)
        w = NoisePath(6, path.dt).w_series(0, 100)
        assert [s.step for s in snaps] == list(range(0, 101, 10))
        for prev, snap in zip(snaps, snaps[1:]):
            window = w[prev.step : snap.step + 1]
            assert snap.w_max[0] == pytest.approx(window.max(), abs=1e-14)
            assert snap.w_min[0] == pytest.approx(window.min(), abs=1e-14)

    def test_shape_validation(self, grid64):
        with pytest.raises(ValueError, match="shape"):
            Ensemble(grid64, np.zeros((2, 64)), [NoisePath(1, 1e-2)], BURGERS, make_sigma(grid64, []), SolverConfig())


class TestFailures:
    def test_cfl_violation(self, grid64):
        u0 = grid64.sample(lambda x: 2.0 * np.sin(2 * np.pi * x))
        with pytest.raises(CFLViolation, match="max_speed_estimate"):
            simulate(u0, BURGERS, make_sigma(grid64, []), SolverConfig(max_speed_estimate=1.0), 0.1)

    def test_non_finite_state(self, grid64):
        u = np.zeros(64)
        u[3] = np.nan
        cfg = SolverConfig()
        with pytest.raises(NumericalInstability, match="non-finite"):
            advance(u, 0.0, BURGERS, make_sigma(grid64, []), cfg, grid64, cfg.time_step(grid64))

    def test_unchecked_blow_up_is_reported(self, grid64):
        # far beyond the CFL limit the explicit update overflows
        u0 = grid64.sample(lambda x: 50.0 * np.sin(2 * np.pi * x))
        cfg = SolverConfig(cfl=1.0, dt_cap=1.0, max_speed_estimate=1.0, check_bounds=False)
        with np.errstate(over="ignore", invalid="ignore"), pytest.raises(NumericalInstability, match="non-finite"):
            simulate(u0, BURGERS, make_sigma(grid64, []), cfg, 100.0)

    def test_instability_carries_step_and_dt(self, grid64):
        u0 = grid64.sample(lambda x: 5.0 * np.sin(2 * np.pi * x))
        with pytest.raises(NumericalInstability) as info:
            simulate(u0, BURGERS, make_sigma(grid64, []), SolverConfig(max_speed_estimate=1.0), 0.1)
        assert info.value.step == 0
        assert info.value.dt == SolverConfig(max_speed_estimate=1.0).time_step(grid64)

    def test_custom_polynomial_model_runs(self, grid64, rng):
        model = polynomial_model([[0.0, 0.0, 0.5]])
        u0 = Field(grid64, zero_mean_field(grid64, rng))
        cfg = SolverConfig(max_speed_estimate=2.0)
        a = simulate(u0, model, make_sigma(grid64, []), cfg, 0.3).state
        b = simulate(u0, BURGERS, make_sigma(grid64, []), cfg, 0.3).state
        # tabulated Engquist-Osher splitting against the closed form
        np.testing.assert_allclose(a.values, b.values, atol=1e-5)


class TestCsvObserver:
    def test_rows_round_trip(self, grid64, rng):
        stream = io.StringIO()
        nm = make_sigma(grid64, NOISE_MODES)
        u0 = Field(grid64, zero_mean_field(grid64, rng))
        traj = simulate(u0, BURGERS, nm, SolverConfig(max_speed_estimate=3.0), 0.2, observers=[(1, CsvObserver(stream))])
        lines = stream.getvalue().splitlines()
        assert lines[0] == "time,l1,l2,mean,sobolev_s,dissipation,ito_input,martingale"
        assert len(lines) == 1 + traj.step_count + 1
        last = [float(v) for v in lines[-1].split(",")]
        assert last[0] == traj.time
        assert last[1] == l1_norm(traj.state)
        assert tuple(last[5:]) == traj.energy_ledger.as_tuple()
