import math

import numpy as np
import pytest

import bsdelab as bl
from bsdelab.errors import NoSolution


@pytest.fixture(scope="module")
def power1():
    return bl.IntensityModel.power_gap(1.0, 1.0)


def theorem_problem(model, driver, phi_value=1.0, terminal=0.0):
    return bl.BsdeProblem(
        intensity=model,
        coefficient=bl.CoefficientProcess.constant(phi_value, model.horizon),
        sign=bl.NONLINEAR_PLUS, driver=driver,
        terminal=bl.TerminalSpec.constant(terminal))


class TestTruncate:
    def test_identity_clip(self):
        tr = bl.truncate(bl.DriverSpec.identity(), 1.0, 1.0)
        assert tr.lower_clip == -1.0
        assert tr.lipschitz_constant == pytest.approx(1.0)
        xs = np.array([-3.0, -1.0, -0.25, 0.0])
        assert np.allclose(tr.f_tilde(xs), np.maximum(xs, -1.0))

    def test_exp_utility_clip_values(self):
        tr = bl.truncate(bl.DriverSpec.exp_utility(1.0), 1.0, 1.0)
        # frozen: f(-1) = 1 - e, f'(-1) = e
        assert float(tr.f_tilde(-2.0)) == pytest.approx(1.0 - math.e, abs=1e-12)
        assert tr.lipschitz_constant == pytest.approx(math.e, abs=1e-12)
        assert float(tr.f_tilde(0.0)) == 0.0

    def test_degenerate_bound(self):
        tr = bl.truncate(bl.DriverSpec.exp_utility(2.0), 0.0, 1.0)
        assert tr.lower_clip == 0.0
        xs = np.linspace(-5.0, 0.0, 11)
        assert np.allclose(tr.f_tilde(xs), 0.0)

    def test_flags_required(self):
        with pytest.raises(ValueError):
            bl.truncate(bl.DriverSpec.neg_identity(), 1.0, 1.0)


class TestRunScheme:
    def test_zero_coefficient_gives_zero(self, power1):
        grid = bl.make_grid(power1, 61, mass_cap=10.0)
        prob = theorem_problem(power1, bl.DriverSpec.exp_utility(1.0), phi_value=0.0)
        report = bl.run_scheme(prob, grid, [2, 4, 8], config=bl.SchemeConfig(tol=1e-6))
        for sol in report.solutions:
            assert np.max(np.abs(sol.y)) == 0.0
        assert report.converged

    def test_identity_matches_affine_closed_form(self, power1):
        # independent oracle: the affine representation -(1-t)/2
        grid = bl.make_grid(power1, 241, mass_cap=5.0)
        prob = theorem_problem(power1, bl.DriverSpec.identity())
        report = bl.run_scheme(prob, grid, [2 ** k for k in range(1, 9)],
                               config=bl.SchemeConfig(tol=1e-3))
        cap = grid.cap_index
        exact = -(1.0 - grid.points) / 2.0
        last = report.solutions[-1]
        assert np.max(np.abs(last.y[:cap + 1] - exact[:cap + 1])) <= 1e-4
        assert report.monotone_violation <= 1e-10
        assert report.bounds_ok

    def test_exp_utility_certified_run(self, power1):
        grid = bl.make_grid(power1, 241, mass_cap=12.0)
        prob = theorem_problem(power1, bl.DriverSpec.exp_utility(1.0))
        report = bl.run_scheme(prob, grid, [2 ** k for k in range(1, 10)],
                               config=bl.SchemeConfig(tol=1e-2))
        assert report.monotone_violation <= 1e-10
        assert report.box_violation <= 1e-10
        gaps = report.cauchy_gaps
        assert all(b < a for a, b in zip(gaps, gaps[1:]))
        assert report.converged

    def test_terminal_continuity(self, power1):
        # |Y^n(T - eps)| <= eps * sup phi near the cap, for the last level
        grid = bl.make_grid(power1, 241, mass_cap=12.0)
        prob = theorem_problem(power1, bl.DriverSpec.exp_utility(1.0))
        report = bl.run_scheme(prob, grid, [64, 128, 256],
                               config=bl.SchemeConfig(tol=1.0))
        last = report.solutions[-1]
        tail = slice(grid.cap_index - 5, grid.cap_index + 1)
        eps = 1.0 - grid.points[tail]
        assert np.all(np.abs(last.y[tail]) <= eps * 1.0 + 1e-12)

    def test_nonzero_terminal_rejected(self, power1):
        grid = bl.make_grid(power1, 61, mass_cap=10.0)
        prob = theorem_problem(power1, bl.DriverSpec.exp_utility(1.0), terminal=-0.5)
        with pytest.raises(NoSolution):
            bl.run_scheme(prob, grid, [2, 4], config=bl.SchemeConfig())

    def test_not_converged_is_a_state(self, power1):
        grid = bl.make_grid(power1, 61, mass_cap=10.0)
        prob = theorem_problem(power1, bl.DriverSpec.exp_utility(1.0))
        report = bl.run_scheme(prob, grid, [2, 4], config=bl.SchemeConfig(tol=1e-9))
        assert not report.converged
        assert report.status == "not_converged"

    def test_mc_mode_runs_and_matches_ode(self, power1):
        grid = bl.make_grid(power1, 61, mass_cap=10.0)
        bundle = bl.simulate_paths(grid, 1, 30_000, seed=17)
        prob = theorem_problem(power1, bl.DriverSpec.exp_utility(1.0))
        cfg = bl.SchemeConfig(mode="mc", tol=5e-2, bundle=bundle)
        rep_mc = bl.run_scheme(prob, grid, [4, 8, 16], config=cfg)
        rep_ode = bl.run_scheme(prob, grid, [4, 8, 16],
                                config=bl.SchemeConfig(tol=5e-2))
        assert rep_mc.monotone_violation <= 0.0 + 1e-12
        diff = np.abs(rep_mc.final.nodal_mean() - rep_ode.final.y)
        assert np.max(diff) < 2e-2
        assert rep_mc.bmo_estimate >= 0.0


class TestFunctionals:
    def test_bmo_zero_in_ode_mode(self, power1):
        grid = bl.make_grid(power1, 61, mass_cap=10.0)
        prob = theorem_problem(power1, bl.DriverSpec.exp_utility(1.0))
        sol = bl.solve_ode_mode(prob, grid, lambda_cap=8.0,
                                driver_override=bl.truncate(
                                    prob.driver, 1.0, 1.0).to_driver_spec())
        est = bl.estimate_bmo(sol, None)
        assert est.value == 0.0

    def test_bmo_zero_coefficient_noise_floor(self, power1):
        grid = bl.make_grid(power1, 41, mass_cap=8.0)
        bundle = bl.simulate_paths(grid, 1, 20_000, seed=23)
        prob = theorem_problem(power1, bl.DriverSpec.exp_utility(1.0), phi_value=0.0)
        sol = bl.solve_regression_mc(prob, grid, bundle, lambda_cap=8.0,
                                     driver_override=bl.truncate(
                                         prob.driver, 0.0, 1.0).to_driver_spec())
        est = bl.estimate_bmo(sol, bundle)
        assert est.value < 1e-6

    def test_lambda_f_mass_zero_coefficient(self, power1):
        grid = bl.make_grid(power1, 61, mass_cap=10.0)
        prob = theorem_problem(power1, bl.DriverSpec.exp_utility(1.0), phi_value=0.0)
        sol = bl.solve_ode_mode(prob, grid, lambda_cap=16.0,
                                driver_override=bl.truncate(
                                    prob.driver, 0.0, 1.0).to_driver_spec())
        assert bl.estimate_lambda_f_integral(sol) == 0.0

    def test_lambda_f_mass_bounded_identity(self, power1):
        # rearrangement oracle: int lam^n |f| = |Y^n_0 + int phi| for these data
        grid = bl.make_grid(power1, 241, mass_cap=12.0)
        prob = theorem_problem(power1, bl.DriverSpec.identity())
        clipped = bl.truncate(prob.driver, 1.0, 1.0).to_driver_spec()
        values = []
        for n in (16.0, 64.0, 256.0):
            sol = bl.solve_ode_mode(prob, grid, lambda_cap=n, driver_override=clipped)
            mass = bl.estimate_lambda_f_integral(sol)
            rearranged = abs(sol.y[0] + 1.0)     # Y_0 + int_0^1 phi dt
            assert abs(mass - rearranged) < 5e-3
            values.append(mass)
            assert mass <= abs(sol.y[0]) + 1.0 + 0.05
        assert values == sorted(values)

    def test_lambda_f_mass_bounded_exp_utility(self, power1):
        grid = bl.make_grid(power1, 241, mass_cap=12.0)
        prob = theorem_problem(power1, bl.DriverSpec.exp_utility(1.0))
        clipped = bl.truncate(prob.driver, 1.0, 1.0).to_driver_spec()
        sol = bl.solve_ode_mode(prob, grid, lambda_cap=256.0, driver_override=clipped)
        mass = bl.estimate_lambda_f_integral(sol)
        assert mass <= abs(sol.y[0]) + 1.0 + 0.05
