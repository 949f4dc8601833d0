import unittest

import numpy as np

from src.core.dynamics import InputEncoding, simulate
from src.core.equilibrium import (
    FixedPointMap,
    SolverConfig,
    clamp_sigma,
    eval_map,
    refine,
    residual,
    solve_fixed_point,
)
from src.core.numerics import RngStream
from tests.builders import dense_network, random_contractive_network


def _constant_map_network(n: int):
    """No feedback, zero drive weights and bias 1: f(a) = σ(1 / V_th)."""
    return dense_network(
        np.eye(n), [(np.zeros((n, 3)), np.ones(n))], v_th=2.0, alpha=0.0
    )


class TestFixedPointMap(unittest.TestCase):
    """Tests for the composite rate map."""

    def test_clamp(self) -> None:
        """Tests σ on values above, inside and below [0, 1]."""
        np.testing.assert_array_equal(
            clamp_sigma(np.array([1.5, 0.5, -0.3])), [1.0, 0.5, 0.0]
        )

    def test_no_feedback_map_is_constant(self) -> None:
        """Tests f(a) = 0.5 for any a when W = 0 and Fx* + b = 1, V_th = 2."""
        # Arrange
        fmap = FixedPointMap(_constant_map_network(4), np.ones(3))
        gen = RngStream(0).generator()

        # Act & Assert
        for _ in range(3):
            a = gen.uniform(0, 1, 4)
            np.testing.assert_array_equal(fmap(a), np.full(4, 0.5))

    def test_residual_of_constant_map(self) -> None:
        """Tests residual(0) = 0.5·√n for the constant map."""
        fmap = FixedPointMap(_constant_map_network(9), np.ones(3))
        self.assertAlmostEqual(residual(fmap, np.zeros(9)), 0.5 * 3.0, places=12)

    def test_eval_map_exposes_every_layer(self) -> None:
        """Tests that the evaluation carries one rate per layer in [0, 1]."""
        spec = random_contractive_network(1, [6, 5, 4])
        fmap = FixedPointMap(spec, np.ones(5))
        ev = eval_map(fmap, np.full(4, 0.5))
        self.assertEqual([r.shape for r in ev.rates], [(1, 6), (1, 5), (1, 4)])
        np.testing.assert_array_equal(ev.output, ev.rates[-1])
        for rates in ev.rates:
            self.assertTrue(np.all((rates >= 0) & (rates <= 1)))

    def test_anchor_order(self) -> None:
        """Tests that the map anchored on layer k starts at layer k + 1."""
        spec = random_contractive_network(2, [6, 5, 4])
        self.assertEqual(FixedPointMap(spec, np.ones(5)).order, [0, 1, 2])
        self.assertEqual(FixedPointMap(spec, np.ones(5), anchor=0).order, [1, 2, 0])
        with self.assertLogs(level="ERROR"), self.assertRaises(ValueError):
            FixedPointMap(spec, np.ones(5), anchor=3)

    def test_batched_map_matches_single_samples(self) -> None:
        """Tests that a batched map evaluates every sample independently."""
        spec = random_contractive_network(3, [6, 4])
        gen = RngStream(3, 1).generator()
        xs = gen.uniform(0, 1, (3, 5))
        a = gen.uniform(0, 1, (3, 4))
        batched = FixedPointMap(spec, xs)(a)
        for i in range(3):
            single = FixedPointMap(spec, xs[i])(a[i])
            np.testing.assert_allclose(batched[i], single, atol=1e-14)


class TestSolvers(unittest.TestCase):
    """Tests for Broyden and damped fixed-point solves."""

    def test_scalar_linear_fixed_point(self) -> None:
        """Tests a = 0.5a + 0.25 with both methods."""
        cases = [
            SolverConfig(method="broyden", max_iters=30, tol=1e-10),
            SolverConfig(method="fixed_point", max_iters=30, tol=1e-8, damping=1.0),
        ]
        for cfg in cases:
            with self.subTest(method=cfg.method):
                # Act
                solution = solve_fixed_point(
                    lambda a: 0.5 * a + 0.25, cfg, a0=np.array([0.0])
                )

                # Assert
                self.assertTrue(solution.converged)
                self.assertLessEqual(solution.iterations, 30)
                self.assertAlmostEqual(float(solution.a_star[0]), 0.5, delta=1e-7)

    def test_expansive_map_does_not_converge(self) -> None:
        """Tests a = 2a + 1 from 0 with the fixed-point method."""
        cfg = SolverConfig(method="fixed_point", max_iters=30, tol=1e-10)
        with self.assertLogs(level="WARNING"):
            solution = solve_fixed_point(
                lambda a: 2.0 * a + 1.0, cfg, a0=np.array([0.0])
            )
        self.assertFalse(solution.converged)
        self.assertEqual(solution.iterations, 30)
        self.assertEqual(len(solution.residual_trace), 30)

    def test_non_finite_iterate_aborts(self) -> None:
        """Tests that a map producing NaN stops the solve."""
        cfg = SolverConfig(method="broyden", max_iters=10, tol=1e-10)
        with self.assertLogs(level="WARNING"):
            solution = solve_fixed_point(
                lambda a: np.full_like(a, np.nan), cfg, a0=np.array([0.0])
            )
        self.assertFalse(solution.converged)
        self.assertFalse(np.isfinite(solution.residual))

    def test_plain_callable_needs_start(self) -> None:
        """Tests that a plain callable without a0 is rejected."""
        with self.assertLogs(level="ERROR"), self.assertRaises(ValueError):
            solve_fixed_point(lambda a: a)

    def test_methods_agree_on_contractive_networks(self) -> None:
        """Tests Broyden against damped iteration on random single-layer nets."""
        for seed in range(5):
            with self.subTest(seed=seed):
                # Arrange
                spec = random_contractive_network(seed, [12], ratio=0.9)
                x = RngStream(seed, 1).generator().uniform(0, 1, 5)
                fmap = FixedPointMap(spec, x)

                # Act
                broyden = solve_fixed_point(
                    fmap, SolverConfig(method="broyden", max_iters=200, tol=1e-12)
                )
                damped = solve_fixed_point(
                    fmap,
                    SolverConfig(
                        method="fixed_point", max_iters=2000, tol=1e-12, damping=1.0
                    ),
                )

                # Assert
                self.assertTrue(broyden.converged)
                self.assertTrue(damped.converged)
                np.testing.assert_allclose(broyden.a_star, damped.a_star, atol=1e-8)
                self.assertLessEqual(residual(fmap, broyden.a_star), 1e-12)

    def test_batched_solve_reports_every_sample(self) -> None:
        """Tests per-sample residuals of a batched solve."""
        spec = random_contractive_network(4, [8, 6])
        xs = RngStream(4, 1).generator().uniform(0, 1, (3, 5))
        solution = solve_fixed_point(
            FixedPointMap(spec, xs), SolverConfig(max_iters=100, tol=1e-10)
        )
        self.assertEqual(solution.a_star.shape, (3, 6))
        self.assertEqual(solution.residuals.shape, (3,))
        self.assertTrue(solution.converged)
        self.assertEqual(solution.rows()[0][0], 1)

    def test_refine_polishes_simulated_rates(self) -> None:
        """Tests that refine reduces the residual of a rough start."""
        spec = random_contractive_network(5, [10])
        x = RngStream(5, 1).generator().uniform(0, 1, 5)
        rough = np.full(10, 0.5)
        before = residual(FixedPointMap(spec, x), rough)

        solution = refine(spec, x, rough, SolverConfig(max_iters=100, tol=1e-10))

        self.assertLess(solution.residual, before)
        self.assertLessEqual(solution.residual, 1e-10)

    def test_simulation_reaches_solver_equilibrium(self) -> None:
        """Tests ∥a[1000] − a*∥∞ ≤ 5/1000 + 1e-5 on at least 45 of 50 nets."""
        # Arrange
        T = 1000
        solver = SolverConfig(method="broyden", max_iters=100, tol=1e-10)
        within = 0

        for seed in range(50):
            spec = random_contractive_network(500 + seed, [10])
            x = RngStream(500 + seed, 1).generator().uniform(0, 1, 5)

            # Act
            state, trace = simulate(spec, InputEncoding.constant(x), T)
            a_T = state.rates()[-1][0]
            solution = refine(spec, x, a_T, solver)

            # Assert
            self.assertTrue(solution.converged)
            self.assertLessEqual(trace.residual(T), trace.residual(10))
            gap = float(np.max(np.abs(a_T - solution.a_star)))
            within += gap <= 5.0 / T + 1e-5

        self.assertGreaterEqual(within, 45)


if __name__ == "__main__":
    unittest.main()
