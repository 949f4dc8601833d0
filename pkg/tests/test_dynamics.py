import unittest

import numpy as np

from src.core.dynamics import (
    InputEncoding,
    SimulationError,
    firing_stats,
    firing_stats_from_state,
    initial_state,
    simulate,
    step,
)
from src.core.equilibrium import FixedPointMap, residual
from src.core.model import NeuronKind
from src.core.numerics import RngStream
from tests.builders import dense_network, random_contractive_network


def _one_neuron(
    drive_weight: float = 1.0, v_th: float = 2.0, neuron: NeuronKind | None = None
):
    """One neuron fed by one input with weight `drive_weight` and no feedback."""
    return dense_network(
        np.array([[1.0]]),
        [(np.array([[drive_weight]]), np.array([0.0]))],
        v_th=v_th,
        alpha=0.0,
        neuron=neuron,
    )


class TestStep(unittest.TestCase):
    """Tests for single time steps."""

    def test_constant_current_spikes_every_other_step(self) -> None:
        """Tests spikes at steps 2 and 4 for input 1.0 and V_th = 2."""
        # Arrange
        spec = _one_neuron()

        # Act
        state, _, history = simulate(
            spec, InputEncoding.constant(np.array([1.0])), 4, record_spikes=True
        )

        # Assert
        np.testing.assert_array_equal(history[0][:, 0, 0], [0.0, 1.0, 0.0, 1.0])
        self.assertEqual(float(state.rates()[0][0, 0]), 0.5)

    def test_zero_input_never_spikes(self) -> None:
        """Tests that zero input from rest produces no spikes."""
        spec = random_contractive_network(0, [6])
        for layer in spec.layers:
            layer.op.bias[...] = 0.0
        state, _, history = simulate(
            spec, InputEncoding.constant(np.zeros(5)), 20, record_spikes=True
        )
        self.assertEqual(float(history[0].sum()), 0.0)
        np.testing.assert_array_equal(state.rates()[0], 0.0)

    def test_leaky_weighted_average(self) -> None:
        """Tests â[3] = 5/7 for λ = 0.5 and spikes [1, 0, 1]."""
        # Arrange
        spec = _one_neuron(v_th=1.0, neuron=NeuronKind.leaky(0.5))
        train = np.array([[1.0], [0.0], [1.0]])

        # Act
        state, _, history = simulate(
            spec, InputEncoding.spike_train(train), 3, record_spikes=True
        )

        # Assert
        np.testing.assert_array_equal(history[0][:, 0, 0], [1.0, 0.0, 1.0])
        self.assertAlmostEqual(float(state.rates()[0][0, 0]), 5.0 / 7.0, places=12)

    def test_step_is_pure_and_reset_by_subtraction(self) -> None:
        """Tests that step returns a new state and subtracts V_th on a spike."""
        spec = _one_neuron(drive_weight=2.5)
        start = initial_state(spec, 1)

        after = step(start, spec, np.array([[1.0]]))

        self.assertEqual(start.t, 0)
        self.assertEqual(after.t, 1)
        self.assertEqual(float(after.s[0][0, 0]), 1.0)
        self.assertAlmostEqual(float(after.u[0][0, 0]), 0.5)

    def test_non_finite_potential_aborts(self) -> None:
        """Tests that an infinite input raises SimulationError."""
        spec = _one_neuron()
        with self.assertLogs(level="ERROR"), self.assertRaises(SimulationError):
            step(initial_state(spec, 1), spec, np.array([[np.inf]]))

    def test_next_layer_uses_current_step_spikes(self) -> None:
        """Tests that layer 2 sees layer 1's spikes of the same step."""
        spec = dense_network(
            np.array([[1.0]]),
            [
                (np.array([[2.0]]), np.array([0.0])),
                (np.array([[2.0]]), np.array([0.0])),
            ],
            v_th=2.0,
            alpha=0.0,
        )
        state = step(initial_state(spec, 1), spec, np.array([[1.0]]))
        self.assertEqual(float(state.s[0][0, 0]), 1.0)
        self.assertEqual(float(state.s[1][0, 0]), 1.0)


class TestSimulate(unittest.TestCase):
    """Tests for multi-step simulation and its residual trace."""

    def test_single_step_rate_equals_spikes(self) -> None:
        """Tests a[1] == s[1]."""
        spec = random_contractive_network(3, [8])
        x = RngStream(3, 1).generator().uniform(0, 1, 5)
        state, _ = simulate(spec, InputEncoding.constant(x), 1)
        np.testing.assert_array_equal(state.rates()[0], state.s[0])

    def test_no_feedback_rate_approaches_clamped_drive(self) -> None:
        """Tests a[T] → σ(c / V_th) within 2/T without feedback."""
        currents = np.array([-0.5, 0.3, 1.1, 1.7, 2.6])
        spec = dense_network(
            np.eye(5), [(np.eye(5), np.zeros(5))], v_th=2.0, alpha=0.0
        )
        T = 200
        state, _ = simulate(spec, InputEncoding.constant(currents), T)
        expected = np.clip(currents / 2.0, 0.0, 1.0)
        error = float(np.max(np.abs(state.rates()[0][0] - expected)))
        self.assertLessEqual(error, 2.0 / T)

    def test_rates_stay_in_unit_interval(self) -> None:
        """Tests 0 ≤ a[t] ≤ 1 and binary spikes for IF and LIF."""
        for neuron in (NeuronKind.integrate_and_fire(), NeuronKind.leaky(0.9)):
            with self.subTest(neuron=neuron.variant):
                spec = random_contractive_network(4, [7, 6], neuron=neuron)
                xs = RngStream(4, 1).generator().uniform(-1, 2, (3, 5))
                state, _ = simulate(spec, InputEncoding.constant(xs), 30)
                for rates, spikes in zip(state.rates(), state.s, strict=True):
                    self.assertTrue(np.all((rates >= 0.0) & (rates <= 1.0)))
                    self.assertTrue(np.all((spikes == 0.0) | (spikes == 1.0)))

    def test_single_layer_converges(self) -> None:
        """Tests residual(1000) ≤ residual(10) and ≤ 0.05·√n on 50 nets."""
        for seed in range(50):
            with self.subTest(seed=seed):
                # Arrange
                width = 10
                spec = random_contractive_network(seed, [width], ratio=0.9)
                x = RngStream(seed, 1).generator().uniform(0, 1, 5)

                # Act
                _, trace = simulate(spec, InputEncoding.constant(x), 1000)

                # Assert
                self.assertLessEqual(trace.residual(1000), trace.residual(10))
                self.assertLessEqual(trace.residual(1000), 0.05 * np.sqrt(width))

    def test_multi_layer_converges(self) -> None:
        """Tests the same property on 20 nets each of 2 and 3 layers."""
        for widths in ([8, 6], [8, 7, 6]):
            for seed in range(20):
                with self.subTest(layers=len(widths), seed=seed):
                    # Arrange
                    spec = random_contractive_network(200 + seed, widths, ratio=0.9)
                    product, bound = spec.product_norm_condition()
                    x = RngStream(200 + seed, 1).generator().uniform(0, 1, 5)

                    # Act
                    _, trace = simulate(
                        spec, InputEncoding.constant(x), 1000, per_layer=True
                    )

                    # Assert
                    self.assertLessEqual(product, 0.9 * bound * (1 + 1e-4))
                    self.assertEqual(trace.values.shape, (1000, len(widths)))
                    self.assertLessEqual(trace.residual(1000), trace.residual(10))
                    self.assertLessEqual(
                        trace.residual(1000), 0.05 * np.sqrt(widths[-1])
                    )

    def test_leaky_residual_stays_bounded(self) -> None:
        """Tests a finite LIF residual that shrinks below 0.2·√n (λ = 0.95)."""
        for seed in range(20):
            with self.subTest(seed=seed):
                # Arrange
                width = 10
                spec = random_contractive_network(
                    300 + seed, [width], neuron=NeuronKind.leaky(0.95)
                )
                x = RngStream(300 + seed, 1).generator().uniform(0, 1, 5)

                # Act
                _, trace = simulate(spec, InputEncoding.constant(x), 1000)

                # Assert
                self.assertTrue(np.all(np.isfinite(trace.values)))
                self.assertLessEqual(trace.residual(1000), trace.residual(10))
                self.assertLessEqual(trace.residual(1000), 0.2 * np.sqrt(width))

    def test_residual_falls_within_the_first_steps(self) -> None:
        """Tests residual(30) < 25% of residual(3) averaged over a batch."""
        for seed in range(10):
            with self.subTest(seed=seed):
                # Arrange
                spec = random_contractive_network(400 + seed, [20])
                xs = RngStream(400 + seed, 1).generator().uniform(0, 1, (16, 5))

                # Act
                _, trace = simulate(spec, InputEncoding.constant(xs), 30)

                # Assert
                self.assertGreater(trace.residual(3), 0.0)
                self.assertLess(trace.residual(30), 0.25 * trace.residual(3))

    def test_trace_matches_map_residual(self) -> None:
        """Tests that the traced residual equals the map residual of a[T]."""
        cases = [([10], None), ([8, 6], None), ([10], NeuronKind.leaky(0.9))]
        for widths, neuron in cases:
            with self.subTest(widths=widths, neuron=neuron):
                # Arrange
                spec = random_contractive_network(7, widths, neuron=neuron)
                x = RngStream(7, 1).generator().uniform(0, 1, 5)

                # Act
                state, trace = simulate(spec, InputEncoding.constant(x), 50)
                fmap = FixedPointMap(spec, state.x_star[0])
                recomputed = residual(fmap, state.rates()[-1][0])

                # Assert
                self.assertAlmostEqual(trace.residual(50), recomputed, delta=1e-12)

    def test_short_spike_train_rejected(self) -> None:
        """Tests that a spike train shorter than T is rejected."""
        spec = _one_neuron()
        with self.assertLogs(level="ERROR"), self.assertRaises(ValueError):
            simulate(spec, InputEncoding.spike_train(np.ones((3, 1))), 5)

    def test_trace_rows_are_one_based(self) -> None:
        """Tests the (t, layer, residual) rows of a trace."""
        spec = random_contractive_network(1, [4, 3])
        _, trace = simulate(spec, InputEncoding.constant(np.ones(5)), 3)
        rows = trace.rows()
        self.assertEqual([(t, layer) for t, layer, _ in rows], [(1, 2), (2, 2), (3, 2)])


class TestFiringStats(unittest.TestCase):
    """Tests for firing statistics."""

    def test_counts(self) -> None:
        """Tests 3 spikes over 2 neurons and 5 steps."""
        spikes = np.zeros((5, 2))
        spikes[0, 0] = spikes[2, 1] = spikes[4, 0] = 1.0
        stats = firing_stats([spikes])
        self.assertAlmostEqual(stats.per_layer[0], 0.3)
        self.assertAlmostEqual(stats.total, 0.3)

    def test_all_zero(self) -> None:
        """Tests an all-zero trace."""
        self.assertEqual(firing_stats([np.zeros((4, 3)), np.zeros((4, 2))]).total, 0.0)

    def test_state_counts_match_history(self) -> None:
        """Tests that running spike counts agree with the recorded history."""
        spec = random_contractive_network(2, [6, 4])
        xs = RngStream(2, 1).generator().uniform(0, 1, (2, 5))
        state, _, history = simulate(
            spec, InputEncoding.constant(xs), 25, record_spikes=True
        )
        from_state = firing_stats_from_state(state)
        from_history = firing_stats(history)
        np.testing.assert_allclose(from_state.per_layer, from_history.per_layer)
        self.assertAlmostEqual(from_state.total, from_history.total)


if __name__ == "__main__":
    unittest.main()
