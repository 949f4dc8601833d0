import unittest

import numpy as np

from src.core import numerics
from src.core.numerics import (
    RngStream,
    adjoint,
    apply,
    conv2d,
    conv2d_transposed,
    dense,
    inner,
    spectral_norm,
    spectral_norm_vectors,
    weight_grad,
)


class TestLinearOps(unittest.TestCase):
    """Tests for operator application and adjoints."""

    def test_dense_apply(self) -> None:
        """Tests a dense matrix-vector product with bias."""
        # Arrange
        op = dense(np.array([[1.0, 2.0], [3.0, 4.0]]), np.zeros(2))

        # Act
        out = apply(op, np.array([1.0, 1.0]))

        # Assert
        np.testing.assert_array_equal(out, [3.0, 7.0])

    def test_dense_identity(self) -> None:
        """Tests that the identity operator returns its input."""
        x = RngStream(1).generator().standard_normal(6)
        np.testing.assert_array_equal(apply(dense(np.eye(6), np.zeros(6)), x), x)

    def test_conv_one_by_one_scales(self) -> None:
        """Tests a 1x1 convolution with kernel value 2."""
        # Arrange
        op = conv2d(np.full((1, 1, 1, 1), 2.0), None, (1, 2, 2))

        # Act
        out = apply(op, np.array([[[1.0, 2.0], [3.0, 4.0]]]))

        # Assert
        np.testing.assert_array_equal(out, [[[2.0, 4.0], [6.0, 8.0]]])

    def test_dense_adjoint(self) -> None:
        """Tests that the adjoint of a dense operator is the transpose."""
        op = dense(np.array([[1.0, 2.0], [3.0, 4.0]]))
        np.testing.assert_array_equal(adjoint(op, np.array([1.0, 0.0])), [1.0, 2.0])
        np.testing.assert_array_equal(adjoint(op, np.zeros(2)), np.zeros(2))

    def test_adjoint_identity_holds_for_every_kind(self) -> None:
        """Tests <y, A x> == <A^T y, x> for dense, strided and transposed ops."""
        gen = RngStream(3).generator()
        ops = [
            dense(gen.standard_normal((7, 12)), None, (3, 2, 2)),
            conv2d(gen.standard_normal((4, 3, 3, 3)), None, (3, 6, 6)),
            conv2d(gen.standard_normal((4, 3, 3, 3)), None, (3, 6, 6), stride=2),
            conv2d_transposed(gen.standard_normal((3, 2, 3, 3)), None, (3, 4, 4)),
        ]
        for op in ops:
            with self.subTest(kind=op.kind, stride=op.stride):
                # Arrange
                x = gen.standard_normal(op.input_shape)
                y = gen.standard_normal(op.output_shape)

                # Act
                lhs = inner(y, apply(op, x))
                rhs = inner(adjoint(op, y), x)

                # Assert
                self.assertAlmostEqual(lhs, rhs, delta=1e-10 * max(1.0, abs(lhs)))

    def test_transposed_conv_upsamples(self) -> None:
        """Tests that the default transposed convolution doubles H and W."""
        weight = np.ones((2, 5, 3, 3))
        op = conv2d_transposed(weight, np.zeros(5), (2, 4, 4))
        self.assertEqual(op.output_shape, (5, 8, 8))

    def test_batched_apply_matches_per_sample(self) -> None:
        """Tests that a batch is processed sample by sample."""
        gen = RngStream(4).generator()
        op = conv2d(gen.standard_normal((2, 1, 3, 3)), np.ones(2), (1, 5, 5))
        xs = gen.standard_normal((3, 1, 5, 5))

        batched = apply(op, xs)

        for i in range(3):
            np.testing.assert_allclose(batched[i], apply(op, xs[i]), atol=1e-12)

    def test_shape_mismatch_is_rejected(self) -> None:
        """Tests that a wrongly shaped input raises ValueError."""
        op = dense(np.ones((2, 3)))
        with self.assertRaises(ValueError):
            apply(op, np.ones(4))
        with self.assertRaises(ValueError):
            adjoint(op, np.ones(3))

    def test_weight_grad_is_exact_directional_derivative(self) -> None:
        """Tests <dW, weight_grad> == <y, (A + dW) x> - <y, A x>."""
        gen = RngStream(5).generator()
        ops = [
            dense(gen.standard_normal((4, 6))),
            conv2d(gen.standard_normal((3, 2, 3, 3)), None, (2, 5, 5), stride=2),
            conv2d_transposed(gen.standard_normal((2, 3, 3, 3)), None, (2, 3, 3)),
        ]
        for op in ops:
            with self.subTest(kind=op.kind):
                # Arrange
                x = gen.standard_normal((2, *op.input_shape))
                y = gen.standard_normal((2, *op.output_shape))
                direction = gen.standard_normal(op.weight.shape)

                # Act
                grad = weight_grad(op, x, y)
                moved = op.with_weight(op.weight + direction)
                expected = inner(y, apply(moved, x)) - inner(y, apply(op, x))

                # Assert
                self.assertAlmostEqual(inner(direction, grad), expected, delta=1e-9)


class TestSpectralNorm(unittest.TestCase):
    """Tests for power-iteration spectral norms."""

    def test_diagonal(self) -> None:
        """Tests diag(3, 1) and the 5x5 identity."""
        self.assertAlmostEqual(spectral_norm(dense(np.diag([3.0, 1.0]))), 3.0, places=5)
        self.assertAlmostEqual(spectral_norm(dense(np.eye(5))), 1.0, places=12)

    def test_zero_operator(self) -> None:
        """Tests that the zero operator has norm 0."""
        self.assertEqual(spectral_norm(dense(np.zeros((3, 3)))), 0.0)

    def test_matches_svd(self) -> None:
        """Tests default-argument estimates of random 20x23 matrices against SVD."""
        for seed in range(10):
            with self.subTest(seed=seed):
                # Arrange
                weight = RngStream(11, seed).generator().standard_normal((20, 23))
                exact = np.linalg.norm(weight, 2)

                # Act
                sigma = spectral_norm(dense(weight))

                # Assert
                self.assertLessEqual(abs(sigma - exact), 1e-6 * exact)

    def test_transpose_has_same_norm(self) -> None:
        """Tests ∥A∥₂ == ∥Aᵀ∥₂ to 1e-8 with default arguments on 30x33."""
        for seed in range(3):
            with self.subTest(seed=seed):
                # Arrange
                weight = RngStream(12, seed).generator().standard_normal((30, 33))

                # Act
                sigma = spectral_norm(dense(weight))
                sigma_t = spectral_norm(dense(weight.T))

                # Assert
                self.assertLessEqual(abs(sigma - sigma_t), 1e-8 * sigma)

    def test_close_top_pair_is_not_underestimated(self) -> None:
        """Tests σ₁ = 2, σ₂ = 1.98 within the default iteration budget."""
        # Arrange
        gen = RngStream(13).generator()
        left, _ = np.linalg.qr(gen.standard_normal((40, 40)))
        right, _ = np.linalg.qr(gen.standard_normal((40, 40)))
        singular = np.linspace(0.5, 2.0, 40)
        singular[-2] = 1.98
        weight = left @ np.diag(singular) @ right.T

        # Act
        sigma = spectral_norm(dense(weight))

        # Assert
        self.assertLessEqual(2.0 - sigma, 1e-6)
        self.assertLessEqual(sigma, 2.0 + 1e-12)

    def test_vectors_reproduce_sigma(self) -> None:
        """Tests that sigma == <u, A v> for the returned vectors."""
        weight = RngStream(2).generator().standard_normal((2, 2, 3, 3))
        op = conv2d(weight, None, (2, 4, 4))
        sigma, u, v = spectral_norm_vectors(op, iters=10)
        self.assertAlmostEqual(sigma, inner(u, apply(op, v)), places=10)


class TestRngStream(unittest.TestCase):
    """Tests for reproducible random streams."""

    def test_same_pair_same_sequence(self) -> None:
        """Tests that equal (seed, stream) pairs give equal draws."""
        a = RngStream(7, 3).generator().random(5)
        b = RngStream(7, 3).generator().random(5)
        c = RngStream(7, 4).generator().random(5)
        np.testing.assert_array_equal(a, b)
        self.assertFalse(np.array_equal(a, c))

    def test_power_iteration_seed_is_fixed(self) -> None:
        """Tests that power iteration starts from a fixed stream."""
        op = dense(RngStream(1).generator().standard_normal((4, 4)))
        self.assertEqual(
            spectral_norm_vectors(op, iters=3)[0], spectral_norm_vectors(op, iters=3)[0]
        )
        self.assertIsInstance(numerics.POWER_ITERATION_SEED, int)


if __name__ == "__main__":
    unittest.main()
