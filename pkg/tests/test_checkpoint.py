import os
import tempfile
import unittest
from unittest.mock import mock_open, patch

import numpy as np

from src.core.config import parse_run_config
from src.core.data import synth_dataset
from src.core.model import init_params
from src.core.numerics import RngStream
from src.core.training import OptimizerState, fit
from src.utils.checkpoint import load_checkpoint, save_checkpoint


def _small_network(seed: int = 3):
    cfg = parse_run_config(
        {"architecture": "6-5 (F6)", "neuron": {"kind": "LIF", "lambda": 0.9}}
    )
    return init_params(cfg.template((2, 2, 1)), RngStream(seed))


class TestCheckpoint(unittest.TestCase):
    """Tests for writing and reading checkpoints."""

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, "run", "checkpoint.ide")

    def test_restores_network_and_optimizer(self) -> None:
        """Tests that parameters, buffers, momentum and counters come back."""
        # Arrange
        spec = _small_network()
        spec.layers[1].bn.running_mean[...] = [0.1, 0.2, 0.3, 0.4, 0.5]
        spec.feedback.alpha[...] = 0.75
        state = OptimizerState(
            velocities={"layers.0.weight": np.full((6, 4), 0.01)},
            iteration=42,
            epoch=3,
            batch=5,
        )

        # Act
        save_checkpoint(self.path, spec, state, config={"seed": 9}, seed=9)
        restored = load_checkpoint(self.path)

        # Assert
        for name, value in spec.parameters().items():
            np.testing.assert_array_equal(restored.spec.parameters()[name], value)
        for name, value in spec.buffers().items():
            np.testing.assert_array_equal(restored.spec.buffers()[name], value)
        np.testing.assert_array_equal(
            restored.state.velocities["layers.0.weight"], np.full((6, 4), 0.01)
        )
        self.assertEqual(
            (restored.state.iteration, restored.state.epoch, restored.state.batch),
            (42, 3, 5),
        )
        self.assertEqual(restored.seed, 9)
        self.assertEqual(restored.config, {"seed": 9})
        self.assertEqual(restored.spec.architecture, "6-5 (F6)")
        self.assertEqual(restored.spec.neuron.lam, 0.9)

    def test_file_starts_with_magic(self) -> None:
        """Tests the four magic bytes."""
        save_checkpoint(self.path, _small_network(), OptimizerState())
        with open(self.path, "rb") as f:
            self.assertEqual(f.read(4), b"IDE1")

    def test_bad_magic_rejected(self) -> None:
        """Tests that a foreign file is refused."""
        os.makedirs(os.path.dirname(self.path))
        with open(self.path, "wb") as f:
            f.write(b"NOPE" + bytes(32))
        with self.assertLogs(level="ERROR"), self.assertRaises(ValueError):
            load_checkpoint(self.path)

    def test_truncated_payload_rejected(self) -> None:
        """Tests that a checkpoint cut short is refused."""
        save_checkpoint(self.path, _small_network(), OptimizerState())
        with open(self.path, "rb") as f:
            raw = f.read()
        with open(self.path, "wb") as f:
            f.write(raw[:-16])
        with self.assertLogs(level="ERROR"), self.assertRaises(ValueError):
            load_checkpoint(self.path)

    def test_missing_file(self) -> None:
        """Tests FileNotFoundError for an absent checkpoint."""
        with self.assertLogs(level="ERROR"), self.assertRaises(FileNotFoundError):
            load_checkpoint(self.path)

    @patch("src.utils.checkpoint._ensure_directory_exists")
    @patch("builtins.open", new_callable=mock_open)
    def test_write_failure_is_reraised(self, mock_file, mock_ensure_dir) -> None:
        """Tests that an OSError is logged and raised again."""
        mock_file.side_effect = OSError("disk full")
        with self.assertLogs(level="ERROR") as logs, self.assertRaises(OSError):
            save_checkpoint("checkpoint.ide", _small_network(), OptimizerState())
        self.assertIn("Failed to save checkpoint", logs.output[0])

    def test_init_distribution_round_trips(self) -> None:
        """Tests that a symmetric-init network reloads as symmetric."""
        cfg = parse_run_config(
            {"architecture": "6 (F6)", "model": {"init": "symmetric"}}
        )
        spec = init_params(cfg.template((2, 2, 1)), RngStream(4))

        save_checkpoint(self.path, spec, OptimizerState())
        restored = load_checkpoint(self.path)

        self.assertEqual(restored.spec.init, "symmetric")
        self.assertEqual(restored.spec.template().init, "symmetric")


class TestResume(unittest.TestCase):
    """Tests for continuing training from a checkpoint."""

    def setUp(self) -> None:
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = os.path.join(self.tmp.name, "checkpoint.ide")
        self.train = synth_dataset("blobs", 16, seed=0)
        self.test = synth_dataset("blobs", 8, seed=1)
        self.run_cfg = parse_run_config(
            {
                "dataset": {"name": "blobs", "kind": "blobs", "num_classes": 2},
                "architecture": "8 (F8)",
                "train": {
                    "epochs": 2,
                    "batch_size": 4,
                    "T": 5,
                    "warmup_iters": 0,
                    "dropout": 0.2,
                },
            }
        )

    def _network(self):
        return init_params(self.run_cfg.template((1, 1, 2)), RngStream(0))

    def test_resumed_run_matches_uninterrupted_run(self) -> None:
        """Tests save after epoch 1, reload, epoch 2 against two straight epochs."""
        # Arrange
        cfg = self.run_cfg.train
        whole = self._network()
        whole_state = OptimizerState()
        first = self._network()
        first_state = OptimizerState()

        # Act
        fit(whole, self.train, self.test, cfg, whole_state)
        fit(
            first,
            self.train,
            self.test,
            cfg.model_copy(update={"epochs": 1}),
            first_state,
        )
        save_checkpoint(self.path, first, first_state, seed=cfg.seed)
        restored = load_checkpoint(self.path)
        fit(restored.spec, self.train, self.test, cfg, restored.state)

        # Assert
        self.assertEqual(restored.state.epoch, whole_state.epoch)
        self.assertEqual(restored.state.iteration, whole_state.iteration)
        for name, value in whole.parameters().items():
            np.testing.assert_allclose(
                restored.spec.parameters()[name], value, rtol=0, atol=1e-12
            )
        for name, value in whole.buffers().items():
            np.testing.assert_allclose(
                restored.spec.buffers()[name], value, rtol=0, atol=1e-12
            )


if __name__ == "__main__":
    unittest.main()
