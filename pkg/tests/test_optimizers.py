"""
Tests for the schedules and the training steps - Run with pytest
"""

import math
import sys
import unittest
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).parent.parent))

from sharpctl.autodiff import Batch
from sharpctl.errors import ConfigError, DegenerateFilterError
from sharpctl.landscape import QuadraticLandscape
from sharpctl.models import build_mlp
from sharpctl.optimizers import (
    LpfConfig,
    OptimizerState,
    StepLog,
    entropy_sgd_step,
    filter_sigma,
    lpf_sgd_step,
    mc_smoothed_gradient,
    msgd_step,
    perturbation_std,
    sam_step,
)
from sharpctl.schedules import gamma_schedule, scoping_schedule, step_lr
from sharpctl.utils import DTYPE, SeededStream, np_substream


def quadratic(eigenvalues, theta):
    objective = QuadraticLandscape(np.asarray(eigenvalues, dtype=float), basis_seed=None).objective()
    return objective, objective.params(theta), objective.batch()


def small_network(seed=0, n=40):
    model, params = build_mlp((3, 6, 2), seed)
    rng = np_substream(seed, 99)
    batch = Batch(torch.from_numpy(rng.standard_normal((n, 3))), torch.from_numpy(rng.integers(0, 2, n)))
    return model, params, batch


class TestSchedules(unittest.TestCase):
    """Test the step-indexed schedules."""

    def test_gamma_endpoints(self):
        """gamma(0) = gamma0 and gamma(T) = (alpha + 1) gamma0 exactly."""
        self.assertEqual(gamma_schedule(0, 1000, 0.002, 5.0), 0.002)
        self.assertAlmostEqual(gamma_schedule(1000, 1000, 0.002, 5.0), 0.012, places=15)

    def test_gamma_midpoint(self):
        """Halfway through, gamma0 = 1 and alpha = 2 give 2."""
        self.assertAlmostEqual(gamma_schedule(50, 100, 1.0, 2.0), 2.0, places=12)

    def test_gamma_monotone(self):
        """The radius never decreases for alpha >= 0."""
        values = [gamma_schedule(t, 200, 0.5, 3.0) for t in range(201)]
        self.assertTrue(all(b >= a for a, b in zip(values, values[1:])))

    def test_gamma_zero_alpha_constant(self):
        """alpha = 0 keeps the radius fixed."""
        self.assertEqual({gamma_schedule(t, 10, 0.3, 0.0) for t in range(11)}, {0.3})

    def test_gamma_out_of_range(self):
        """Steps outside [0, T] are rejected."""
        with self.assertRaises(ConfigError):
            gamma_schedule(11, 10, 1.0, 1.0)
        with self.assertRaises(ConfigError):
            gamma_schedule(0, 0, 1.0, 1.0)

    def test_scoping(self):
        """gamma_t = gamma0 (1 + gamma1)^t."""
        self.assertEqual(scoping_schedule(0, 0.5, 1e-4), 0.5)
        self.assertAlmostEqual(scoping_schedule(10, 0.5, 1e-4), 0.5 * 1.0001**10, places=15)
        with self.assertRaises(ConfigError):
            scoping_schedule(0, 0.0, 1e-4)

    def test_step_lr(self):
        """The rate decays at every milestone reached."""
        self.assertEqual(step_lr(0.1, 2, [3, 6], 0.1), 0.1)
        self.assertAlmostEqual(step_lr(0.1, 3, [3, 6], 0.1), 0.01)
        self.assertAlmostEqual(step_lr(0.1, 7, [3, 6], 0.1), 0.001)


class TestMomentumSGD(unittest.TestCase):
    """Test the heavy-ball update shared by every optimizer."""

    def test_plain_step(self):
        """Without momentum the step is params - lr * grad."""
        model, params, batch = quadratic([1.0, 1.0], [1.0, 2.0])
        state = msgd_step(OptimizerState(params, lr=0.1), model, batch)
        self.assertTrue(torch.allclose(state.params.values, torch.tensor([0.9, 1.8], dtype=DTYPE)))
        self.assertEqual(state.step, 1)

    def test_momentum_buffer(self):
        """The buffer starts at the first direction and then accumulates."""
        model, params, batch = quadratic([1.0], [1.0])
        state = OptimizerState(params, lr=0.1, momentum=0.9)
        state = msgd_step(state, model, batch)
        self.assertAlmostEqual(float(state.params.values[0]), 0.9, places=12)
        state = msgd_step(state, model, batch)
        self.assertAlmostEqual(float(state.params.values[0]), 0.72, places=12)

    def test_weight_decay(self):
        """With a flat loss only the decay term moves the parameters."""
        model, params, batch = quadratic([0.0, 0.0], [2.0, -4.0])
        state = msgd_step(OptimizerState(params, lr=0.5, weight_decay=0.1), model, batch)
        self.assertTrue(torch.allclose(state.params.values, torch.tensor([1.9, -3.8], dtype=DTYPE)))

    def test_invalid_state(self):
        """Invalid hyper-parameters are rejected."""
        _, params, _ = quadratic([1.0], [1.0])
        with self.assertRaises(ConfigError):
            OptimizerState(params, lr=0.0)
        with self.assertRaises(ConfigError):
            OptimizerState(params, lr=0.1, momentum=1.0)

    def test_step_log(self):
        """Each step appends one record."""
        model, params, batch = quadratic([1.0], [1.0])
        log = StepLog()
        state = OptimizerState(params, lr=0.1)
        for _ in range(3):
            state = msgd_step(state, model, batch, log)
        frame = log.to_frame()
        self.assertEqual(list(frame["step"]), [0, 1, 2])
        self.assertEqual(set(frame["optimizer"]), {"msgd"})


class TestLpfSgd(unittest.TestCase):
    """Test LPF-SGD and its covariance."""

    def test_reduces_to_msgd_single_split(self):
        """gamma0 = 0, alpha = 0 and one split reproduce mSGD exactly."""
        model, params, batch = small_network()
        cfg = LpfConfig(gamma0=0.0, alpha=0.0, M=1, T_total=100)
        stream = SeededStream(0, (200,))
        plain = smoothed = OptimizerState(params, lr=0.05, momentum=0.9, weight_decay=5e-4)
        for _ in range(100):
            plain = msgd_step(plain, model, batch)
            smoothed = lpf_sgd_step(smoothed, model, batch, cfg, stream)
        self.assertLessEqual(float((plain.params.values - smoothed.params.values).abs().max()), 1e-12)

    def test_reduces_to_msgd_many_splits(self):
        """Size-weighted split gradients average to the batch gradient."""
        model, params, batch = small_network(n=41)
        cfg = LpfConfig(gamma0=0.0, alpha=0.0, M=4, T_total=100)
        stream = SeededStream(0, (200,))
        plain = smoothed = OptimizerState(params, lr=0.05, momentum=0.9)
        for _ in range(100):
            plain = msgd_step(plain, model, batch)
            smoothed = lpf_sgd_step(smoothed, model, batch, cfg, stream)
        self.assertLessEqual(float((plain.params.values - smoothed.params.values).abs().max()), 1e-10)

    def test_deterministic(self):
        """Two runs with the same stream give identical iterates."""
        model, params, batch = small_network()
        cfg = LpfConfig(gamma0=0.01, alpha=2.0, M=4, T_total=10)
        results = []
        for _ in range(2):
            state = OptimizerState(params, lr=0.05, momentum=0.9)
            for _ in range(10):
                state = lpf_sgd_step(state, model, batch, cfg, SeededStream(7, (200,)))
            results.append(state.params.values)
        self.assertTrue(torch.equal(results[0], results[1]))

    def test_noise_changes_iterates(self):
        """A positive radius perturbs the gradient."""
        model, params, batch = small_network()
        cfg = LpfConfig(gamma0=0.01, alpha=0.0, M=2, T_total=10)
        noisy = lpf_sgd_step(OptimizerState(params, lr=0.05), model, batch, cfg, SeededStream(0))
        plain = msgd_step(OptimizerState(params, lr=0.05), model, batch)
        self.assertFalse(torch.equal(noisy.params.values, plain.params.values))

    def test_too_many_splits(self):
        """M larger than the batch is a configuration error."""
        model, params, batch = small_network(n=3)
        cfg = LpfConfig(gamma0=0.01, alpha=0.0, M=4, T_total=10)
        with self.assertRaises(ConfigError):
            lpf_sgd_step(OptimizerState(params, lr=0.05), model, batch, cfg, SeededStream(0))

    def test_covariance_modes(self):
        """Literal, squared and isotropic standard deviations."""
        _, params, _ = quadratic([1.0, 1.0], [3.0, 4.0])
        literal = perturbation_std(params, 0.01, "literal")
        squared = perturbation_std(params, 0.01, "squared")
        isotropic = perturbation_std(params, 0.01, "isotropic")
        self.assertTrue(torch.allclose(literal, torch.full((2,), math.sqrt(0.05), dtype=DTYPE)))
        self.assertTrue(torch.allclose(squared, torch.full((2,), 0.5, dtype=DTYPE)))
        self.assertTrue(torch.allclose(isotropic, torch.full((2,), 0.1, dtype=DTYPE)))

    def test_filter_sigma_is_constant_per_filter(self):
        """Every parameter of a filter gets the filter's norm."""
        model, params, _ = small_network()
        scale = filter_sigma(params).per_parameter_scale
        norms = params.filter_norms()
        for k, ranges in enumerate(params.filter_slices):
            for start, stop in ranges:
                self.assertTrue(torch.allclose(scale[start:stop], norms[k].expand(stop - start)))

    def test_zero_filter(self):
        """A zero-norm filter cannot define a covariance."""
        _, params, _ = quadratic([1.0, 1.0], [0.0, 0.0])
        with self.assertRaises(DegenerateFilterError):
            filter_sigma(params)

    def test_mc_gradient_unbiased(self):
        """On a quadratic the smoothed gradient is H theta."""
        eigenvalues = np.linspace(1.0, 5.0, 50)
        theta = np_substream(3, 1).standard_normal(50)
        model, params, batch = quadratic(eigenvalues, theta)
        mean, stderr = mc_smoothed_gradient(model, params, batch, 0.1, 10000, SeededStream(0))
        expected = torch.from_numpy(eigenvalues * theta)
        self.assertTrue(bool(((mean.values - expected).abs() <= 5.0 * stderr + 1e-12).all()))


class TestSam(unittest.TestCase):
    """Test sharpness-aware minimization."""

    def test_step(self):
        """The gradient is taken at the ascent point and applied at params."""
        model, params, batch = quadratic([1.0, 1.0], [1.0, 0.0])
        state = sam_step(OptimizerState(params, lr=0.1), model, batch, rho=0.1)
        self.assertTrue(torch.allclose(state.params.values, torch.tensor([0.89, 0.0], dtype=DTYPE)))

    def test_zero_gradient_skips_ascent(self):
        """At a stationary point the step is flagged and nothing moves."""
        model, params, batch = quadratic([1.0, 1.0], [0.0, 0.0])
        log = StepLog()
        state = sam_step(OptimizerState(params, lr=0.1), model, batch, 0.05, log)
        self.assertTrue(torch.equal(state.params.values, params.values))
        self.assertEqual(log.to_frame()["note"].iloc[0], "ascent_skipped")

    def test_invalid_rho(self):
        """rho must be positive."""
        model, params, batch = quadratic([1.0], [1.0])
        with self.assertRaises(ConfigError):
            sam_step(OptimizerState(params, lr=0.1), model, batch, 0.0)


class TestEntropySgd(unittest.TestCase):
    """Test Entropy-SGD."""

    def test_single_inner_step(self):
        """One noiseless inner step on f = theta^2 / 2."""
        model, params, batch = quadratic([1.0], [1.0])
        state = OptimizerState(params, lr=0.5)
        args = (model, batch, 1, 1.0, 0.1, 0.0, 1.0, SeededStream(0))
        moved = entropy_sgd_step(state, *args)
        self.assertAlmostEqual(float(moved.params.values[0]), 0.95, places=12)
        doubled = entropy_sgd_step(state, *args, outer_lr_multiplier=2.0)
        self.assertAlmostEqual(float(doubled.params.values[0]), 0.9, places=12)

    def test_batch_callable(self):
        """A callable batch source is drawn once per inner step."""
        model, params, batch = quadratic([1.0], [1.0])
        calls = []

        def next_batch():
            calls.append(1)
            return batch

        state = OptimizerState(params, lr=0.1)
        entropy_sgd_step(state, model, next_batch, 3, 1.0, 0.1, 1e-4, 0.5, SeededStream(0))
        self.assertEqual(len(calls), 3)

    def test_invalid_arguments(self):
        """gamma = 0 and L = 0 are rejected."""
        model, params, batch = quadratic([1.0], [1.0])
        state = OptimizerState(params, lr=0.1)
        with self.assertRaises(ConfigError):
            entropy_sgd_step(state, model, batch, 5, 0.0, 0.1, 0.0, 0.5, SeededStream(0))
        with self.assertRaises(ConfigError):
            entropy_sgd_step(state, model, batch, 0, 1.0, 0.1, 0.0, 0.5, SeededStream(0))


if __name__ == "__main__":
    unittest.main()
