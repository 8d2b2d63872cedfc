"""
Tests for rank correlation, normalization and the theory calculators - Run with pytest
"""

import math
import sys
import unittest
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).parent.parent))

from sharpctl.analysis import (
    CATALOG_NAMES,
    GeBoundInputs,
    catalog_function,
    ge_bound_lpf,
    ge_bound_sgd,
    ge_ratio,
    ge_ratio_table,
    generalization_gap,
    kendall_ci_halfwidth,
    kendall_tau,
    normalize_measures,
    theorem1_property_check,
)
from sharpctl.errors import ConfigError, DegenerateNormalizationError, UndefinedCorrelationError
from sharpctl.selfcheck import brute_force_tau
from sharpctl.utils import np_substream


class TestKendall(unittest.TestCase):
    """Test Kendall tau-b."""

    def test_one_swap(self):
        """Five concordant and one discordant pair."""
        result = kendall_tau([1, 2, 3, 4], [1, 3, 2, 4])
        self.assertAlmostEqual(result.tau, 2 / 3, places=12)
        self.assertEqual(result.n, 4)

    def test_perfect_orders(self):
        """Identical order gives 1 and reversed order gives -1."""
        self.assertAlmostEqual(kendall_tau([1, 2, 3], [10, 20, 30]).tau, 1.0)
        self.assertAlmostEqual(kendall_tau([1, 2, 3], [30, 20, 10]).tau, -1.0)

    def test_ties_match_brute_force(self):
        """Tie-corrected tau agrees with a pairwise count."""
        rng = np_substream(0, 1)
        for _ in range(10):
            x = rng.integers(0, 5, 30).astype(float)
            y = rng.integers(0, 5, 30).astype(float)
            self.assertAlmostEqual(kendall_tau(x, y).tau, brute_force_tau(x, y), places=12)

    def test_confidence_halfwidth(self):
        """1.96 times the null standard error."""
        expected = 1.96 * math.sqrt(2 * 25 / (9 * 10 * 9))
        self.assertAlmostEqual(kendall_ci_halfwidth(10), expected, places=12)
        self.assertAlmostEqual(kendall_tau(np.arange(10), np.arange(10)).ci95_halfwidth, expected)

    def test_constant_input(self):
        """A constant sequence has no rank correlation."""
        with self.assertRaises(UndefinedCorrelationError):
            kendall_tau([1, 1, 1], [1, 2, 3])

    def test_length_mismatch(self):
        """Both sequences need the same length."""
        with self.assertRaises(ConfigError):
            kendall_tau([1, 2, 3], [1, 2])


class TestNormalization(unittest.TestCase):
    """Test gaps and min-max scaling."""

    def test_normalize(self):
        """(2, 4, 6) maps to (0, 0.5, 1)."""
        np.testing.assert_allclose(normalize_measures([2.0, 4.0, 6.0]), [0.0, 0.5, 1.0])

    def test_normalize_constant(self):
        """A constant column cannot be normalized."""
        with self.assertRaises(DegenerateNormalizationError):
            normalize_measures([3.0, 3.0])

    def test_gap(self):
        """Test error minus train error."""
        self.assertAlmostEqual(generalization_gap(0.01, 0.10), 0.09)

    def test_gap_out_of_range(self):
        """Errors are fractions."""
        with self.assertRaises(ConfigError):
            generalization_gap(0.1, 1.5)


class TestGeRatio(unittest.TestCase):
    """Test the stability-bound ratio."""

    def test_collapsed(self):
        """sigma <= alpha / beta gives exactly 1."""
        result = ge_ratio(GeBoundInputs(1.0, 10.0, 1.0, 1000, 0.05))
        self.assertTrue(result.collapsed)
        self.assertEqual(result.rho, 1.0)
        self.assertEqual(result.p, result.p_hat)

    def test_smoothing_helps(self):
        """Above the threshold the ratio is below 1."""
        result = ge_ratio(GeBoundInputs(1.0, 10.0, 1.0, 1000, 1.0))
        self.assertFalse(result.collapsed)
        self.assertAlmostEqual(result.p, 1 / 11)
        self.assertAlmostEqual(result.p_hat, 0.5)
        self.assertLess(result.rho, 1.0)

    def test_decreasing(self):
        """rho falls with longer horizons and, here, with a larger radius."""
        by_horizon = [ge_ratio(GeBoundInputs(1.0, 10.0, 1.0, T, 1.0)).rho for T in (100, 1000, 10000)]
        self.assertTrue(all(b < a for a, b in zip(by_horizon, by_horizon[1:])))
        small = ge_ratio(GeBoundInputs(1.0, 10.0, 1.0, 1000, 1.0)).rho
        large = ge_ratio(GeBoundInputs(1.0, 10.0, 1.0, 1000, 2.0)).rho
        self.assertLess(large, small)

    def test_bounds_ratio(self):
        """The quotient of the two bounds is rho."""
        inp = GeBoundInputs(1.0, 10.0, 1.0, 1000, 1.0)
        self.assertAlmostEqual(ge_bound_lpf(inp, 500) / ge_bound_sgd(inp, 500), ge_ratio(inp).rho, places=12)

    def test_table(self):
        """One row per (sigma, T); m adds both bounds."""
        rows = ge_ratio_table(1.0, 10.0, 0.1, [0.05, 1.0], [100, 1000], m=1000)
        self.assertEqual(len(rows), 4)
        expected = [(0.05, 100), (0.05, 1000), (1.0, 100), (1.0, 1000)]
        self.assertEqual([(r["sigma"], r["T"]) for r in rows], expected)
        self.assertIn("bound_lpf", rows[0])
        self.assertNotIn("bound_lpf", ge_ratio_table(1.0, 10.0, 0.1, [1.0], [100])[0])

    def test_invalid(self):
        """Constants must be positive."""
        with self.assertRaises(ConfigError):
            GeBoundInputs(0.0, 10.0, 1.0, 100, 1.0)


class TestSmoothingProperties(unittest.TestCase):
    """Test the empirical check of Gaussian smoothing."""

    def test_abs(self):
        """|x| smoothed is 1-Lipschitz and 1/sigma-smooth."""
        result = theorem1_property_check(catalog_function("abs"), 0.5, M=4000, seed=0)
        self.assertTrue(result.passed, result)
        self.assertEqual(result.smoothness_bound, 2.0)

    def test_quadratic(self):
        """A smooth function keeps its own smoothness bound."""
        fn = catalog_function("quadratic", dim=2, beta=2.0, radius=1.0)
        result = theorem1_property_check(fn, 0.1, M=4000, seed=1)
        self.assertTrue(result.passed, result)
        self.assertEqual(result.smoothness_bound, 2.0)

    def test_catalog(self):
        """Every catalog name builds; others are rejected."""
        for name in CATALOG_NAMES:
            self.assertEqual(catalog_function(name).name, name)
        with self.assertRaises(ConfigError):
            catalog_function("cubic")


if __name__ == "__main__":
    unittest.main()
