"""
Integration tests for training runs and sweeps - Run with pytest
"""

import json
import os
import sys
import tempfile
import unittest
from pathlib import Path
from statistics import median

sys.path.insert(0, str(Path(__file__).parent.parent))

from sharpctl.config import Config
from sharpctl.db import close_db_connection, get_run_counts
from sharpctl.errors import ConfigError
from sharpctl.harness import (
    ExperimentConfig,
    RunRecord,
    axis_key,
    correlate,
    point_config,
    point_means,
    run_sweep,
    sweep_tasks,
    train_to_threshold,
)
from sharpctl.sharpness import MeasureReport

SMALL_RUN = {
    "dataset.n": "120",
    "model.hidden": "6",
    "optimizer.lr": "0.1",
    "optimizer.batch_size": "30",
    "stop.loss_threshold": "0.2",
    "stop.max_epochs": "40",
    "measures.names": "lpf,frn,shannon_entropy",
    "measures.mc_samples": "20",
}


def small_config(**overrides):
    values = dict(SMALL_RUN)
    values.update(overrides)
    return Config(values)


def small_run(**overrides):
    return ExperimentConfig.from_config(small_config(**overrides))


def record(value, seed, gap, lpf, converged=True):
    return RunRecord(
        run_id=f"r{value}-s{seed}",
        config_hash="h",
        seed=seed,
        converged=converged,
        reason="" if converged else "max_epochs reached",
        final_train_loss=0.01,
        train_error=0.0,
        test_error=gap,
        epochs=3,
        measures=[MeasureReport("lpf", lpf)] if converged else [],
        sweep_value=str(value),
    )


class TestTraining(unittest.TestCase):
    """Test single training runs."""

    def test_zero_epochs_is_discarded(self):
        """With no epochs the run cannot converge and gets no measures."""
        cfg = small_run(**{"stop.max_epochs": "0"})
        result = train_to_threshold(cfg, seed=0)
        self.assertFalse(result.converged)
        self.assertEqual(result.state, "discarded")
        self.assertEqual(result.epochs, 0)
        self.assertEqual(result.measures, [])
        self.assertEqual(result.reason, "max_epochs reached")

    def test_deterministic(self):
        """Two runs with the same seed give the same record."""
        cfg = small_run(**{"optimizer.name": "lpf_sgd", "lpf.mc_samples": "2"})
        a = train_to_threshold(cfg, seed=1)
        b = train_to_threshold(cfg, seed=1)
        self.assertEqual(a.run_id, b.run_id)
        self.assertEqual(a.final_train_loss, b.final_train_loss)
        self.assertEqual(a.measure_values(), b.measure_values())
        self.assertEqual(list(a.step_log["loss"]), list(b.step_log["loss"]))

    def test_every_optimizer_runs(self):
        """Each optimizer completes a short run and logs its steps."""
        for name in ("msgd", "lpf_sgd", "sam", "entropy_sgd"):
            cfg = small_run(**{"optimizer.name": name, "stop.max_epochs": "2"})
            result = train_to_threshold(cfg, seed=0)
            self.assertGreater(len(result.step_log), 0, name)
            self.assertEqual(set(result.step_log["optimizer"]), {name})

    def test_splits_exceed_batch(self):
        """LPF splits larger than the smallest batch are rejected."""
        cfg = small_run(**{"optimizer.name": "lpf_sgd", "lpf.mc_samples": "64"})
        with self.assertRaises(ConfigError):
            train_to_threshold(cfg, seed=0)

    def test_unknown_optimizer(self):
        """Only the four optimizers exist."""
        with self.assertRaises(ConfigError):
            small_run(**{"optimizer.name": "adam"})


class TestSweepPlanning(unittest.TestCase):
    """Test sweep axes and task lists."""

    def test_axis_keys(self):
        """Each axis maps to its configuration key."""
        config = Config()
        self.assertEqual(axis_key(config, "label_noise"), "dataset.label_noise")
        self.assertEqual(axis_key(config, "hyperparam"), "optimizer.lr")
        with self.assertRaises(ConfigError):
            axis_key(config, "depth")

    def test_width_point(self):
        """Width values apply to every hidden layer."""
        point = point_config(Config({"model.hidden": "8,8"}), "width", "32")
        self.assertEqual(point.get("model.hidden"), "32,32")

    def test_task_order(self):
        """Values outermost, seeds innermost."""
        config = Config({"sweep.values": "0.1,0.2", "run.seeds": "0,1"})
        tasks = sweep_tasks(config, "hyperparam")
        self.assertEqual([(t[2], t[1]) for t in tasks], [("0.1", 0), ("0.1", 1), ("0.2", 0), ("0.2", 1)])
        self.assertEqual(tasks[2][0].get("optimizer.lr"), "0.2")

    def test_empty_values(self):
        """A sweep needs values."""
        with self.assertRaises(ConfigError):
            sweep_tasks(Config(), "hyperparam")


class TestCorrelation(unittest.TestCase):
    """Test seed averaging and rank correlation over sweep points."""

    def test_monotone_measure(self):
        """A measure rising with the gap gets tau = 1; discarded runs are ignored."""
        records = [
            record(1, 0, 0.10, 1.0),
            record(1, 1, 0.12, 1.2),
            record(2, 0, 0.20, 2.0),
            record(2, 1, 0.22, 2.2),
            record(2, 2, 0.90, 0.0, converged=False),
            record(3, 0, 0.30, 3.0),
        ]
        means = point_means(records)
        self.assertEqual(list(means["sweep_value"]), ["1", "2", "3"])
        self.assertAlmostEqual(float(means["gap"].iloc[1]), 0.21)
        rows = {row["measure"]: row for row in correlate(records, "hyperparam", ["lpf"])}
        self.assertAlmostEqual(rows["lpf"]["tau"], 1.0)
        self.assertAlmostEqual(rows["sweep_value"]["tau"], 1.0)
        self.assertEqual(rows["lpf"]["n"], 3)

    def test_single_point_skipped(self):
        """One sweep point gives no correlation."""
        self.assertEqual(correlate([record(1, 0, 0.1, 1.0)], "hyperparam", ["lpf"]), [])


class TestSweep(unittest.TestCase):
    """Test sweeps end to end."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name) / "sweep"

    def tearDown(self):
        close_db_connection(self.out)
        self.tmp.cleanup()

    def test_sweep_writes_reports(self):
        """Every value x seed is trained, registered and listed in the manifest."""
        config = small_config(**{"sweep.values": "0.05,0.1", "run.seeds": "0,1", "stop.max_epochs": "5"})
        result = run_sweep(config, "hyperparam", self.out, workers=1)
        self.assertEqual(len(result.records), 4)
        manifest = json.loads(result.manifest_path.read_text())
        self.assertEqual(manifest["command"], "sweep")
        self.assertEqual(manifest["axis"], "hyperparam")
        self.assertEqual(len(manifest["runs"]), 4)
        kinds = {artifact["kind"] for artifact in manifest["artifacts"]}
        self.assertTrue({"runs", "measures", "sweep_summary", "correlation", "step_log"} <= kinds)
        for artifact in manifest["artifacts"]:
            self.assertTrue((self.out / artifact["path"]).exists(), artifact)
        self.assertEqual(sum(get_run_counts(self.out).values()), 4)

    def test_single_point_sweep(self):
        """A sweep with one value writes an empty correlation table."""
        config = small_config(**{"sweep.values": "0.1", "stop.max_epochs": "2"})
        result = run_sweep(config, "hyperparam", self.out, workers=1, fmt="json")
        self.assertEqual(result.correlation, [])
        self.assertTrue((self.out / "correlation.json").exists())

    @unittest.skipUnless(os.environ.get("SHARPCTL_SLOW") == "1", "set SHARPCTL_SLOW=1 for long sweeps")
    def test_label_noise_widens_gap(self):
        """More label noise gives a larger gap, and the sharpness measures follow."""
        config = small_config(
            **{
                "dataset.n": "400",
                "model.hidden": "32",
                "stop.loss_threshold": "0.05",
                "stop.max_epochs": "300",
                "sweep.values": "0.0,0.2,0.4",
                "run.seeds": "0,1,2",
                "measures.names": "lpf,shannon_entropy",
                "measures.mc_samples": "100",
            }
        )
        result = run_sweep(config, "label_noise", self.out, workers=2)
        rows = {row["measure"]: row for row in result.correlation}
        self.assertGreater(rows["sweep_value"]["tau"], 0.0)
        self.assertGreater(rows["lpf"]["tau"], 0.0)


class TestOptimizerComparison(unittest.TestCase):
    """LPF-SGD against momentum SGD on noisy labels."""

    @unittest.skipUnless(os.environ.get("SHARPCTL_SLOW") == "1", "set SHARPCTL_SLOW=1 for long sweeps")
    def test_lpf_sgd_finds_flatter_minima(self):
        """Over 5 seeds LPF-SGD has no worse median test error and a lower median lpf measure."""
        noisy = {
            "dataset.n": "2000",
            "dataset.classes": "2",
            "dataset.label_noise": "0.2",
            "model.hidden": "16",
            "optimizer.lr": "0.05",
            "optimizer.batch_size": "32",
            "stop.loss_threshold": "0.45",
            "stop.max_epochs": "100",
            "measures.names": "lpf",
            "measures.sigma": "0.05",
            "measures.mc_samples": "200",
        }
        results = {}
        for name, extra in (
            ("msgd", {}),
            ("lpf_sgd", {"lpf.gamma0": "0.05", "lpf.mc_samples": "4"}),
        ):
            cfg = small_run(**noisy, **extra, **{"optimizer.name": name})
            runs = [train_to_threshold(cfg, seed=seed) for seed in range(5)]
            converged = [run for run in runs if run.converged]
            self.assertGreaterEqual(len(converged), 3, name)
            results[name] = (
                median(run.test_error for run in converged),
                median(run.measure_values()["lpf"] for run in converged),
            )
        self.assertLessEqual(results["lpf_sgd"][0], results["msgd"][0])
        self.assertLess(results["lpf_sgd"][1], results["msgd"][1])


if __name__ == "__main__":
    unittest.main()
