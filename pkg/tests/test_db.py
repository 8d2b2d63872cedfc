"""
Run registry and report emission tests - Run with pytest
"""

import json
import sys
import tempfile
import unittest
from pathlib import Path

import pandas as pd

sys.path.insert(0, str(Path(__file__).parent.parent))

from sharpctl.db import (
    close_db_connection,
    get_measures,
    get_run,
    get_run_counts,
    init_db,
    insert_run,
    list_runs,
)
from sharpctl.errors import ConfigError
from sharpctl.harness import RunRecord
from sharpctl.reports import (
    MEASURE_COLUMNS,
    Manifest,
    read_table,
    report_rows,
    write_run_reports,
    write_table,
)
from sharpctl.sharpness import MeasureReport


def make_record(run_id, converged=True, value=0.5):
    measures = [
        MeasureReport("lpf", value, {"sigma": 0.01, "M": 100, "seed": 0}),
        MeasureReport("frn", 2.0 * value),
    ]
    return RunRecord(
        run_id=run_id,
        config_hash="abc123",
        seed=0,
        converged=converged,
        reason="" if converged else "max_epochs reached",
        final_train_loss=0.01 if converged else 0.4,
        train_error=0.0,
        test_error=0.05,
        epochs=12,
        measures=measures if converged else [],
        sweep_value="0.1",
        step_log=pd.DataFrame({"step": [0, 1], "loss": [0.7, 0.6]}),
    )


class TestRegistry(unittest.TestCase):
    """Test the SQLite run registry."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)
        init_db(self.out)

    def tearDown(self):
        close_db_connection(self.out)
        self.tmp.cleanup()

    def test_insert_and_get(self):
        """A run comes back with its measures and their configuration."""
        insert_run(self.out, make_record("a-s0"))
        run = get_run(self.out, "a-s0")
        self.assertEqual(run["state"], "converged")
        self.assertEqual(run["epochs"], 12)
        self.assertEqual([m["measure"] for m in run["measures"]], ["lpf", "frn"])
        self.assertEqual(run["measures"][0]["config"], {"M": 100, "seed": 0, "sigma": 0.01})

    def test_missing_run(self):
        """Unknown ids give None."""
        self.assertIsNone(get_run(self.out, "nope"))

    def test_replace(self):
        """Re-inserting a run replaces it and its measures."""
        insert_run(self.out, make_record("a-s0", value=0.5))
        insert_run(self.out, make_record("a-s0", value=0.7))
        self.assertEqual(len(list_runs(self.out)), 1)
        self.assertAlmostEqual(get_measures(self.out, "a-s0")[0]["value"], 0.7)

    def test_list_and_counts(self):
        """Runs filter by state and counts cover both states."""
        insert_run(self.out, make_record("a-s0"))
        insert_run(self.out, make_record("b-s0", converged=False))
        insert_run(self.out, make_record("c-s0"))
        self.assertEqual(len(list_runs(self.out)), 3)
        self.assertEqual([r["run_id"] for r in list_runs(self.out, state="discarded")], ["b-s0"])
        self.assertEqual(len(list_runs(self.out, limit=2)), 2)
        self.assertEqual(get_run_counts(self.out), {"converged": 2, "discarded": 1})


class TestReports(unittest.TestCase):
    """Test tables and the manifest."""

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.out = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_write_csv_and_json(self):
        """The suffix follows the format and both read back."""
        rows = [{"a": 1, "b": 0.5}, {"a": 2, "b": 1.5}]
        csv_path = write_table(rows, self.out / "table.txt", "csv")
        json_path = write_table(rows, self.out / "table", "json")
        self.assertEqual(csv_path.name, "table.csv")
        self.assertEqual(json.loads(json_path.read_text()), rows)
        self.assertEqual(list(read_table(csv_path)["b"]), [0.5, 1.5])

    def test_empty_table_keeps_header(self):
        """An empty table still has its columns."""
        path = write_table([], self.out / "measures", "csv", MEASURE_COLUMNS)
        self.assertEqual(path.read_text().strip(), ",".join(MEASURE_COLUMNS))

    def test_bad_format(self):
        """Only csv and json are supported."""
        with self.assertRaises(ConfigError):
            write_table([], self.out / "x", "parquet")

    def test_report_rows(self):
        """Knobs a measure did not use are empty."""
        reports = [MeasureReport("frn", 3.0), MeasureReport("lpf", 0.1, {"sigma": 0.01, "M": 5})]
        rows = report_rows("r1", reports)
        self.assertEqual(rows[0]["run_id"], "r1")
        self.assertIsNone(rows[0]["sigma"])
        self.assertEqual((rows[1]["sigma"], rows[1]["M"]), (0.01, 5))

    def test_run_reports_and_manifest(self):
        """Step logs, runs and measures are written and indexed."""
        records = [make_record("a-s0"), make_record("b-s0", converged=False)]
        manifest = Manifest(self.out, "sweep")
        write_run_reports(records, self.out, "csv", manifest)
        manifest.extra["axis"] = "width"
        payload = json.loads(manifest.write().read_text())
        self.assertEqual(payload["axis"], "width")
        paths = [artifact["path"] for artifact in payload["artifacts"]]
        self.assertEqual(paths, ["steps/a-s0.csv", "steps/b-s0.csv", "runs.csv", "measures.csv"])
        self.assertEqual(records[0].step_log_path, "steps/a-s0.csv")
        runs = read_table(self.out / "runs.csv")
        self.assertEqual(list(runs["state"]), ["converged", "discarded"])
        self.assertEqual(len(read_table(self.out / "measures.csv")), 2)


if __name__ == "__main__":
    unittest.main()
