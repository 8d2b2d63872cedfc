"""
Run registry: SQLite schema and helper functions for finished runs and their
measures. One database (``runs.db``) lives in every output directory.
"""

import json
import sqlite3
import threading
from pathlib import Path
from typing import Any, Dict, List, Optional

from sharpctl.utils import get_db_path, get_logger, now_timestamp

logger = get_logger(__name__)

RUN_STATES = ("converged", "discarded")

# Thread-local storage for database connections, one per output directory
_thread_local = threading.local()


def get_db_connection(output_dir: Path) -> sqlite3.Connection:
    """
    Get a thread-safe database connection for an output directory.
    Each thread gets its own connection per database file.
    """
    if not hasattr(_thread_local, "connections"):
        _thread_local.connections = {}
    db_path = str(get_db_path(output_dir).resolve())
    conn = _thread_local.connections.get(db_path)
    if conn is None:
        Path(db_path).parent.mkdir(parents=True, exist_ok=True)
        conn = sqlite3.connect(db_path, check_same_thread=False)
        conn.row_factory = sqlite3.Row
        # Enable foreign keys
        conn.execute("PRAGMA foreign_keys = ON")
        _thread_local.connections[db_path] = conn
    return conn


def close_db_connection(output_dir: Path) -> None:
    """Close the thread-local connection to one output directory's registry."""
    connections = getattr(_thread_local, "connections", {})
    conn = connections.pop(str(get_db_path(output_dir).resolve()), None)
    if conn is not None:
        conn.close()


def init_db(output_dir: Path) -> None:
    """Initialize the database schema."""
    conn = get_db_connection(output_dir)
    cursor = conn.cursor()

    cursor.execute(
        """
        CREATE TABLE IF NOT EXISTS runs (
            run_id TEXT PRIMARY KEY,
            config_hash TEXT NOT NULL,
            seed INTEGER NOT NULL,
            sweep_value TEXT NOT NULL DEFAULT '',
            state TEXT NOT NULL,
            reason TEXT NOT NULL DEFAULT '',
            final_train_loss REAL,
            train_error REAL,
            test_error REAL,
            epochs INTEGER NOT NULL,
            step_log_path TEXT,
            recorded_at TEXT NOT NULL,
            CHECK (state IN ('converged', 'discarded'))
        )
    """
    )

    cursor.execute(
        """
        CREATE TABLE IF NOT EXISTS measures (
            run_id TEXT NOT NULL,
            measure TEXT NOT NULL,
            value REAL NOT NULL,
            config TEXT NOT NULL,
            PRIMARY KEY (run_id, measure),
            FOREIGN KEY (run_id) REFERENCES runs(run_id) ON DELETE CASCADE
        )
    """
    )

    conn.commit()
    logger.debug(f"Run registry initialized in {output_dir}.")


def insert_run(output_dir: Path, record: Any) -> None:
    """
    Insert or replace a run and its measures.

    Args:
        output_dir: Output directory holding the registry.
        record: A harness RunRecord.
    """
    conn = get_db_connection(output_dir)
    cursor = conn.cursor()
    row = record.to_row()
    cursor.execute("DELETE FROM measures WHERE run_id = ?", (record.run_id,))
    cursor.execute(
        """
        INSERT OR REPLACE INTO runs (
            run_id, config_hash, seed, sweep_value, state, reason, final_train_loss,
            train_error, test_error, epochs, step_log_path, recorded_at
        )
        VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
    """,
        (
            row["run_id"],
            row["config_hash"],
            row["seed"],
            row["sweep_value"],
            row["state"],
            row["reason"],
            row["final_train_loss"],
            row["train_error"],
            row["test_error"],
            row["epochs"],
            row["step_log_path"],
            now_timestamp(),
        ),
    )
    cursor.executemany(
        "INSERT INTO measures (run_id, measure, value, config) VALUES (?, ?, ?, ?)",
        [
            (record.run_id, report.name, report.value, json.dumps(report.config, sort_keys=True))
            for report in record.measures
        ],
    )
    conn.commit()
    logger.debug(f"Run {record.run_id} recorded as {row['state']}.")


def get_run(output_dir: Path, run_id: str) -> Optional[Dict[str, Any]]:
    """Get a run by ID, with its measures under ``measures``."""
    conn = get_db_connection(output_dir)
    cursor = conn.cursor()
    cursor.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,))
    row = cursor.fetchone()
    if not row:
        return None
    run = dict(row)
    run["measures"] = get_measures(output_dir, run_id)
    return run


def list_runs(output_dir: Path, state: Optional[str] = None, limit: int = 100) -> List[Dict[str, Any]]:
    """List runs, optionally filtered by state."""
    conn = get_db_connection(output_dir)
    cursor = conn.cursor()

    if state:
        cursor.execute(
            "SELECT * FROM runs WHERE state = ? ORDER BY recorded_at, run_id LIMIT ?",
            (state, limit),
        )
    else:
        cursor.execute(
            "SELECT * FROM runs ORDER BY recorded_at, run_id LIMIT ?",
            (limit,),
        )

    return [dict(row) for row in cursor.fetchall()]


def get_measures(output_dir: Path, run_id: str) -> List[Dict[str, Any]]:
    """Measures recorded for one run, config decoded."""
    conn = get_db_connection(output_dir)
    cursor = conn.cursor()
    cursor.execute("SELECT measure, value, config FROM measures WHERE run_id = ? ORDER BY rowid", (run_id,))
    return [
        {"measure": row["measure"], "value": row["value"], "config": json.loads(row["config"])}
        for row in cursor.fetchall()
    ]


def get_run_counts(output_dir: Path) -> Dict[str, int]:
    """Count runs by state."""
    conn = get_db_connection(output_dir)
    cursor = conn.cursor()
    cursor.execute("SELECT state, COUNT(*) AS count FROM runs GROUP BY state")
    counts = {state: 0 for state in RUN_STATES}
    for row in cursor.fetchall():
        counts[row["state"]] = row["count"]
    return counts
