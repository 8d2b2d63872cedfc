"""
Report emission: pandas tables in CSV or JSON and the manifest that indexes
every artifact of an output directory.
"""

import json
from pathlib import Path
from typing import Any, Dict, List, Sequence, Union

import pandas as pd

from sharpctl.errors import ConfigError
from sharpctl.utils import ensure_dir, get_logger, now_timestamp

logger = get_logger(__name__)

FORMATS = ("csv", "json")
MEASURE_COLUMNS = ["run_id", "measure", "value", "sigma", "M", "epsilon", "psi", "seed"]
CORRELATION_COLUMNS = ["measure", "axis", "tau", "ci95", "n"]
LANDSCAPE_COLUMNS = ["sweep_param", "sweep_value", "measure", "oracle_value", "estimated_value", "seed"]

Rows = Union[pd.DataFrame, Sequence[Dict[str, Any]]]


def check_format(fmt: str) -> str:
    if fmt not in FORMATS:
        raise ConfigError(f"--format must be one of {FORMATS}, got {fmt!r}")
    return fmt


def write_table(rows: Rows, path: Path, fmt: str = "csv", columns: Sequence[str] = ()) -> Path:
    """
    Write rows to ``path`` with the suffix of ``fmt``.

    Args:
        rows: A DataFrame or a sequence of row dictionaries.
        path: Target path; its suffix is replaced.
        fmt: ``csv`` or records-oriented ``json``.
        columns: Column order; also the header of an empty table.
    """
    check_format(fmt)
    frame = rows if isinstance(rows, pd.DataFrame) else pd.DataFrame(list(rows))
    if columns:
        frame = frame.reindex(columns=list(columns))
    path = Path(path).with_suffix(f".{fmt}")
    ensure_dir(path.parent)
    if fmt == "csv":
        frame.to_csv(path, index=False)
    else:
        frame.to_json(path, orient="records", indent=2)
    logger.debug(f"Wrote {len(frame)} rows to {path}.")
    return path


def read_table(path: Path) -> pd.DataFrame:
    path = Path(path)
    if path.suffix == ".json":
        return pd.read_json(path, orient="records")
    return pd.read_csv(path)


def report_rows(run_id: str, reports: Sequence[Any]) -> List[Dict[str, Any]]:
    """One row per measure report with the stochastic knobs that produced it."""
    return [
        {
            "run_id": run_id,
            "measure": report.name,
            "value": report.value,
            "sigma": report.config.get("sigma"),
            "M": report.config.get("M"),
            "epsilon": report.config.get("epsilon"),
            "psi": report.config.get("psi"),
            "seed": report.config.get("seed"),
        }
        for report in reports
    ]


def measure_rows(records: Sequence[Any]) -> List[Dict[str, Any]]:
    """Measure rows of every run, in run order."""
    rows = []
    for record in records:
        rows.extend(report_rows(record.run_id, record.measures))
    return rows


class Manifest:
    """Index of the artifacts written into one output directory."""

    def __init__(self, output_dir: Path, command: str):
        self.output_dir = Path(output_dir)
        self.command = command
        self.artifacts: List[Dict[str, str]] = []
        self.extra: Dict[str, Any] = {}

    def add(self, kind: str, path: Path) -> Path:
        relative = Path(path).resolve().relative_to(self.output_dir.resolve())
        self.artifacts.append({"kind": kind, "path": relative.as_posix()})
        return path

    def write(self) -> Path:
        path = ensure_dir(self.output_dir) / "manifest.json"
        payload = {
            "command": self.command,
            "created_at": now_timestamp(),
            "artifacts": self.artifacts,
            **self.extra,
        }
        path.write_text(json.dumps(payload, indent=2, sort_keys=False) + "\n", encoding="utf-8")
        logger.info(f"Manifest written to {path} ({len(self.artifacts)} artifacts).")
        return path


def write_run_reports(
    records: Sequence[Any],
    output_dir: Path,
    fmt: str,
    manifest: Manifest,
) -> None:
    """Step logs, the runs table and the measures table for finished runs."""
    output_dir = Path(output_dir)
    for record in records:
        if record.step_log is not None:
            path = write_table(record.step_log, output_dir / "steps" / record.run_id, fmt)
            record.step_log_path = manifest.add("step_log", path).relative_to(output_dir).as_posix()
    manifest.add("runs", write_table([r.to_row() for r in records], output_dir / "runs", fmt))
    measures = write_table(measure_rows(records), output_dir / "measures", fmt, MEASURE_COLUMNS)
    manifest.add("measures", measures)
