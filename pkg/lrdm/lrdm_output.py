#!/usr/bin/env python3
"""
Output Service

Writes run artifacts: CSV tables, JSON records, the config echo and a
human-readable summary report. Existing files are never replaced unless the
service was created with ``force=True``.
"""

import csv
import json
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

from .lrdm_state import LRDMState


def _cell(value: Any) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, (np.integer,)):
        return str(int(value))
    return str(value)


class OutputService:
    """Artifact writer for one output directory."""

    def __init__(self, state: LRDMState, output_dir: Optional[Path] = None, force: bool = False):
        self.state = state
        self.output_dir = Path(output_dir) if output_dir is not None else state.get_output_path()
        self.force = force
        self.written: Dict[str, str] = {}

    def _convert_numpy_types(self, obj):
        """
        Convert numpy types to Python types for JSON serialization.

        Args:
            obj: Object to convert

        Returns:
            Converted object
        """
        if isinstance(obj, np.ndarray):
            return obj.tolist()
        elif isinstance(obj, np.integer):
            return int(obj)
        elif isinstance(obj, np.floating):
            return float(obj)
        elif isinstance(obj, dict):
            return {key: self._convert_numpy_types(value) for key, value in obj.items()}
        elif isinstance(obj, (list, tuple)):
            return [self._convert_numpy_types(item) for item in obj]
        else:
            return obj

    def path_for(self, filename: str) -> Path:
        """
        Destination path, refusing to replace an existing file without force.

        Args:
            filename: File name inside the output directory

        Returns:
            Path to write
        """
        self.output_dir.mkdir(parents=True, exist_ok=True)
        path = self.output_dir / filename
        if path.exists() and not self.force:
            raise FileExistsError(f"{path} already exists (use --force to overwrite)")
        return path

    def record(self, key: str, path: Path) -> str:
        """Register a file written by another service (datasets, checkpoints) under ``key``."""
        self.written[key] = str(path)
        return str(path)

    def write_json(self, data: Dict[str, Any], filename: str, key: Optional[str] = None) -> str:
        path = self.path_for(filename)
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self._convert_numpy_types(data), f, indent=2, ensure_ascii=False)
        return self.record(key or Path(filename).stem, path)

    def write_config_echo(self, config: Dict[str, Any], filename: str = "config.json") -> str:
        """Echo the run config verbatim; it re-runs to identical results."""
        return self.write_json(config, filename, key="config")

    def write_rows(self, rows: List[Dict[str, Any]], header: Sequence[str], filename: str,
                   key: Optional[str] = None) -> str:
        """
        Write dictionaries as CSV rows in ``header`` order.

        Args:
            rows: Row dictionaries
            header: Column names
            filename: Output file name

        Returns:
            Path to generated file
        """
        path = self.path_for(filename)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            for row in rows:
                writer.writerow([_cell(row.get(column, "")) for column in header])
        return self.record(key or Path(filename).stem, path)

    def write_table(self, rows: List[List[Any]], header: Sequence[str], filename: str,
                    key: Optional[str] = None) -> str:
        path = self.path_for(filename)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows([[_cell(v) for v in row] for row in rows])
        return self.record(key or Path(filename).stem, path)

    def write_points(self, points: np.ndarray, filename: str, labels: Optional[np.ndarray] = None,
                     key: Optional[str] = None, prefix: str = "x") -> str:
        """One point per row, columns ``x_0..x_{D-1}`` (plus ``label``)."""
        points = np.atleast_2d(np.asarray(points, dtype=np.float64))
        header = [f"{prefix}_{i}" for i in range(points.shape[1])]
        rows = [list(row) for row in points]
        if labels is not None:
            header.append("label")
            labels = np.broadcast_to(np.asarray(labels), (points.shape[0],))
            rows = [row + [int(label)] for row, label in zip(rows, labels)]
        return self.write_table(rows, header, filename, key)

    def write_summary_report(self, title: str, sections: Dict[str, Dict[str, Any]],
                             filename: str = "summary.txt") -> str:
        """
        Generate a plain-text summary report.

        Args:
            title: Report title
            sections: Section name -> {label: value}
            filename: Output file name

        Returns:
            Path to generated file
        """
        path = self.path_for(filename)
        with open(path, "w", encoding="utf-8") as f:
            f.write(f"{title}\n")
            f.write("=" * 40 + "\n\n")
            for name, values in sections.items():
                f.write(f"{name}:\n")
                f.write("-" * 20 + "\n")
                for label, value in values.items():
                    if isinstance(value, float):
                        value = f"{value:.6g}"
                    f.write(f"  {label}: {value}\n")
                f.write("\n")
        return self.record("summary", path)

    def get_output_info(self) -> Dict[str, Any]:
        """Get output service information."""
        return {
            "output_directory": str(self.output_dir),
            "directory_exists": self.output_dir.exists(),
            "written": dict(self.written),
        }
