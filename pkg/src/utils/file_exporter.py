"""Write run artefacts: CSV tables and JSON summaries.

Every writer creates the target directory first. Failures are logged and
re-raised so the command line can report them with an I/O exit code.
"""

import csv
import json
import logging
import os
from collections.abc import Iterable, Sequence
from typing import Any

METRICS_HEADER = [
    "epoch",
    "split",
    "loss",
    "accuracy",
    "mean_residual",
    "total_firing_rate",
]
RESIDUALS_HEADER = ["t", "layer", "residual"]
SOLVER_TRACE_HEADER = ["iter", "residual"]
GRADCHECK_HEADER = ["param", "coordinate", "implicit", "fd", "rel_err"]
RATES_HEADER = ["layer", "firing_rate"]


def _ensure_directory_exists(filename: str) -> None:
    """Ensure that the directory for the given filename exists.

    Args:
        filename (str): The path to the file.
    """
    directory = os.path.dirname(filename)
    if directory:
        os.makedirs(directory, exist_ok=True)


def save_csv(
    rows: Iterable[Sequence[Any]], header: Sequence[str], filename: str
) -> None:
    """Write a CSV file with a header row, replacing any previous content.

    Args:
        rows (Iterable[Sequence]): Data rows.
        header (Sequence[str]): Column names.
        filename (str): The path to the output .csv file.

    Raises:
        OSError: If the file cannot be written.
    """
    try:
        _ensure_directory_exists(filename)
        with open(filename, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(header)
            writer.writerows(rows)
        logging.info(f"Table successfully saved to: {filename}")
    except OSError as e:
        logging.error(f"Failed to save .csv file '{filename}': {e}")
        raise


def append_csv(row: Sequence[Any], header: Sequence[str], filename: str) -> None:
    """Append one row, writing the header first if the file is new or empty."""
    try:
        _ensure_directory_exists(filename)
        is_new = not os.path.exists(filename) or os.path.getsize(filename) == 0
        with open(filename, "a", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            if is_new:
                writer.writerow(header)
            writer.writerow(row)
    except OSError as e:
        logging.error(f"Failed to append to .csv file '{filename}': {e}")
        raise


def save_json(data: dict[str, Any], filename: str) -> None:
    """Save a dictionary as pretty-printed JSON."""
    try:
        _ensure_directory_exists(filename)
        with open(filename, "w", encoding="utf-8") as f:
            json.dump(data, f, indent=2)
        logging.info(f"JSON successfully saved to: {filename}")
    except OSError as e:
        logging.error(f"Failed to save .json file '{filename}': {e}")
        raise
