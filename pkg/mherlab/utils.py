# Utility functions for mherlab.
#
# This module provides logging setup, labeled random streams and small
# file helpers shared by the harness and the CLI.

import csv
import logging
import logging.handlers
import zlib
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence

import numpy as np
from pythonjsonlogger import jsonlogger

LOGGER_NAME = 'mherlab'


def setup_logging(
    log_dir: Optional[str] = None,
    log_file: Optional[str] = None,
    log_level: str = 'INFO'
) -> logging.Logger:
    """Set up logging with JSON formatting and file rotation.

    Calling it again replaces the handlers installed by the previous call.

    Args:
        log_dir: Directory for log files
        log_file: Name of the log file
        log_level: Logging level

    Returns:
        Configured logger instance
    """
    logger = logging.getLogger(LOGGER_NAME)
    logger.setLevel(log_level)
    for handler in list(logger.handlers):
        logger.removeHandler(handler)
        handler.close()

    formatter = jsonlogger.JsonFormatter(
        '%(asctime)s %(name)s %(levelname)s %(message)s',
        timestamp=True
    )

    if log_file:
        if log_dir:
            log_dir_path = Path(log_dir)
            log_dir_path.mkdir(parents=True, exist_ok=True)
            log_path = log_dir_path / log_file
        else:
            log_path = Path(log_file)

        handler = logging.handlers.RotatingFileHandler(
            filename=str(log_path),
            maxBytes=100 * 1024 * 1024,  # 100MB
            backupCount=5,
            encoding='utf-8'
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    console_handler = logging.StreamHandler()
    console_handler.setFormatter(formatter)
    logger.addHandler(console_handler)

    return logger


class SeedStreams:
    """Labeled random substreams fanned out from one master seed.

    Each label maps to its own ``numpy.random.Generator`` derived from
    ``SeedSequence(seed, spawn_key=(crc32(label),))``, so drawing from one
    stream never shifts another.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: Dict[str, np.random.Generator] = {}

    def _sequence(self, label: str) -> np.random.SeedSequence:
        return np.random.SeedSequence(
            self.seed, spawn_key=(zlib.crc32(label.encode('utf-8')),)
        )

    def __getitem__(self, label: str) -> np.random.Generator:
        """Get the persistent generator for a label."""
        if label not in self._streams:
            self._streams[label] = np.random.default_rng(self._sequence(label))
        return self._streams[label]

    def fresh(self, label: str) -> np.random.Generator:
        """Get a new generator for a label, starting from the beginning of its stream."""
        return np.random.default_rng(self._sequence(label))


def format_float(value: float) -> str:
    """Format a float so that it round-trips exactly through text."""
    return repr(float(value))


def append_csv_rows(
    path: Path,
    header: Sequence[str],
    rows: Iterable[Sequence],
) -> int:
    """Append rows to a CSV file, writing the header when the file is new.

    Args:
        path: CSV file path
        header: Column names
        rows: Row values; floats are written with ``format_float``

    Returns:
        Number of rows appended
    """
    path = Path(path)
    is_new = not path.exists() or path.stat().st_size == 0
    count = 0
    with open(path, 'a', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        if is_new:
            writer.writerow(header)
        for row in rows:
            writer.writerow([
                format_float(v) if isinstance(v, (float, np.floating)) else v
                for v in row
            ])
            count += 1
    return count


def read_csv_rows(path: Path) -> List[Dict[str, str]]:
    """Read a CSV file with a header into a list of dictionaries."""
    with open(path, newline='', encoding='utf-8') as f:
        return list(csv.DictReader(f))
