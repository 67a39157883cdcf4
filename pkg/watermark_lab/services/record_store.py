"""
Record store - the single writer of experiment artifacts.

Artifacts written per run directory:
- record.json: the RunRecord (deterministic for a given config and seed)
- <command>.csv and friends: tidy tables built with pandas
- config.yaml: the exact config bytes the run was started with
- timing.json: wall-clock only, kept apart so the other files stay byte-identical
"""

import json
import logging
from pathlib import Path
from typing import Any, Iterable, Optional, Union

import pandas as pd

from ..errors import HarnessError
from ..models.records import RunRecord

logger = logging.getLogger(__name__)

RECORD_FILE = "record.json"
TIMING_FILE = "timing.json"
CONFIG_FILE = "config.yaml"


class RecordStore:
    """Writes the artifacts of one run into an output directory."""

    def __init__(self, out_dir: Union[str, Path]):
        """
        Initialize the store.

        Args:
            out_dir: Output directory (created if missing)
        """
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out_dir / name

    def write_record(self, record: RunRecord, name: str = RECORD_FILE) -> Path:
        target = self.path(name)
        target.write_text(record.model_dump_json(indent=2) + "\n")
        logger.info(f"Wrote {target}")
        return target

    def write_table(
        self,
        rows: Iterable[dict[str, Any]],
        name: str,
        columns: Optional[list[str]] = None,
        dtypes: Optional[dict[str, str]] = None,
    ) -> Path:
        """
        Write rows as CSV.

        Args:
            rows: One dict per row
            name: File name inside the output directory
            columns: Column order; also the header of an empty table
            dtypes: Column dtypes, e.g. "Int64" for integer columns with gaps;
                entries for columns the table does not have are ignored

        Returns:
            Path of the written file
        """
        target = self.path(name)
        frame = pd.DataFrame(list(rows), columns=columns)
        present = {column: dtype for column, dtype in (dtypes or {}).items() if column in frame.columns}
        if present and len(frame):
            frame = frame.astype(present)
        frame.to_csv(target, index=False)
        logger.info(f"Wrote {len(frame)} rows to {target}")
        return target

    def write_frame(self, frame: pd.DataFrame, name: str) -> Path:
        target = self.path(name)
        frame.to_csv(target, index=False)
        logger.info(f"Wrote {len(frame)} rows to {target}")
        return target

    def write_config(self, raw: bytes) -> Path:
        target = self.path(CONFIG_FILE)
        target.write_bytes(raw)
        return target

    def write_timing(self, timing: dict[str, float]) -> Path:
        target = self.path(TIMING_FILE)
        target.write_text(json.dumps(timing, indent=2, sort_keys=True) + "\n")
        return target

    @staticmethod
    def load_record(path: Union[str, Path]) -> RunRecord:
        """
        Read a RunRecord from disk.

        Raises:
            HarnessError: If the file is missing or not a record
        """
        path = Path(path)
        if path.is_dir():
            path = path / RECORD_FILE
        try:
            return RunRecord.model_validate_json(path.read_text())
        except (OSError, ValueError) as e:
            raise HarnessError("plotdata", f"cannot read record {path}: {e}", e) from e
