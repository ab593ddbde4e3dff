"""CSV and JSON report writers shared by the CLI subcommands."""
from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

import pandas as pd

LOGGER = logging.getLogger(__name__)

PR_COLUMNS = ["similarity", "threshold", "rank", "recall", "precision"]
BENCH_COLUMNS = ["run", "vote_ms", "nms_ms", "cluster_ms", "assemble_ms", "total_ms"]
ABLATION_COLUMNS = ["study", "variant", "metric", "value"]


class CSVTableWriter:
    """Streams rows into one CSV whose header is a fixed column list."""

    def __init__(self, out_path: str | Path, columns: Sequence[str]):
        self.path = Path(out_path)
        self.columns = list(columns)
        self.rows_written = 0
        self.header_written = False

    def write_rows(self, rows: Iterable[Mapping[str, Any]]) -> None:
        self.write_df(pd.DataFrame(list(rows)))

    def write_df(self, df: pd.DataFrame) -> None:
        if df.empty:
            return
        # unknown keys are dropped, missing ones left blank
        df = df.reindex(columns=self.columns)
        if not self.header_written:
            self.path.parent.mkdir(parents=True, exist_ok=True)
        mode = "a" if self.header_written else "w"
        df.to_csv(self.path, index=False, header=not self.header_written, mode=mode)
        self.header_written = True
        self.rows_written += len(df)

    def finish(self) -> Path:
        """Make sure at least a header exists; returns the written path."""
        if not self.header_written:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            pd.DataFrame(columns=self.columns).to_csv(self.path, index=False)
            self.header_written = True
        return self.path


def write_csv(path: str | Path, rows: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> Path:
    writer = CSVTableWriter(path, columns)
    writer.write_rows(rows)
    out = writer.finish()
    LOGGER.info("wrote %d rows to %s", writer.rows_written, out)
    return out


def json_text(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


def write_json(path: str | Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json_text(payload), encoding="utf-8")
    return path
