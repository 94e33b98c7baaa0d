import csv
import io
import json
import logging
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

from app.models import ReportInfo

logger = logging.getLogger(__name__)

REPORT_SUFFIXES = {".json": "json", ".csv": "csv"}


def get_output_dir(override: Optional[str] = None) -> Path:
    """Resolve the output directory: explicit value, then EDLCM_OUTPUT_DIR, then ./runs."""
    path = Path(override or os.getenv("EDLCM_OUTPUT_DIR") or "runs")
    path.mkdir(parents=True, exist_ok=True)
    return path


def get_reports_dir() -> Path:
    """Directory served by the HTTP app: EDLCM_REPORTS_DIR, falling back to the output directory."""
    return Path(os.getenv("EDLCM_REPORTS_DIR") or os.getenv("EDLCM_OUTPUT_DIR") or "runs")


def atomic_write_bytes(path: Path, payload: bytes) -> Path:
    """Write to a temporary file next to ``path`` and rename it into place."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp_name, path)
    except Exception as e:
        logger.error(f"Error writing {path}: {e}")
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return path


def atomic_write_text(path: Path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


def dumps_json(payload: Any) -> str:
    """Deterministic JSON; non-finite numbers are rejected."""
    return json.dumps(payload, sort_keys=True, indent=2, allow_nan=False) + "\n"


def write_json(path: Path, payload: Any) -> Path:
    written = atomic_write_text(path, dumps_json(payload))
    logger.info(f"Wrote {written}")
    return written


def _check_cell(value: Any) -> Any:
    if isinstance(value, float) and not math.isfinite(value):
        raise ValueError(f"non-finite value {value} in table")
    return value


def write_csv(path: Path, header: Sequence[str], rows: Sequence[Sequence[Any]]) -> Path:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([_check_cell(v) for v in row])
    written = atomic_write_text(path, buffer.getvalue())
    logger.info(f"Wrote {written} ({len(rows)} rows)")
    return written


def _check_name(name: str) -> str:
    if not name or name != Path(name).name or name.startswith("."):
        raise ValueError(f"Invalid report name: {name!r}")
    if Path(name).suffix not in REPORT_SUFFIXES:
        raise ValueError(f"Unsupported report type: {name!r}")
    return name


def list_reports(directory: Path) -> List[ReportInfo]:
    """List JSON/CSV reports in a directory, sorted by name."""
    directory = Path(directory)
    if not directory.is_dir():
        return []
    reports = []
    for path in sorted(directory.iterdir()):
        kind = REPORT_SUFFIXES.get(path.suffix)
        if kind is None or path.name.startswith(".") or not path.is_file():
            continue
        reports.append(ReportInfo(name=path.name, kind=kind, size_bytes=path.stat().st_size))
    return reports


def read_report(directory: Path, name: str) -> Any:
    """
    Load one report.

    Returns:
        Parsed JSON for .json files, a list of row dictionaries for .csv files
    """
    path = Path(directory) / _check_name(name)
    if not path.is_file():
        raise FileNotFoundError(name)
    text = path.read_text(encoding="utf-8")
    if path.suffix == ".json":
        return json.loads(text)
    rows: List[Dict[str, str]] = list(csv.DictReader(io.StringIO(text)))
    return rows
