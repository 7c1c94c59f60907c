"""CSV with a units comment line ahead of the header; ``#`` lines are comments."""

from __future__ import annotations

import csv
import io
from pathlib import Path
from typing import Iterable, Sequence


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_csv(header: Sequence[str], units: Sequence[str], rows: Iterable[Sequence],
               trailer: Sequence[str] = ()) -> str:
    buf = io.StringIO()
    buf.write("# units: " + ",".join(units) + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    for line in trailer:
        buf.write("# " + line + "\n")
    return buf.getvalue()


def write_csv(path, header, units, rows, trailer=()) -> None:
    Path(path).write_text(format_csv(header, units, rows, trailer))


def read_csv(path) -> tuple[list[str], list[dict]]:
    """Return ``(comments, rows)``; comment lines keep their text without ``#``."""
    comments, body = [], []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            comments.append(line[1:].strip())
        elif line.strip():
            body.append(line)
    return comments, list(csv.DictReader(body))
