"""CSV tables with JSON sidecars, written atomically as one batch."""

from __future__ import annotations

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Sequence


def format_cell(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, float):
        if math.isnan(value):
            return "nan"
        return repr(value)
    return str(value)


def render_csv(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([format_cell(v) for v in row])
    return buf.getvalue()


def _jsonable(value):
    if isinstance(value, float) and (math.isnan(value) or math.isinf(value)):
        return str(value)
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, Path):
        return str(value)
    return value


class OutputBatch:
    """Collects output files in memory and commits them together.

    Nothing touches the output directory until :meth:`commit`, and each file
    is written to a temporary name and renamed into place.
    """

    def __init__(self, out_dir, echo: dict):
        self.out_dir = Path(out_dir)
        self.echo = echo
        self.files: dict[str, str] = {}

    def add_table(self, stem: str, header, rows, summary: dict | None = None):
        self.files[f"{stem}.csv"] = render_csv(header, rows)
        sidecar = {"table": f"{stem}.csv", "config": self.echo}
        if summary:
            sidecar["summary"] = summary
        self.files[f"{stem}.json"] = json.dumps(_jsonable(sidecar), indent=2, sort_keys=True) + "\n"

    def add_json(self, name: str, payload: dict):
        self.files[name] = json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n"

    def commit(self) -> list[Path]:
        self.out_dir.mkdir(parents=True, exist_ok=True)
        staged = []
        try:
            for name, text in self.files.items():
                fd, tmp = tempfile.mkstemp(prefix=f".{name}.", suffix=".tmp", dir=self.out_dir)
                staged.append((tmp, self.out_dir / name))
                try:
                    fh = os.fdopen(fd, "w", encoding="utf-8", newline="")
                except BaseException:
                    os.close(fd)
                    raise
                with fh:
                    fh.write(text)
        except BaseException:
            for tmp, _ in staged:
                os.unlink(tmp)
            raise
        for tmp, final in staged:
            os.replace(tmp, final)
        return [final for _, final in staged]
