"""Minimal CSV writer/reader: LF endings, no quoting, 17 significant digits."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


def fmt(value) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    s = str(value)
    if any(c in s for c in ",\n\r\""):
        raise ValueError(f"field {s!r} would need quoting")
    return s


def dumps(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    lines = [",".join(header)]
    for row in rows:
        if len(row) != len(header):
            raise ValueError(f"row has {len(row)} fields, header has {len(header)}")
        lines.append(",".join(fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def write(path: str | Path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps(header, rows))
    return path


def _parse(field: str):
    try:
        return int(field)
    except ValueError:
        pass
    try:
        return float(field)
    except ValueError:
        return field


def loads(text: str) -> tuple[list[str], list[list]]:
    lines = text.rstrip("\n").split("\n")
    header = lines[0].split(",")
    return header, [[_parse(f) for f in line.split(",")] for line in lines[1:] if line]


def read(path: str | Path) -> tuple[list[str], list[list]]:
    return loads(Path(path).read_text(encoding="utf-8"))


def read_dicts(path: str | Path) -> list[dict]:
    header, rows = read(path)
    return [dict(zip(header, r)) for r in rows]
