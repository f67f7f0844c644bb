"""CSV and JSON report writers.

Every CSV starts with ``# ba-lab <version> config_sha256=<hex>`` where the
hash covers the canonical JSON of the effective config minus output paths.
Floats are written with ``repr`` so a rerun produces identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from pathlib import Path

from .. import __version__

# keys that say where to write, not what to compute
_NON_SEMANTIC = ("out",)


def config_hash(config: dict) -> str:
    body = {k: v for k, v in config.items() if k not in _NON_SEMANTIC}
    canon = json.dumps(body, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _cell(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def render_csv(columns, rows, config: dict) -> str:
    buf = io.StringIO()
    buf.write(f"# ba-lab {__version__} config_sha256={config_hash(config)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} fields, header has {len(columns)}")
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def write_csv(path, columns, rows, config: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_csv(columns, rows, config), encoding="utf-8")
    return path


def write_json(path, command: str, config: dict, columns, rows, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "tool": "ba-lab",
        "version": __version__,
        "command": command,
        "config_sha256": config_hash(config),
        "config": config,
        "columns": list(columns),
        "rows": [dict(zip(columns, r)) for r in rows],
    }
    if extra:
        doc.update(extra)
    path.write_text(json.dumps(doc, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    return path


def read_csv(path) -> tuple[str, list[str], list[list[str]]]:
    """``(comment_line, header, rows)`` of a report CSV."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#"):
        raise ValueError(f"{path}: missing '#' header comment")
    rows = list(csv.reader(lines[1:]))
    return lines[0], rows[0], rows[1:]
