"""Metric tables, run manifests and golden-file comparison.

A table file is line-oriented TSV::

    # atlasground-table 1
    # name: general
    label	metric	mean	se	count	meta
    SOD	IOR	0.97999999999999998	0.0080876...	300	{"config_hash":"3f2a..."}

Floats carry 17 significant digits; an undefined metric (no samples) has
``null`` mean and se with count 0. ``meta`` is a compact JSON object.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from . import __version__
from .metrics import MetricEntry

TABLE_MAGIC = "# atlasground-table 1"
COLUMNS = ("label", "metric", "mean", "se", "count", "meta")


class ReportFormatError(ValueError):
    pass


@dataclass
class TableRow:
    label: str
    entries: dict[str, MetricEntry] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    def add(self, entry: MetricEntry, name: str | None = None) -> "TableRow":
        name = name or entry.name
        self.entries[name] = MetricEntry(name, entry.mean, entry.standard_error, entry.count)
        return self

    def __getitem__(self, metric: str) -> MetricEntry:
        return self.entries[metric]


@dataclass
class Table:
    name: str
    rows: list[TableRow] = field(default_factory=list)

    def row(self, label: str) -> TableRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(f"table {self.name!r} has no row {label!r}")

    def labels(self) -> list[str]:
        return [r.label for r in self.rows]


def _fmt(x: float | None) -> str:
    return "null" if x is None else format(x, ".17g")


def _parse(s: str) -> float | None:
    return None if s == "null" else float(s)


def table_to_text(table: Table) -> str:
    lines = [TABLE_MAGIC, f"# name: {table.name}", "\t".join(COLUMNS)]
    for row in table.rows:
        meta = json.dumps(row.meta, sort_keys=True, separators=(",", ":"))
        for e in row.entries.values():
            lines.append("\t".join([row.label, e.name, _fmt(e.mean), _fmt(e.standard_error), str(e.count), meta]))
    return "\n".join(lines) + "\n"


def write_table(table: Table, path: str | Path) -> Path:
    path = Path(path)
    path.write_text(table_to_text(table))
    return path


def read_table(path: str | Path) -> Table:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 3 or lines[0] != TABLE_MAGIC or not lines[1].startswith("# name: "):
        raise ReportFormatError(f"{path}: not a table file")
    if tuple(lines[2].split("\t")) != COLUMNS:
        raise ReportFormatError(f"{path}: unexpected header {lines[2]!r}")
    table = Table(lines[1][len("# name: ") :])
    for lineno, line in enumerate(lines[3:], 4):
        parts = line.split("\t")
        if len(parts) != len(COLUMNS):
            raise ReportFormatError(f"{path}:{lineno}: expected {len(COLUMNS)} fields, got {len(parts)}")
        label, metric, mean, se, count, meta = parts
        try:
            entry = MetricEntry(metric, _parse(mean), _parse(se), int(count))
            meta_d = json.loads(meta)
        except ValueError as exc:
            raise ReportFormatError(f"{path}:{lineno}: {exc}") from None
        if not table.rows or table.rows[-1].label != label:
            table.rows.append(TableRow(label, meta=meta_d))
        table.rows[-1].entries[metric] = entry
    return table


def table_differences(a: Table, b: Table, tol: float = 1e-9) -> list[str]:
    """Human-readable differences between two tables; floats compare within ``tol``."""
    diffs = []
    if a.name != b.name:
        diffs.append(f"name {a.name!r} != {b.name!r}")
    if a.labels() != b.labels():
        return diffs + [f"rows {a.labels()} != {b.labels()}"]
    for ra, rb in zip(a.rows, b.rows):
        if ra.meta != rb.meta:
            diffs.append(f"{ra.label}: meta differs")
        if list(ra.entries) != list(rb.entries):
            diffs.append(f"{ra.label}: metrics {list(ra.entries)} != {list(rb.entries)}")
            continue
        for name, ea in ra.entries.items():
            eb = rb.entries[name]
            if ea.count != eb.count:
                diffs.append(f"{ra.label}/{name}: count {ea.count} != {eb.count}")
            for field_name in ("mean", "standard_error"):
                x, y = getattr(ea, field_name), getattr(eb, field_name)
                if (x is None) != (y is None) or (x is not None and abs(x - y) > tol):
                    diffs.append(f"{ra.label}/{name}: {field_name} {x} != {y}")
    return diffs


def format_entry(e: MetricEntry, percent: bool = False) -> str:
    if not e.defined:
        return "n/a"
    scale = 100.0 if percent else 1.0
    return f"{e.mean * scale:.1f} ± {e.standard_error * scale:.1f}"


PERCENT_METRICS = ("IOR", "IGR")


def table_markdown(table: Table) -> str:
    metrics: list[str] = []
    for r in table.rows:
        metrics.extend(m for m in r.entries if m not in metrics)
    out = [f"### {table.name}", "", "| method | " + " | ".join(metrics) + " |", "|---" * (len(metrics) + 1) + "|"]
    for r in table.rows:
        cells = []
        for m in metrics:
            e = r.entries.get(m)
            pct = m.split("[")[0].split(":")[0] in PERCENT_METRICS or m.startswith("R@")
            cells.append(format_entry(e, pct) if e else "")
        out.append(f"| {r.label} | " + " | ".join(cells) + " |")
    return "\n".join(out) + "\n"


def write_summary(tables: Iterable[Table], path: str | Path, title: str = "Results") -> Path:
    parts = [f"# {title}", "", "IOR, IGR and Recall@K in percent; NVD and NVD-O in cm; ± is the standard error.", ""]
    parts.extend(table_markdown(t) for t in tables)
    Path(path).write_text("\n".join(parts))
    return Path(path)


# --- manifests --------------------------------------------------------------


def digest_path(path: str | Path) -> str:
    """SHA-256 over a file, or over a directory's sorted relative paths and contents."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_dir():
        for p in sorted(q for q in path.rglob("*") if q.is_file()):
            h.update(p.relative_to(path).as_posix().encode() + b"\0")
            h.update(p.read_bytes())
    else:
        h.update(path.read_bytes())
    return h.hexdigest()


def timestamp() -> str:
    """UTC time, pinned by ``SOURCE_DATE_EPOCH`` when set so reruns are byte-identical."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = int(epoch) if epoch is not None else time.time()
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(t))


@dataclass
class RunManifest:
    config_hash: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    tool_version: str = __version__

    @classmethod
    def start(cls, config_hash: str, seed: int, inputs: dict[str, str | Path] | None = None) -> "RunManifest":
        digests = {name: digest_path(p) for name, p in sorted((inputs or {}).items())}
        return cls(config_hash, seed, digests, started=timestamp())

    def write(self, path: str | Path) -> Path:
        if not self.finished:
            self.finished = timestamp()
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")
        return Path(path)


def config_digest(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:16]
