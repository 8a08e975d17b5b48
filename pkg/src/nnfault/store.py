"""Single-file SQLite store for experiments, metrics, fault traces and monitors.

Rows are append-only (enforced by triggers). The one exception is
``experiments.ended_at``, which may be set exactly once, from NULL, when an
experiment finishes. The schema version lives in ``PRAGMA user_version``.
See ``docs/schema.md`` for the column reference.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sqlite3
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import ForeignKeyViolation, SchemaVersionMismatch, StoreError
from .tensor import dumps, loads

SCHEMA_VERSION = 1
TABLES = ("experiments", "metrics", "fault_trace", "monitors")

_SCHEMA = """
CREATE TABLE experiments (
    experiment_id     TEXT PRIMARY KEY,
    kind              TEXT NOT NULL,
    config_hash       TEXT NOT NULL,
    config_json       TEXT NOT NULL,
    model_id          TEXT,
    dataset_id        TEXT,
    started_at        TEXT NOT NULL,
    ended_at          TEXT,
    version           TEXT NOT NULL,
    baseline_accuracy REAL
);

CREATE TABLE metrics (
    experiment_id TEXT NOT NULL REFERENCES experiments(experiment_id),
    rate          REAL,
    layer         TEXT NOT NULL,
    seed          INTEGER NOT NULL,
    accuracy      REAL CHECK (accuracy IS NULL OR (accuracy >= 0 AND accuracy <= 1)),
    fault_count   INTEGER NOT NULL,
    wall_time_s   REAL,
    error         TEXT,
    UNIQUE (experiment_id, rate, layer, seed)
);

CREATE TABLE fault_trace (
    experiment_id TEXT NOT NULL REFERENCES experiments(experiment_id),
    rate          REAL,
    layer         TEXT NOT NULL,
    seed          INTEGER,
    target        TEXT NOT NULL,
    site          TEXT NOT NULL,
    kind          TEXT NOT NULL,
    element_index INTEGER NOT NULL,
    bit_position  INTEGER NOT NULL
);
CREATE INDEX fault_trace_cell ON fault_trace (experiment_id, rate, layer, seed);

CREATE TABLE monitors (
    experiment_id TEXT NOT NULL REFERENCES experiments(experiment_id),
    layer         TEXT NOT NULL,
    target        TEXT NOT NULL,
    capture       TEXT NOT NULL,
    input_index   INTEGER NOT NULL,
    timestamp     REAL NOT NULL,
    payload       BLOB,
    min           REAL,
    max           REAL,
    mean          REAL,
    nan_count     INTEGER
);
CREATE INDEX monitors_experiment ON monitors (experiment_id, layer, input_index);

CREATE TRIGGER experiments_write_once BEFORE UPDATE ON experiments
WHEN OLD.ended_at IS NOT NULL
  OR NEW.experiment_id IS NOT OLD.experiment_id OR NEW.kind IS NOT OLD.kind
  OR NEW.config_hash IS NOT OLD.config_hash OR NEW.config_json IS NOT OLD.config_json
  OR NEW.model_id IS NOT OLD.model_id OR NEW.dataset_id IS NOT OLD.dataset_id
  OR NEW.started_at IS NOT OLD.started_at OR NEW.version IS NOT OLD.version
  OR NEW.baseline_accuracy IS NOT OLD.baseline_accuracy
BEGIN SELECT RAISE(ABORT, 'experiments are write-once'); END;
"""

_APPEND_ONLY = """
CREATE TRIGGER {t}_no_update BEFORE UPDATE ON {t} BEGIN SELECT RAISE(ABORT, '{t} is append-only'); END;
CREATE TRIGGER {t}_no_delete BEFORE DELETE ON {t} BEGIN SELECT RAISE(ABORT, '{t} is append-only'); END;
"""

METRIC_COLUMNS = ("experiment_id", "rate", "layer", "seed", "accuracy", "fault_count", "error")


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True, default=str).encode()).hexdigest()


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _fmt(value, column: str) -> str:
    if value is None:
        return ""
    if column == "accuracy":
        return format(value, ".6g")
    if isinstance(value, float):
        return repr(value)
    return str(value)


class Store:
    def __init__(self, path: str | Path):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.conn = sqlite3.connect(self.path)
        except (OSError, sqlite3.Error) as e:
            raise StoreError(f"cannot open store {self.path}: {e}") from e
        self.conn.execute("PRAGMA foreign_keys = ON")
        self._init_schema()

    def _init_schema(self) -> None:
        version = self.conn.execute("PRAGMA user_version").fetchone()[0]
        existing = {r[0] for r in self.conn.execute("SELECT name FROM sqlite_master WHERE type='table'")}
        if version == 0 and not existing:
            with self.conn:
                self.conn.executescript(
                    _SCHEMA
                    + "".join(_APPEND_ONLY.format(t=t) for t in TABLES[1:])
                    + "CREATE TRIGGER experiments_no_delete BEFORE DELETE ON experiments "
                    "BEGIN SELECT RAISE(ABORT, 'experiments is append-only'); END;"
                    + f"PRAGMA user_version = {SCHEMA_VERSION};"
                )
        elif version != SCHEMA_VERSION:
            self.conn.close()
            raise SchemaVersionMismatch(
                f"{self.path} has schema version {version}, this code expects {SCHEMA_VERSION}"
            )

    def close(self) -> None:
        self.conn.close()

    def __enter__(self) -> Store:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    # -- writes ----------------------------------------------------------------

    def _write(self, sql: str, rows) -> None:
        try:
            with self.conn:
                self.conn.executemany(sql, rows)
        except sqlite3.IntegrityError as e:
            if "FOREIGN KEY" in str(e):
                raise ForeignKeyViolation(str(e)) from e
            raise StoreError(str(e)) from e
        except sqlite3.Error as e:
            raise StoreError(str(e)) from e

    def new_experiment_id(self, base: str) -> str:
        """``base``, or ``base-2``, ``base-3``... if already taken."""
        eid, n = base, 1
        while self.conn.execute("SELECT 1 FROM experiments WHERE experiment_id = ?", (eid,)).fetchone():
            n += 1
            eid = f"{base}-{n}"
        return eid

    def record_experiment(self, experiment_id: str, kind: str, config: dict, model_id: str | None = None,
                          dataset_id: str | None = None, baseline_accuracy: float | None = None,
                          started_at: str | None = None) -> None:
        self._write(
            "INSERT INTO experiments (experiment_id, kind, config_hash, config_json, model_id, dataset_id,"
            " started_at, version, baseline_accuracy) VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
            [(experiment_id, kind, config_hash(config), json.dumps(config, sort_keys=True, default=str),
              model_id, dataset_id, started_at or _now(), f"nnfault-{__version__}", baseline_accuracy)],
        )

    def finish_experiment(self, experiment_id: str) -> None:
        try:
            with self.conn:
                cur = self.conn.execute(
                    "UPDATE experiments SET ended_at = ? WHERE experiment_id = ?", (_now(), experiment_id))
        except sqlite3.Error as e:
            raise StoreError(str(e)) from e
        if cur.rowcount != 1:
            raise StoreError(f"no experiment {experiment_id!r}")

    def record_metric(self, experiment_id: str, rate: float | None, layer: str, seed: int,
                      accuracy: float | None, fault_count: int, wall_time_s: float,
                      error: str | None = None) -> None:
        self._write(
            "INSERT INTO metrics VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
            [(experiment_id, rate, layer, seed, accuracy, fault_count, wall_time_s, error)],
        )

    def record_faults(self, experiment_id: str, rate: float | None, seed: int | None, trace) -> None:
        """Persist every row of a :class:`~nnfault.injector.FaultTrace` under one cell key."""
        self._write(
            "INSERT INTO fault_trace VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
            ((experiment_id, rate, layer, seed, target, site, kind, e, b)
             for layer, target, site, kind, e, b, _ in trace.rows()),
        )

    def record_cell(self, experiment_id: str, cell) -> None:
        """Metric row and fault trace of one sweep cell, in a single transaction."""
        rows = cell.trace.rows() if cell.trace is not None else ()
        try:
            with self.conn:
                self.conn.execute(
                    "INSERT INTO metrics VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
                    (experiment_id, cell.rate, cell.layer, cell.seed, cell.accuracy,
                     cell.fault_count, cell.wall_time_s, cell.error))
                self.conn.executemany(
                    "INSERT INTO fault_trace VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?)",
                    ((experiment_id, cell.rate, cell.layer, cell.seed, target, site, kind, e, b)
                     for _, target, site, kind, e, b, _ in rows))
        except sqlite3.IntegrityError as e:
            if "FOREIGN KEY" in str(e):
                raise ForeignKeyViolation(str(e)) from e
            raise StoreError(str(e)) from e

    def record_monitors(self, records) -> None:
        def row(r):
            s = r.summary or {}
            payload = dumps(r.tensor) if r.tensor is not None else None
            return (r.experiment_id, r.layer, r.target.value, r.capture.value, r.input_index,
                    r.timestamp, payload, s.get("min"), s.get("max"), s.get("mean"), s.get("nan_count"))

        self._write("INSERT INTO monitors VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)", (row(r) for r in records))

    def record_monitor(self, record) -> None:
        self.record_monitors([record])

    # -- reads -----------------------------------------------------------------

    def _dicts(self, sql: str, params=()) -> list[dict]:
        cur = self.conn.execute(sql, params)
        cols = [c[0] for c in cur.description]
        return [dict(zip(cols, r)) for r in cur.fetchall()]

    def experiments(self, kind: str | None = None) -> list[dict]:
        if kind is None:
            return self._dicts("SELECT * FROM experiments ORDER BY experiment_id")
        return self._dicts("SELECT * FROM experiments WHERE kind = ? ORDER BY experiment_id", (kind,))

    def experiment(self, experiment_id: str) -> dict:
        rows = self._dicts("SELECT * FROM experiments WHERE experiment_id = ?", (experiment_id,))
        if not rows:
            raise StoreError(f"no experiment {experiment_id!r}")
        return rows[0]

    def metrics(self, experiment_id: str | None = None) -> list[dict]:
        order = " ORDER BY experiment_id, rate, layer, seed"
        if experiment_id is None:
            return self._dicts("SELECT * FROM metrics" + order)
        return self._dicts("SELECT * FROM metrics WHERE experiment_id = ?" + order, (experiment_id,))

    def trace_counts(self, experiment_id: str) -> dict[tuple, int]:
        cur = self.conn.execute(
            "SELECT rate, layer, seed, COUNT(*) FROM fault_trace WHERE experiment_id = ?"
            " GROUP BY rate, layer, seed", (experiment_id,))
        return {(r, l, s): n for r, l, s, n in cur}

    def fault_trace(self, experiment_id: str) -> list[dict]:
        return self._dicts("SELECT * FROM fault_trace WHERE experiment_id = ? ORDER BY rowid", (experiment_id,))

    def monitors(self, experiment_id: str) -> list[dict]:
        rows = self._dicts("SELECT * FROM monitors WHERE experiment_id = ? ORDER BY rowid", (experiment_id,))
        for r in rows:
            r["tensor"] = loads(r.pop("payload")) if r["payload"] is not None else None
        return rows

    def count(self, table: str) -> int:
        if table not in TABLES:
            raise ValueError(f"unknown table {table!r}")
        return self.conn.execute(f"SELECT COUNT(*) FROM {table}").fetchone()[0]


def open_store(path: str | Path) -> Store:
    return Store(path)


def export_csv(store: Store, path: str | Path, experiment_id: str | None = None, kind: str | None = None,
               include_timing: bool = False) -> Path:
    """Write metric rows as RFC-4180 CSV ordered by (experiment_id, rate, layer, seed).

    Wall times are left out unless ``include_timing`` is set, so the default
    export of a deterministic run is byte-identical across runs.
    """
    cols = list(METRIC_COLUMNS)
    if include_timing:
        cols.insert(cols.index("error"), "wall_time_s")
    sql = "SELECT m.* FROM metrics m JOIN experiments e USING (experiment_id)"
    where, params = [], []
    if experiment_id is not None:
        where.append("m.experiment_id = ?")
        params.append(experiment_id)
    if kind is not None:
        where.append("e.kind = ?")
        params.append(kind)
    if where:
        sql += " WHERE " + " AND ".join(where)
    sql += " ORDER BY m.experiment_id, m.rate, m.layer, m.seed"
    rows = store._dicts(sql, params)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c], c) for c in cols])
    return path


def import_csv(store: Store, path: str | Path) -> int:
    """Load metric rows written by :func:`export_csv`; unknown experiments get stub records."""
    n = 0
    with open(path, newline="", encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            eid = r["experiment_id"]
            if not store.conn.execute("SELECT 1 FROM experiments WHERE experiment_id = ?", (eid,)).fetchone():
                store.record_experiment(eid, "imported", {"source": str(path)})
            store.record_metric(
                eid,
                float(r["rate"]) if r["rate"] else None,
                r["layer"],
                int(r["seed"]),
                float(r["accuracy"]) if r["accuracy"] else None,
                int(r["fault_count"]),
                float(r["wall_time_s"]) if r.get("wall_time_s") else None,
                r["error"] or None,
            )
            n += 1
    return n
