import sqlite3
import json
import logging
from datetime import datetime
from functools import wraps
from typing import Any, Dict, List, Optional
from dataclasses import asdict, dataclass

from errors import StoreError

logger = logging.getLogger(__name__)


def safe_db_operation(operation):
    @wraps(operation)
    def wrapper(*args, **kwargs):
        try:
            return operation(*args, **kwargs)
        except sqlite3.Error as e:
            logger.error(f"Database error in {operation.__name__}: {e}")
            raise StoreError(f"Database error: {str(e)}") from e
    return wrapper


@dataclass
class RunRecord:
    """One command invocation."""
    id: int
    command: str
    config_hash: str
    seed: int
    status: str
    wall_time_s: float
    artifacts: Dict[str, str]
    created_at: Optional[str] = None
    message: Optional[str] = None

    @classmethod
    def from_db_row(cls, row: tuple) -> 'RunRecord':
        return cls(
            id=row[0],
            command=row[1],
            config_hash=row[2],
            seed=row[3],
            status=row[4],
            wall_time_s=row[5],
            artifacts=json.loads(row[6] or "{}"),
            created_at=row[7],
            message=row[8]
        )


@dataclass
class CheckRecordRow:
    """One drift check persisted by the monitor command."""
    run_id: int
    check_time_s: float
    windowed_mae: float
    threshold: float
    drift_flag: bool
    adapted: bool
    ks_statistic: Optional[float] = None

    @classmethod
    def from_db_row(cls, row: tuple) -> 'CheckRecordRow':
        return cls(
            run_id=row[1],
            check_time_s=row[2],
            windowed_mae=row[3],
            threshold=row[4],
            drift_flag=bool(row[5]),
            adapted=bool(row[6]),
            ks_statistic=row[7]
        )


class RunStore:
    def __init__(self, db_path: str = 'runs.db'):
        self.db_path = db_path
        self.init_db()

    @safe_db_operation
    def init_db(self):
        with sqlite3.connect(self.db_path) as conn:
            c = conn.cursor()
            c.execute('''CREATE TABLE IF NOT EXISTS runs
                        (id INTEGER PRIMARY KEY AUTOINCREMENT,
                         command TEXT NOT NULL,
                         config_hash TEXT NOT NULL,
                         seed INTEGER NOT NULL,
                         status TEXT NOT NULL,
                         wall_time_s REAL,
                         artifacts TEXT,
                         created_at TIMESTAMP,
                         message TEXT)''')
            c.execute('''CREATE TABLE IF NOT EXISTS checks
                        (id INTEGER PRIMARY KEY AUTOINCREMENT,
                         run_id INTEGER NOT NULL REFERENCES runs(id),
                         check_time_s REAL NOT NULL,
                         windowed_mae REAL NOT NULL,
                         threshold REAL NOT NULL,
                         drift_flag INTEGER NOT NULL,
                         adapted INTEGER NOT NULL,
                         ks_statistic REAL)''')
            conn.commit()

    @safe_db_operation
    def record_run(self, command: str, config_hash: str, seed: int, status: str, wall_time_s: float,
                   artifacts: Optional[Dict[str, str]] = None, message: Optional[str] = None) -> int:
        """
        Save a run to the registry.

        Returns:
            The new run id
        """
        with sqlite3.connect(self.db_path) as conn:
            c = conn.cursor()
            c.execute('''INSERT INTO runs
                        (command, config_hash, seed, status, wall_time_s, artifacts, created_at, message)
                        VALUES (?, ?, ?, ?, ?, ?, ?, ?)''',
                      (command, config_hash, seed, status, wall_time_s,
                       json.dumps(artifacts or {}, sort_keys=True),
                       datetime.now().isoformat(timespec="seconds"), message))
            conn.commit()
            return c.lastrowid

    @safe_db_operation
    def record_checks(self, run_id: int, checks: List[Any]) -> int:
        """Persist drift-monitor check records (anything with the CheckRecord fields)."""
        with sqlite3.connect(self.db_path) as conn:
            c = conn.cursor()
            c.executemany('''INSERT INTO checks
                            (run_id, check_time_s, windowed_mae, threshold, drift_flag, adapted, ks_statistic)
                            VALUES (?, ?, ?, ?, ?, ?, ?)''',
                          [(run_id, r.check_time_s, r.windowed_mae, r.threshold, int(r.drift_flag),
                            int(r.adapted), r.ks_statistic) for r in checks])
            conn.commit()
            return len(checks)

    @safe_db_operation
    def get_runs(self, command: Optional[str] = None) -> List[RunRecord]:
        with sqlite3.connect(self.db_path) as conn:
            c = conn.cursor()
            if command:
                c.execute('SELECT * FROM runs WHERE command = ? ORDER BY id', (command,))
            else:
                c.execute('SELECT * FROM runs ORDER BY id')
            return [RunRecord.from_db_row(row) for row in c.fetchall()]

    @safe_db_operation
    def get_run_by_id(self, run_id: int) -> Optional[RunRecord]:
        with sqlite3.connect(self.db_path) as conn:
            c = conn.cursor()
            c.execute('SELECT * FROM runs WHERE id = ?', (run_id,))
            row = c.fetchone()
            return RunRecord.from_db_row(row) if row else None

    @safe_db_operation
    def get_checks(self, run_id: int) -> List[CheckRecordRow]:
        with sqlite3.connect(self.db_path) as conn:
            c = conn.cursor()
            c.execute('SELECT * FROM checks WHERE run_id = ? ORDER BY check_time_s', (run_id,))
            return [CheckRecordRow.from_db_row(row) for row in c.fetchall()]

    def export_runs(self, format: str = 'json', command: Optional[str] = None) -> str:
        if format != 'json':
            raise StoreError(f"Unsupported export format: {format}")
        return json.dumps([asdict(run) for run in self.get_runs(command)], indent=2)
