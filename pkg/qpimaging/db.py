import json
import os
import sqlite3
from pathlib import Path
from typing import Any, Dict, List, Optional

DEFAULT_DB_PATH = Path(__file__).parent / 'qpimaging.db'


def db_path() -> Path:
    """Ledger location; ``QPIMAGING_DB_PATH`` overrides the default (tests use it)."""
    return Path(os.environ.get('QPIMAGING_DB_PATH') or DEFAULT_DB_PATH)


def get_conn():
    """Return a new sqlite3 connection configured to return rows as dict-like objects.

    A fresh connection per call; runs are batch jobs writing a single row each.
    """
    conn = sqlite3.connect(str(db_path()))
    conn.row_factory = sqlite3.Row
    return conn


def init_db():
    """Ensure the database file and the Runs table exist. Idempotent."""
    db_path().parent.mkdir(parents=True, exist_ok=True)
    conn = get_conn()
    cur = conn.cursor()
    cur.execute('''
    CREATE TABLE IF NOT EXISTS Runs (
      run_id INTEGER PRIMARY KEY,
      command TEXT NOT NULL,
      manifest_hash TEXT NOT NULL,
      manifest TEXT NOT NULL,
      status TEXT NOT NULL,
      duration_ms INTEGER,
      warnings TEXT,
      created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP
    )
    ''')
    conn.commit()
    conn.close()


def save_run(
    command: str,
    manifest_hash: str,
    manifest: Dict[str, Any],
    status: str,
    duration_ms: Optional[int],
    warnings: Optional[List[str]] = None,
) -> int:
    """Persist a run row and return its run_id.

    Callers treat this as non-fatal: a run whose ledger write fails still
    keeps its CSV artifacts.
    """
    conn = get_conn()
    cur = conn.cursor()
    cur.execute(
        """
        INSERT INTO Runs (
            command, manifest_hash, manifest, status, duration_ms, warnings
        ) VALUES (?, ?, ?, ?, ?, ?)
        """,
        (
            command,
            manifest_hash,
            json.dumps(manifest, sort_keys=True),
            status,
            duration_ms,
            json.dumps(warnings or []),
        ),
    )
    run_id = cur.lastrowid
    conn.commit()
    conn.close()
    return run_id


def list_runs(command: Optional[str] = None) -> List[Dict[str, Any]]:
    """List run rows, newest first, optionally filtered by command.

    ``manifest`` and ``warnings`` are parsed back from JSON.
    """
    conn = get_conn()
    cur = conn.cursor()
    columns = "run_id, command, manifest_hash, manifest, status, duration_ms, warnings, created_at"
    if command:
        cur.execute(
            f"SELECT {columns} FROM Runs WHERE command = ? ORDER BY run_id DESC",
            (command,),
        )
    else:
        cur.execute(f"SELECT {columns} FROM Runs ORDER BY run_id DESC")
    rows = cur.fetchall()
    conn.close()
    out = []
    for r in rows:
        d = dict(r)
        try:
            d['manifest'] = json.loads(d.get('manifest') or '{}')
        except Exception:
            # tolerate corrupt JSON in the DB
            d['manifest'] = {}
        try:
            d['warnings'] = json.loads(d.get('warnings') or '[]')
        except Exception:
            d['warnings'] = []
        out.append(d)
    return out
