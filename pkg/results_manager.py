"""
Results Manager
Handles the SQLite run registry and atomic writing of solver artifacts.
"""

import hashlib
import json
import logging
import math
import os
import platform
import sqlite3
import struct
import tempfile
import uuid
from datetime import datetime, timezone
from importlib import metadata
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from solvers.kernel_calculus import json_number
from solvers.solver_config import CSV_FLOAT_FORMAT

logger = logging.getLogger(__name__)

TRACKED_PACKAGES = ('numpy', 'scipy', 'pandas', 'scikit-learn', 'python-dotenv')


def sanitize(value):
    """Make solver output JSON-safe: arrays to lists, infinities and NaN to strings."""
    if isinstance(value, dict):
        return {str(k): sanitize(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [sanitize(v) for v in value]
    if isinstance(value, np.ndarray):
        return sanitize(value.tolist())
    if isinstance(value, (bool, np.bool_)):
        return bool(value)
    if isinstance(value, (int, np.integer)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        if math.isnan(value):
            return 'nan'
        return json_number(float(value))
    return value


def _atomic_write(path: Path, write: Callable, binary: bool = False) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle = tempfile.NamedTemporaryFile('wb' if binary else 'w', dir=path.parent, prefix=f".{path.name}.",
                                         delete=False, **({} if binary else {'encoding': 'utf-8', 'newline': ''}))
    try:
        with handle:
            write(handle)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(handle.name, path)
    except Exception as e:
        logger.error(f"Failed to write {path}: {e}")
        Path(handle.name).unlink(missing_ok=True)
        raise
    return path


def write_json(path, data: Dict) -> Path:
    return _atomic_write(path, lambda f: json.dump(sanitize(data), f, indent=2, sort_keys=True))


def write_csv(path, frame: pd.DataFrame) -> Path:
    return _atomic_write(path, lambda f: frame.to_csv(f, index=False, float_format=CSV_FLOAT_FORMAT,
                                                      lineterminator='\n'))


def write_grid(path, values: np.ndarray, meta: Optional[Dict] = None) -> Path:
    """Little-endian u64 header length, JSON header, row-major float64 payload."""
    array = np.ascontiguousarray(values, dtype='<f8')
    header = json.dumps(sanitize({'shape': list(array.shape), 'dtype': '<f8', 'order': 'C', **(meta or {})}),
                        sort_keys=True).encode('utf-8')

    def write(f):
        f.write(struct.pack('<Q', len(header)))
        f.write(header)
        f.write(array.tobytes(order='C'))

    return _atomic_write(path, write, binary=True)


def read_grid(path) -> Tuple[np.ndarray, Dict]:
    with open(path, 'rb') as f:
        (length,) = struct.unpack('<Q', f.read(8))
        header = json.loads(f.read(length).decode('utf-8'))
        payload = f.read()
    return np.frombuffer(payload, dtype='<f8').reshape(header['shape']).copy(), header


def config_hash(config: Dict) -> str:
    return hashlib.sha256(json.dumps(sanitize(config), sort_keys=True).encode('utf-8')).hexdigest()


def package_versions() -> Dict[str, str]:
    versions = {'python': platform.python_version()}
    for name in TRACKED_PACKAGES:
        try:
            versions[name] = metadata.version(name)
        except metadata.PackageNotFoundError:
            versions[name] = 'unknown'
    return versions


def write_manifest(out_dir, command: str, config: Dict, seed: int, grid: Dict, ensemble: Dict,
                   threads: int, outputs: List[str]) -> Path:
    """Everything needed to re-run the job that produced out_dir."""
    manifest = {
        'command': command,
        'config': config,
        'config_sha256': config_hash(config),
        'seed': seed,
        'grid': grid,
        'ensemble': ensemble,
        'threads': threads,
        'versions': package_versions(),
        'outputs': sorted(outputs),
    }
    return write_json(Path(out_dir) / 'manifest.json', manifest)


class RunRegistry:
    """SQLite log of solver runs."""

    def __init__(self, db_path: str = None):
        """Initialize the registry."""
        if db_path is None:
            db_path = os.getenv('VOLTERRA_RUNS_DB')
        if db_path is None:
            Path("data").mkdir(exist_ok=True)
            db_path = "data/runs.db"
        else:
            Path(db_path).parent.mkdir(parents=True, exist_ok=True)
        self.db_path = db_path
        self.init_database()

    def init_database(self):
        """Create the runs table if it doesn't exist."""
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute('''
                    CREATE TABLE IF NOT EXISTS runs (
                        run_id TEXT PRIMARY KEY,
                        command TEXT NOT NULL,
                        config_hash TEXT NOT NULL,
                        seed INTEGER,
                        status TEXT DEFAULT 'running',
                        out_dir TEXT,
                        summary TEXT,
                        created_at TIMESTAMP DEFAULT CURRENT_TIMESTAMP,
                        finished_at TIMESTAMP
                    )
                ''')
                conn.commit()
                logger.debug(f"Run registry ready at {self.db_path}")
        except Exception as e:
            logger.error(f"Failed to initialize run registry: {e}")

    def start_run(self, command: str, config: Dict, seed: int, out_dir: str) -> Optional[str]:
        """Register a new run and return its id."""
        run_id = uuid.uuid4().hex
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute('''
                    INSERT INTO runs (run_id, command, config_hash, seed, out_dir, created_at)
                    VALUES (?, ?, ?, ?, ?, ?)
                ''', (run_id, command, config_hash(config), seed, str(out_dir), datetime.now(timezone.utc).isoformat()))
                conn.commit()
                logger.info(f"Started run {run_id} ({command})")
                return run_id
        except Exception as e:
            logger.error(f"Failed to register run: {e}")
            return None

    def finish_run(self, run_id: Optional[str], status: str, summary: Optional[Dict] = None) -> bool:
        if run_id is None:
            return False
        try:
            with sqlite3.connect(self.db_path) as conn:
                cursor = conn.cursor()
                cursor.execute('''
                    UPDATE runs SET status = ?, summary = ?, finished_at = ? WHERE run_id = ?
                ''', (status, json.dumps(sanitize(summary or {}), sort_keys=True),
                      datetime.now(timezone.utc).isoformat(), run_id))
                conn.commit()
                return cursor.rowcount == 1
        except Exception as e:
            logger.error(f"Failed to finish run {run_id}: {e}")
            return False

    def get_run(self, run_id: str) -> Optional[Dict]:
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.row_factory = sqlite3.Row
                cursor = conn.cursor()
                cursor.execute('SELECT * FROM runs WHERE run_id = ?', (run_id,))
                row = cursor.fetchone()
                if not row:
                    return None
                run = dict(row)
                run['summary'] = json.loads(run['summary']) if run['summary'] else {}
                return run
        except Exception as e:
            logger.error(f"Failed to get run {run_id}: {e}")
            return None

    def list_runs(self, command: Optional[str] = None, limit: int = 50) -> List[Dict]:
        """Most recent runs first."""
        try:
            with sqlite3.connect(self.db_path) as conn:
                conn.row_factory = sqlite3.Row
                cursor = conn.cursor()
                if command:
                    cursor.execute('SELECT * FROM runs WHERE command = ? ORDER BY created_at DESC LIMIT ?',
                                   (command, limit))
                else:
                    cursor.execute('SELECT * FROM runs ORDER BY created_at DESC LIMIT ?', (limit,))
                return [dict(row) for row in cursor.fetchall()]
        except Exception as e:
            logger.error(f"Failed to list runs: {e}")
            return []
