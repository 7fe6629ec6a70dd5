"""
SigTraj - Run Registry
SQLite bookkeeping untuk runs, loss per epoch, evaluasi, dan artefak
"""

import os
import sqlite3
from contextlib import contextmanager
from datetime import datetime

from settings import file_checksum


class RunStore:
    def __init__(self, db_path="sigtraj.db"):
        self.db_path = db_path
        directory = os.path.dirname(db_path)
        if directory:
            os.makedirs(directory, exist_ok=True)
        self.init_database()

    @contextmanager
    def get_connection(self):
        """Context manager untuk database connection"""
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        try:
            yield conn
            conn.commit()
        except Exception as e:
            conn.rollback()
            raise e
        finally:
            conn.close()

    def init_database(self):
        """Initialize database schema"""
        with self.get_connection() as conn:
            cursor = conn.cursor()

            # Table: runs
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS runs (
                    run_id TEXT PRIMARY KEY,
                    command TEXT NOT NULL,
                    config_json TEXT NOT NULL,
                    status TEXT DEFAULT 'running',
                    run_dir TEXT NOT NULL,
                    created_at TEXT NOT NULL,
                    finished_at TEXT
                )
            """)

            # Table: epochs
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS epochs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id TEXT NOT NULL,
                    epoch INTEGER NOT NULL,
                    gen_loss REAL,
                    disc_loss REAL,
                    train_ade REAL,
                    FOREIGN KEY (run_id) REFERENCES runs(run_id) ON DELETE CASCADE
                )
            """)

            # Table: evaluations
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS evaluations (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id TEXT NOT NULL,
                    split TEXT NOT NULL,
                    k INTEGER NOT NULL,
                    ade REAL,
                    fde REAL,
                    min_fde REAL,
                    n_agents INTEGER,
                    n_windows INTEGER,
                    FOREIGN KEY (run_id) REFERENCES runs(run_id) ON DELETE CASCADE
                )
            """)

            # Table: artifacts
            cursor.execute("""
                CREATE TABLE IF NOT EXISTS artifacts (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id TEXT NOT NULL,
                    kind TEXT NOT NULL,
                    path TEXT NOT NULL,
                    sha256 TEXT,
                    FOREIGN KEY (run_id) REFERENCES runs(run_id) ON DELETE CASCADE
                )
            """)

            cursor.execute("CREATE INDEX IF NOT EXISTS idx_epochs_run ON epochs(run_id)")
            cursor.execute("CREATE INDEX IF NOT EXISTS idx_artifacts_run ON artifacts(run_id)")

            conn.commit()

    # === RUN OPERATIONS ===

    def register_run(self, run_id, command, config_json, run_dir):
        """Daftarkan run baru (re-run dengan config sama menimpa status lama)"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("DELETE FROM epochs WHERE run_id = ?", (run_id,))
            cursor.execute("DELETE FROM evaluations WHERE run_id = ?", (run_id,))
            cursor.execute("DELETE FROM artifacts WHERE run_id = ?", (run_id,))
            cursor.execute("""
                INSERT OR REPLACE INTO runs (run_id, command, config_json, status, run_dir, created_at)
                VALUES (?, ?, ?, 'running', ?, ?)
            """, (run_id, command, config_json, run_dir, datetime.now().isoformat()))
            return run_id

    def finish_run(self, run_id, status="completed"):
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("""
                UPDATE runs SET status = ?, finished_at = ? WHERE run_id = ?
            """, (status, datetime.now().isoformat(), run_id))

    def log_epoch(self, run_id, epoch, gen_loss, disc_loss, train_ade):
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("""
                INSERT INTO epochs (run_id, epoch, gen_loss, disc_loss, train_ade)
                VALUES (?, ?, ?, ?, ?)
            """, (run_id, epoch, gen_loss, disc_loss, train_ade))

    def log_evaluation(self, run_id, split, report):
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("""
                INSERT INTO evaluations (run_id, split, k, ade, fde, min_fde, n_agents, n_windows)
                VALUES (?, ?, ?, ?, ?, ?, ?, ?)
            """, (run_id, split, report.k, report.ade, report.fde, report.min_fde,
                  report.n_agents, report.n_windows))

    def add_artifact(self, run_id, kind, path):
        """Catat artefak beserta SHA-256 checksum file"""
        checksum = file_checksum(path) if os.path.exists(path) else None
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("""
                INSERT INTO artifacts (run_id, kind, path, sha256) VALUES (?, ?, ?, ?)
            """, (run_id, kind, path, checksum))
        return checksum

    def get_run(self, run_id):
        """Get run information"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            cursor.execute("SELECT * FROM runs WHERE run_id = ?", (run_id,))
            row = cursor.fetchone()

            if row:
                run = dict(row)
                cursor.execute("SELECT epoch, gen_loss, disc_loss, train_ade FROM epochs WHERE run_id = ? ORDER BY epoch", (run_id,))
                run['epochs'] = [dict(r) for r in cursor.fetchall()]
                cursor.execute("SELECT * FROM evaluations WHERE run_id = ? ORDER BY id", (run_id,))
                run['evaluations'] = [dict(r) for r in cursor.fetchall()]
                cursor.execute("SELECT kind, path, sha256 FROM artifacts WHERE run_id = ? ORDER BY id", (run_id,))
                run['artifacts'] = [dict(r) for r in cursor.fetchall()]
                return run

            return None

    def list_runs(self, limit=50, command=None):
        """List runs, newest first"""
        with self.get_connection() as conn:
            cursor = conn.cursor()
            if command:
                cursor.execute("""
                    SELECT * FROM runs WHERE command = ? ORDER BY created_at DESC LIMIT ?
                """, (command, limit))
            else:
                cursor.execute("SELECT * FROM runs ORDER BY created_at DESC LIMIT ?", (limit,))
            return [dict(row) for row in cursor.fetchall()]

    # === STATISTICS ===

    def get_stats(self):
        """Get registry statistics"""
        with self.get_connection() as conn:
            cursor = conn.cursor()

            cursor.execute("SELECT COUNT(*) as count FROM runs")
            total_runs = cursor.fetchone()['count']

            cursor.execute("SELECT status, COUNT(*) as count FROM runs GROUP BY status")
            by_status = {row['status']: row['count'] for row in cursor.fetchall()}

            cursor.execute("SELECT COUNT(*) as count FROM artifacts")
            artifacts = cursor.fetchone()['count']

            cursor.execute("SELECT MIN(ade) as best_ade FROM evaluations WHERE split = 'test'")
            best_ade = cursor.fetchone()['best_ade']

            return {
                'total_runs': total_runs,
                'runs_by_status': by_status,
                'total_artifacts': artifacts,
                'best_test_ade': best_ade,
            }
