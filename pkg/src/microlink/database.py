from datetime import datetime

import duckdb
import numpy as np

from microlink.logger import logger
from microlink.models import RunSummary
from microlink.surrogate import SampleSet


class Database:
    """A wrapper for the DuckDB database."""

    def __init__(self, db_file: str | None = None):
        """Initialize the database connection."""
        self.db_file = db_file if db_file is not None else "./microlink.duckdb"
        self.con = duckdb.connect(self.db_file)
        self.init_db()

    def close(self):
        """Close the database connection."""
        self.con.close()

    def init_db(self):
        """Initialize the database tables."""
        self.con.execute("""
            CREATE TABLE IF NOT EXISTS samples (
                scenario VARCHAR,
                mg INTEGER,
                step INTEGER,
                iteration INTEGER,
                phase VARCHAR,
                chi DOUBLE[],
                zbar DOUBLE[]
            )
        """)
        self.con.execute("""
            CREATE TABLE IF NOT EXISTS runs (
                run_id VARCHAR PRIMARY KEY,
                solver VARCHAR,
                total_cost DOUBLE,
                mean_runtime_ms DOUBLE,
                transmissions BIGINT,
                steps INTEGER,
                config_hash VARCHAR,
                created_at TIMESTAMP
            )
        """)

    def save_samples(self, samples: SampleSet) -> None:
        """Append a set of lower-level samples."""
        rows = [
            (
                samples.scenario,
                samples.mg,
                int(samples.steps[m]),
                int(samples.iterations[m]),
                samples.phases[m] if samples.phases else "loop",
                samples.chi[m].tolist(),
                samples.zbar[m].tolist(),
            )
            for m in range(len(samples))
        ]
        self.con.executemany("INSERT INTO samples VALUES (?, ?, ?, ?, ?, ?, ?)", rows)
        logger.info(f"Saved {len(rows)} samples of microgrid {samples.mg} to `samples`.")

    def get_samples(self, scenario: str, mg: int) -> SampleSet | None:
        """Samples of one microgrid in insertion order, or None if there are none."""
        res = self.con.execute(
            """
            SELECT step, iteration, phase, chi, zbar
            FROM samples
            WHERE scenario = ? AND mg = ?
            ORDER BY step, iteration
        """,
            (scenario, mg),
        ).fetchall()
        if not res:
            return None
        return SampleSet(
            chi=np.array([r[3] for r in res], dtype=float),
            zbar=np.array([r[4] for r in res], dtype=float),
            steps=np.array([r[0] for r in res], dtype=int),
            iterations=np.array([r[1] for r in res], dtype=int),
            scenario=scenario,
            mg=mg,
            phases=[r[2] for r in res],
        )

    def count_samples(self, scenario: str | None = None) -> int:
        """Number of stored samples, optionally of one scenario."""
        if scenario is None:
            return self.con.execute("SELECT COUNT(*) FROM samples").fetchall()[0][0]
        return self.con.execute("SELECT COUNT(*) FROM samples WHERE scenario = ?", (scenario,)).fetchall()[0][0]

    def truncate_samples(self, scenario: str | None = None):
        """Delete stored samples, optionally only those of one scenario."""
        if scenario is None:
            self.con.execute("TRUNCATE TABLE samples")
        else:
            self.con.execute("DELETE FROM samples WHERE scenario = ?", (scenario,))

    def save_run(self, run: RunSummary):
        """Save or replace the summary of a closed-loop run."""
        self.con.execute(
            """
            INSERT OR REPLACE INTO runs VALUES (?, ?, ?, ?, ?, ?, ?, ?)
        """,
            (
                run.run_id,
                run.solver,
                run.total_cost,
                run.mean_runtime_ms,
                run.transmissions,
                run.steps,
                run.config_hash,
                run.created_at or datetime.now(),
            ),
        )

    def get_runs(self, config_hash: str | None = None) -> list[RunSummary]:
        """Stored run summaries, oldest first."""
        query = "SELECT * FROM runs"
        params: tuple = ()
        if config_hash is not None:
            query += " WHERE config_hash = ?"
            params = (config_hash,)
        res = self.con.execute(query + " ORDER BY created_at, run_id", params).fetchall()
        return [
            RunSummary(
                run_id=r[0],
                solver=r[1],
                total_cost=r[2],
                mean_runtime_ms=r[3],
                transmissions=r[4],
                steps=r[5],
                config_hash=r[6],
                created_at=r[7],
            )
            for r in res
        ]

    def truncate_runs(self):
        """Truncate the runs table."""
        self.con.execute("TRUNCATE TABLE runs")
