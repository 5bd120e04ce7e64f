import os
import sqlite3

import pandas as pd
import psycopg2
from dotenv import load_dotenv

load_dotenv()

REPORT_COLUMNS = ["experiment", "variant", "mix", "fold", "seed_hash", "task", "metric", "value", "n"]


class ResultsDB:
    """Lignes de rapport des expériences (SQLite en local, PostgreSQL si DATABASE_URL est défini)."""

    def __init__(self, db_path=None):
        self.db_url = os.getenv("DATABASE_URL")
        self.is_postgres = bool(self.db_url) and db_path is None

        if not self.is_postgres:
            self.db_path = db_path or os.path.join(os.getenv("SFCRP_DATA_DIR", "data"), "results.db")
            folder = os.path.dirname(self.db_path)
            if folder and not os.path.exists(folder):
                os.makedirs(folder)

    def get_connection(self):
        if self.is_postgres:
            return psycopg2.connect(self.db_url)
        return sqlite3.connect(self.db_path)

    def get_placeholder(self):
        """%s pour Postgres et ? pour SQLite."""
        return "%s" if self.is_postgres else "?"

    def initialize_tables(self):
        auto_inc = "SERIAL PRIMARY KEY" if self.is_postgres else "INTEGER PRIMARY KEY AUTOINCREMENT"
        conn = self.get_connection()
        try:
            cursor = conn.cursor()
            cursor.execute(f'''
                CREATE TABLE IF NOT EXISTS report_rows (
                    id {auto_inc},
                    experiment TEXT,
                    variant TEXT,
                    mix TEXT,
                    fold TEXT,
                    seed_hash TEXT,
                    task TEXT,
                    metric TEXT,
                    value REAL,
                    n INTEGER
                )
            ''')
            conn.commit()
        finally:
            conn.close()

    def insert_rows(self, rows):
        """Ajoute des ReportRow ; les lignes existantes de la même (expérience, variante, mix, fold, graines) sont remplacées."""
        if not rows:
            return 0
        self.initialize_tables()
        ph = self.get_placeholder()
        cols = ", ".join(REPORT_COLUMNS)
        marks = ", ".join([ph] * len(REPORT_COLUMNS))
        conn = self.get_connection()
        try:
            cursor = conn.cursor()
            keys = {(r.experiment, r.variant, r.mix, str(r.fold), r.seed_hash) for r in rows}
            for key in keys:
                cursor.execute(
                    f"DELETE FROM report_rows WHERE experiment = {ph} AND variant = {ph} AND mix = {ph} AND fold = {ph} AND seed_hash = {ph}",
                    key,
                )
            for r in rows:
                cursor.execute(
                    f"INSERT INTO report_rows ({cols}) VALUES ({marks})",
                    (r.experiment, r.variant, r.mix, str(r.fold), r.seed_hash, r.task, r.metric, float(r.value), int(r.n)),
                )
            conn.commit()
        except Exception:
            conn.rollback()
            raise
        finally:
            conn.close()
        return len(rows)

    def fetch_rows(self, experiment=None):
        self.initialize_tables()
        conn = self.get_connection()
        query = f"SELECT {', '.join(REPORT_COLUMNS)} FROM report_rows"
        params = None
        if experiment is not None:
            query += f" WHERE experiment = {self.get_placeholder()}"
            params = (experiment,)
        try:
            df = pd.read_sql_query(query + " ORDER BY id ASC", conn, params=params)
        finally:
            conn.close()
        return df
