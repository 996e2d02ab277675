"""Per-iteration metrics rows and their CSV form."""
import csv
import os
from dataclasses import dataclass, field

SCHEMA_VERSION = 1
COLUMNS = ("iteration", "epoch", "wall_ms", "train_loss", "eval_loss", "eval_accuracy",
           "sigma_global", "sigma_per_module", "grad_norm", "activation_floats", "step_size")
NUMERIC_COLUMNS = tuple(c for c in COLUMNS if c != "wall_ms")


@dataclass
class MetricsRecord:
    iteration: int
    epoch: int
    wall_ms: float
    train_loss: float
    step_size: float
    activation_floats: int
    eval_loss: float | None = None
    eval_accuracy: float | None = None
    sigma_global: float | None = None
    sigma_per_module: list = field(default_factory=list)
    grad_norm: float | None = None

    def as_row(self):
        def fmt(v):
            # repr round-trips floats exactly
            return "" if v is None else repr(v) if isinstance(v, float) else str(v)

        row = {c: fmt(getattr(self, c)) for c in COLUMNS if c != "sigma_per_module"}
        row["sigma_per_module"] = ";".join(fmt(s) for s in self.sigma_per_module)
        return row


class MetricsWriter:
    """Append-only CSV writer; every row is flushed so a crash loses at most one row."""

    def __init__(self, path, append=False):
        exists = append and os.path.exists(path) and os.path.getsize(path) > 0
        self._f = open(path, "a" if exists else "w", newline="", encoding="utf-8")
        self._w = csv.DictWriter(self._f, fieldnames=COLUMNS)
        if not exists:
            self._w.writeheader()
            self._f.flush()

    def write(self, record):
        self._w.writerow(record.as_row())
        self._f.flush()

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path):
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != COLUMNS:
            raise ValueError(f"{path}: unexpected metrics header {reader.fieldnames}")
        rows = []
        for row in reader:
            row["iteration"] = int(row["iteration"])
            row["epoch"] = int(row["epoch"])
            rows.append(row)
        return rows


def numeric_content(rows):
    """Rows with wall-clock columns removed, for determinism comparisons."""
    return [tuple(r[c] for c in NUMERIC_COLUMNS) for r in rows]
