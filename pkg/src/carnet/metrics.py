"""Metrics rows and the fixed-header CSV they are written to."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

METRICS_VERSION = 1
HEADER = ("run_id", "phase", "step", "loss_total", "loss_recon", "loss_pred", "loss_latent",
          "loss_sensor", "accuracy", "reward_mean", "reward_std", "wallclock_s")


@dataclass
class MetricsRow:
    run_id: str
    phase: str
    step: int
    loss_total: float | None = None
    loss_recon: float | None = None
    loss_pred: float | None = None
    loss_latent: float | None = None
    loss_sensor: float | None = None
    accuracy: float | None = None
    reward_mean: float | None = None
    reward_std: float | None = None
    wallclock_s: float | None = None

    def cells(self) -> list[str]:
        return [_cell(getattr(self, f.name)) for f in fields(self)]

    def as_dict(self) -> dict:
        return asdict(self)


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(float(v))
    return str(v)


def _parse(name: str, text: str):
    if text == "":
        return None
    if name in ("run_id", "phase"):
        return text
    if name == "step":
        return int(text)
    return float(text)


def format_rows(rows: list[MetricsRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(HEADER)
    for r in rows:
        w.writerow(r.cells())
    return buf.getvalue()


def write_metrics(path: str | Path, rows: list[MetricsRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(format_rows(rows).encode("utf-8"))
    return path


def read_metrics(path: str | Path) -> list[MetricsRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != HEADER:
            raise ValueError(f"{path}: unexpected metrics header {header}")
        return [MetricsRow(**{k: _parse(k, v) for k, v in zip(HEADER, row)}) for row in reader]


class MetricsLog:
    """Accumulates rows in memory; optionally mirrors them to a CSV after each append."""

    def __init__(self, run_id: str, path: str | Path | None = None, clock=None):
        self.run_id = run_id
        self.rows: list[MetricsRow] = []
        self.path = Path(path) if path is not None else None
        self._clock = clock
        self._t0 = clock() if clock else None

    def log(self, phase: str, step: int, **values) -> MetricsRow:
        unknown = set(values) - set(HEADER)
        if unknown:
            raise KeyError(f"unknown metrics fields {sorted(unknown)}")
        if self._clock is not None:
            values.setdefault("wallclock_s", round(self._clock() - self._t0, 3))
        row = MetricsRow(self.run_id, phase, int(step),
                         **{k: (None if v is None else float(v)) for k, v in values.items()})
        self.rows.append(row)
        if self.path is not None:
            write_metrics(self.path, self.rows)
        return row

    def phase(self, name: str) -> list[MetricsRow]:
        return [r for r in self.rows if r.phase == name]
