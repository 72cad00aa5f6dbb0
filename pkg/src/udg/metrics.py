"""Per-iteration training records and their CSV form."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from pathlib import Path

COLUMNS = ("iter", "loss_train", "loss_meta_test", "kl", "mean_sigma", "a", "b", "tau", "wall_ms")


@dataclass
class MetaStepReport:
    iteration: int
    loss_train: float
    loss_meta_test: float = float("nan")
    kl: float = float("nan")
    mean_sigma: float = float("nan")
    mean_mu: float = float("nan")
    a: float = float("nan")
    b: float = float("nan")
    tau: float = float("nan")
    adv_trajectory: list[float] = field(default_factory=list)
    wall_ms: float = 0.0

    def row(self) -> list[str]:
        def fmt(v: float) -> str:
            return "" if v != v else format(v, ".17g")

        return [
            str(self.iteration),
            fmt(self.loss_train),
            fmt(self.loss_meta_test),
            fmt(self.kl),
            fmt(self.mean_sigma),
            fmt(self.a),
            fmt(self.b),
            fmt(self.tau),
            format(self.wall_ms, ".3f"),
        ]


def metrics_csv(reports) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COLUMNS)
    for r in reports:
        writer.writerow(r.row())
    return buf.getvalue()


def write_metrics_csv(path, reports) -> None:
    Path(path).write_text(metrics_csv(reports), encoding="utf-8")


def read_metrics_csv(path) -> list[dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
