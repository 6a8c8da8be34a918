"""Metamodel comparison over training-set sizes on a shared test set."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from ..sampling import Dataset, split_normalize
from .metrics import max_rel_error, q2

logger = logging.getLogger(__name__)

COLUMNS = ("emulator", "train_size", "output", "q2", "max_rel_error", "status")


@dataclass
class ReportRow:
    emulator: str
    train_size: int
    output: str
    q2: float
    max_rel_error: float
    status: str = "ok"


@dataclass
class Report:
    rows: list = field(default_factory=list)
    test_size: int = 0

    def select(self, emulator=None, train_size=None, output=None) -> list:
        return [r for r in self.rows if (emulator is None or r.emulator == emulator)
                and (train_size is None or r.train_size == train_size) and (output is None or r.output == output)]

    def summary(self) -> list[dict]:
        """Min and mean Q2 across outputs for each (emulator, size)."""
        keys = []
        for r in self.rows:
            if (r.emulator, r.train_size) not in keys:
                keys.append((r.emulator, r.train_size))
        out = []
        for em, n in keys:
            vals = np.array([r.q2 for r in self.select(em, n)], dtype=float)
            ok = vals[np.isfinite(vals)]
            out.append({"emulator": em, "train_size": n, "q2_min": float(ok.min()) if ok.size else float("nan"),
                        "q2_mean": float(ok.mean()) if ok.size else float("nan")})
        return out

    def write(self, out_dir) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "report.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(COLUMNS) + "\n")
            for r in self.rows:
                fh.write(f"{r.emulator},{r.train_size},{r.output},{r.q2:.17g},{r.max_rel_error:.17g},{r.status}\n")
        with open(out / "summary.csv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("emulator,train_size,q2_min,q2_mean\n")
            for s in self.summary():
                fh.write(f"{s['emulator']},{s['train_size']},{s['q2_min']:.17g},{s['q2_mean']:.17g}\n")
        plots = out / "plot-data"
        plots.mkdir(exist_ok=True)
        emulators = list(dict.fromkeys(r.emulator for r in self.rows))
        sizes = sorted({r.train_size for r in self.rows})
        outputs = list(dict.fromkeys(r.output for r in self.rows))
        for metric in ("q2", "max_rel_error"):
            for o in outputs:
                with open(plots / f"{metric}__{_safe(o)}.csv", "w", encoding="utf-8", newline="\n") as fh:
                    fh.write("train_size," + ",".join(emulators) + "\n")
                    for n in sizes:
                        vals = []
                        for em in emulators:
                            hit = self.select(em, n, o)
                            vals.append(f"{getattr(hit[0], metric):.17g}" if hit else "nan")
                        fh.write(f"{n}," + ",".join(vals) + "\n")
        return out


def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", name)


def compare_report(dataset: Dataset, emulators: Mapping[str, object], training_sizes: Sequence[int],
                   test_fraction: float = 0.2, seed: int = 0, out_dir=None) -> Report:
    """Train every emulator on nested prefixes of one shuffled training split.

    ``emulators`` maps a label to an unfitted estimator (cloned per size) or
    a zero-argument factory.  A failure to train is recorded per row.
    """
    from sklearn.base import clone

    split = split_normalize(dataset, test_fraction, seed)
    train, test = split.train, split.test
    report = Report(test_size=test.n)
    names = dataset.output_names
    for label, proto in emulators.items():
        for n in training_sizes:
            if n > train.n:
                for o in names:
                    report.rows.append(ReportRow(label, int(n), o, float("nan"), float("nan"), "skipped: too few rows"))
                continue
            try:
                est = proto() if callable(proto) and not hasattr(proto, "fit") else clone(proto)
                est.fit(train.inputs[:n], train.outputs[:n], dataset.input_names, names)
                pred = np.asarray(est.predict(test.inputs), dtype=float).reshape(test.n, -1)
                qs = q2(test.outputs, pred)
                mre = max_rel_error(test.outputs, pred)
                for k, o in enumerate(names):
                    report.rows.append(ReportRow(label, int(n), o, float(qs[k]), float(mre[k])))
            except Exception as exc:  # reported per row, the comparison continues
                logger.warning("%s at n=%d failed: %s", label, n, exc)
                msg = f"failed: {type(exc).__name__}: {exc}".replace(",", ";").replace("\n", " ")
                for o in names:
                    report.rows.append(ReportRow(label, int(n), o, float("nan"), float("nan"), msg))
    if out_dir is not None:
        report.write(out_dir)
    return report
