"""Run logs, sweep results, and the CSV interchange format.

Every CSV starts with a `# manifest=<hash>` comment so downstream plotting can
refuse to mix runs; the column set for metric CSVs is fixed, and training logs
append loss_task / loss_complexity / lambda columns to the same schema.
"""

import csv
import io
from dataclasses import dataclass, field

METRIC_COLUMNS = ["run_id", "epoch", "layer_id", "metric", "estimator",
                  "value_nats"]
TRAINLOG_COLUMNS = METRIC_COLUMNS + ["loss_task", "loss_complexity", "lambda"]

PER_LAYER_METRICS = ("H", "I_XS", "I_XSY", "TC", "TC_Y", "C_l", "C_lY")
JOINT_METRICS = ("prefix_H", "suffix_H")
SCALAR_METRICS = ("train_loss", "test_loss", "gap")


@dataclass
class RunLog:
    run_id: str
    seed: int
    records: list = field(default_factory=list)   # per-epoch dicts
    config_hash: str = ""
    lam: float = 0.0
    extras: dict = field(default_factory=dict)    # e.g. trained EBMs, indices

    def final(self):
        return self.records[-1]

    def epochs(self):
        return [r["epoch"] for r in self.records]


@dataclass
class SweepResult:
    rows: list = field(default_factory=list)      # one dict per trained model

    COLUMNS = ["run_id", "regularizer", "lambda", "seed", "final_H",
               "final_H_sum", "final_I_XSY", "train_loss", "test_loss", "gap"]


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows, manifest_hash="none"):
    buf = io.StringIO()
    buf.write(f"# manifest={manifest_hash}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow([_fmt(row.get(c)) for c in columns])
    data = buf.getvalue()
    if path is None:
        return data
    with open(path, "w", newline="") as fh:
        fh.write(data)
    return data


def read_csv(path):
    """Returns (rows, manifest_hash); numeric-looking fields stay strings."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    manifest_hash = "none"
    body = []
    for line in lines:
        if line.startswith("#"):
            if "manifest=" in line:
                manifest_hash = line.split("manifest=", 1)[1].strip()
            continue
        body.append(line)
    reader = csv.reader(body)
    header = next(reader)
    rows = [dict(zip(header, rec)) for rec in reader]
    return rows, manifest_hash


def report_rows(report, run_id, epoch):
    """Flatten a ComplexityReport into metric CSV rows."""
    rows = []

    def add(layer_id, metric, value):
        if value is None:
            return
        rows.append({"run_id": run_id, "epoch": epoch, "layer_id": layer_id,
                     "metric": metric, "estimator": report.estimator,
                     "value_nats": float(value)})

    for lc in report.layers:
        add(lc.layer_id, "H", lc.H)
        add(lc.layer_id, "I_XS", lc.I_XS)
        add(lc.layer_id, "I_XSY", lc.I_XSY)
        add(lc.layer_id, "TC", lc.TC)
        add(lc.layer_id, "TC_Y", lc.TC_Y)
        add(lc.layer_id, "C_l", lc.C)
        add(lc.layer_id, "C_lY", lc.C_Y)
    for pos, lc in enumerate(report.layers):
        add(lc.layer_id, "prefix_H", report.prefix_H[pos])
        add(lc.layer_id, "suffix_H", report.suffix_H[pos])
    return rows


def runlog_rows(log):
    """Flatten a RunLog into training-log CSV rows (metric schema + losses)."""
    rows = []
    for rec in log.records:
        base = {"run_id": log.run_id, "epoch": rec["epoch"],
                "loss_task": rec.get("train_loss"),
                "loss_complexity": rec.get("loss_complexity"),
                "lambda": log.lam}
        for name in SCALAR_METRICS:
            if rec.get(name) is not None:
                rows.append(dict(base, layer_id="", metric=name, estimator="",
                                 value_nats=float(rec[name])))
        for mrow in rec.get("metric_rows", []):
            rows.append(dict(base, **mrow))
    return rows
