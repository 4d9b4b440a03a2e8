"""Calibration and refinement metrics.

Confidence is the largest class probability of a prediction.  Bins are
equal-width on ``[0, 1]``: confidence ``c`` goes to bin ``floor(c * M)``,
with ``c = 1`` folded into the top bin.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .agent import Agent
from .episodes import HaltingRecord, policy_pass

DEFAULT_BINS = 15


@dataclass
class CalibrationReport:
    bins: int
    counts: np.ndarray
    accuracy: np.ndarray
    confidence: np.ndarray
    ece: float
    overall_accuracy: float
    mean_confidence: float

    @property
    def n(self):
        return int(self.counts.sum())

    def recompute_ece(self):
        w = self.counts / self.counts.sum()
        return float(np.sum(w * np.abs(self.accuracy - self.confidence)))

    def to_dict(self):
        d = asdict(self)
        for k in ("counts", "accuracy", "confidence"):
            d[k] = np.asarray(d[k]).tolist()
        return d

    def to_json(self):
        return json.dumps(self.to_dict())

    def to_csv_row(self, epoch, split, return_norm=float("nan"), mean_halt_step=float("nan")):
        return {
            "epoch": epoch, "split": split, "accuracy": self.overall_accuracy,
            "return_norm": return_norm, "ece": self.ece,
            "mean_confidence": self.mean_confidence, "mean_halt_step": mean_halt_step,
        }


def _confidences(probs, labels):
    probs = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    labels = np.asarray(labels)
    if len(probs) == 0:
        raise ValueError("empty prediction list")
    if len(labels) != len(probs):
        raise ValueError("predictions and labels differ in length")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(np.float64)
    return conf, correct


def bin_index(conf, bins):
    return np.minimum((np.asarray(conf) * bins).astype(np.int64), bins - 1)


def ece(probs, labels, bins=DEFAULT_BINS):
    """Expected calibration error with a full per-bin breakdown."""
    if bins < 1:
        raise ValueError("need at least one bin")
    conf, correct = _confidences(probs, labels)
    idx = bin_index(conf, bins)
    counts = np.bincount(idx, minlength=bins).astype(np.float64)
    safe = np.where(counts > 0, counts, 1.0)
    acc = np.bincount(idx, weights=correct, minlength=bins) / safe
    mconf = np.bincount(idx, weights=conf, minlength=bins) / safe
    gap = np.abs(acc - mconf) * counts / len(conf)
    return CalibrationReport(bins, counts.astype(np.int64), acc, mconf,
                             float(gap.sum()), float(correct.mean()), float(conf.mean()))


def reliability_and_histogram(probs, labels, bins=DEFAULT_BINS):
    """Per-bin rows for a reliability diagram plus the confidence histogram."""
    rep = ece(probs, labels, bins)
    edges = np.linspace(0.0, 1.0, bins + 1)
    table = [
        {"lo": float(edges[m]), "hi": float(edges[m + 1]), "count": int(rep.counts[m]),
         "accuracy": float(rep.accuracy[m]) if rep.counts[m] else None,
         "confidence": float(rep.confidence[m]) if rep.counts[m] else None}
        for m in range(bins)
    ]
    return table, rep.counts.copy()


def accuracy(probs, labels):
    probs = np.atleast_2d(probs)
    return float(np.mean(probs.argmax(axis=1) == np.asarray(labels)))


def deterministic_steps(params, X, horizon, batch=1024):
    """Mean-action predictions ``[T, n, K]`` and values ``[T, n]`` for every step."""
    agent = params if isinstance(params, Agent) else Agent(params)
    preds, vals = [], []
    for i in range(0, len(X), batch):
        acts, _, _, values, _, _, _ = policy_pass(agent, X[i:i + batch], horizon)
        preds.append(acts[1:])
        vals.append(values)
    return np.concatenate(preds, axis=1), np.concatenate(vals, axis=1)


def anytime_curve(params, data, max_steps, bins=DEFAULT_BINS):
    """Per-step accuracy, mean confidence and ECE of the mean action, no halting."""
    preds, _ = deterministic_steps(params, data.X, max_steps)
    rows = []
    for t in range(max_steps):
        rep = ece(preds[t], data.y, bins)
        rows.append({"step": t + 1, "accuracy": rep.overall_accuracy,
                     "mean_confidence": rep.mean_confidence, "ece": rep.ece})
    return rows


def halting_stats(records, correct, max_steps=None):
    """Halt-step distributions split by correctness of the halted prediction."""
    steps = records.halt_step if isinstance(records, HaltingRecord) else np.asarray(records)
    correct = np.asarray(correct, dtype=bool)
    top = int(max_steps if max_steps is not None else (steps.max() if len(steps) else 1))

    def summary(s):
        if len(s) == 0:
            return {"n": 0, "mean": float("nan"), "median": float("nan"),
                    "histogram": [0] * top}
        return {"n": int(len(s)), "mean": float(np.mean(s)), "median": float(np.median(s)),
                "histogram": np.bincount(s - 1, minlength=top)[:top].tolist()}

    out = {"correct": summary(steps[correct]), "incorrect": summary(steps[~correct]),
           "all": summary(steps)}
    mc, mi = out["correct"]["mean"], out["incorrect"]["mean"]
    if np.isnan(mc) or np.isnan(mi):
        out["ordering"] = "undefined"
    else:
        out["ordering"] = ("correct>incorrect" if mc > mi
                           else "correct<incorrect" if mc < mi else "equal")
    return out


# ---------------------------------------------------------------------------
# metric log


METRIC_COLUMNS = ("epoch", "split", "accuracy", "return_norm", "ece",
                  "mean_confidence", "mean_halt_step")
METRIC_SCHEMA_VERSION = "1"


class MetricLog:
    """Append-only rows with the fixed metric schema plus free-form extras."""

    def __init__(self):
        self.rows = []
        self.extras = []

    def append(self, row):
        self.rows.append({k: row[k] for k in METRIC_COLUMNS})

    def last(self, split):
        for row in reversed(self.rows):
            if row["split"] == split:
                return row
        return None

    def series(self, split, column):
        return [r[column] for r in self.rows if r["split"] == split]

    def to_csv(self):
        buf = io.StringIO()
        buf.write(f"# ric-lab metrics schema v{METRIC_SCHEMA_VERSION}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for r in self.rows:
            w.writerow([_fmt(r[c]) for c in METRIC_COLUMNS])
        return buf.getvalue()

    def write(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read(cls, path):
        log = cls()
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#")]
        for rec in csv.DictReader(lines):
            row = {c: rec[c] for c in METRIC_COLUMNS}
            row["epoch"] = int(row["epoch"])
            for c in METRIC_COLUMNS[2:]:
                row[c] = float(row[c])
            log.rows.append(row)
        return log


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)
