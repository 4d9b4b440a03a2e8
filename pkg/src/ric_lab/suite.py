"""Experiment recipes on synthetic tasks, and the suite that runs them all.

Each recipe is a plain function of ``(seed, scale)`` returning a dict of
plain Python values, so the acceptance tests and the ``paper-suite``
subcommand share one definition of every experiment.
"""

from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import taskgen, theoryverify, trainer
from .episodes import infer_with_halting
from .metrics import anytime_curve, deterministic_steps, ece, halting_stats, reliability_and_histogram

log = logging.getLogger(__name__)

NOISE_RATES = (0.0, 0.0903, 0.4021)
MIN_FREE_BYTES = 50 * 2**20


@dataclass(frozen=True)
class Scale:
    # optimal-target task (3 classes, known posterior)
    target_train: int = 5000
    target_test: int = 1000
    target_epochs: int = 600
    target_hidden: int = 32
    target_lr: float = 3e-3
    # noise study (10 classes)
    noise_train: int = 3000
    noise_test: int = 5000
    noise_dim: int = 10
    noise_overlap: float = 0.3
    noise_ric_epochs: int = 150
    noise_sup_epochs: int = 150
    noise_hidden: int = 64
    noise_lr: float = 1e-3
    noise_horizon: int = 20
    # logit-scale contrast (separable)
    sep_train: int = 500
    sep_margin: float = 3.0
    sep_lr: float = 1e-3
    sep_max_epochs: int = 1500
    # halting / anytime (ring)
    ring_train: int = 3000
    ring_test: int = 2000
    ring_epochs: int = 200
    ring_lr: float = 3e-3
    ring_hidden: int = 32


SCALES = {
    "full-desk": Scale(),
    "smoke": Scale(target_train=400, target_test=200, target_epochs=4, target_hidden=8,
                   noise_train=300, noise_test=300, noise_ric_epochs=3, noise_sup_epochs=3,
                   noise_hidden=16, noise_horizon=5, sep_train=200, sep_max_epochs=30,
                   ring_train=300, ring_test=300, ring_epochs=3, ring_hidden=8),
}


def get_scale(scale):
    if isinstance(scale, Scale):
        return scale
    try:
        return SCALES[scale]
    except KeyError:
        raise ValueError(f"unknown scale {scale!r}; choose from {sorted(SCALES)}") from None


def _tv_per_step(preds, q):
    return 0.5 * np.abs(preds - q[None]).sum(axis=-1).mean(axis=-1)


# ---------------------------------------------------------------------------
# recipes


def optimal_target_study(seed, scale="full-desk"):
    """Train on a realizable 3-class task and compare the policy with ``q``."""
    s = get_scale(scale)
    spec = taskgen.TaskSpec(kind="gaussian-mixture", num_classes=3, dim=2, overlap=1 / 3,
                            n_train=s.target_train, n_val=500, n_test=s.target_test, seed=seed)
    task = taskgen.generate(spec)
    cfg = trainer.TrainConfig(epochs=s.target_epochs, hidden=s.target_hidden, lr=s.target_lr,
                              batch_size=256, seed=seed, eval_every=50, halting_in_eval=False)
    t0 = time.time()
    params, mlog = trainer.train_ric(task, cfg)
    elapsed = time.time() - t0
    tv_out, ret_out = theoryverify.verify_optimal_target(params, task.test, cfg.horizon)
    return {"seed": seed, "mean_entropy": ret_out.details["mean_entropy"],
            "per_step_tv": tv_out.details["per_step_tv"], "max_tv": tv_out.estimate,
            "return": ret_out.estimate, "ceiling": ret_out.target,
            "return_gap": abs(ret_out.estimate - ret_out.target),
            "tv_passed": tv_out.passed, "return_passed": ret_out.passed,
            "mean_concentration_confident": ret_out.details["mean_concentration_confident"],
            "train_seconds": elapsed, "metrics": mlog.rows}


def noise_task(seed, rate, scale="full-desk"):
    s = get_scale(scale)
    return taskgen.generate(taskgen.TaskSpec(
        kind="gaussian-mixture", num_classes=10, dim=s.noise_dim, overlap=s.noise_overlap,
        noise_rate=rate, n_train=s.noise_train, n_val=500, n_test=s.noise_test,
        seed=1000 + seed))


def noise_study(seed, scale="full-desk", rates=NOISE_RATES, bins=15):
    """Final test accuracy and ECE of both models at each label-noise rate."""
    s = get_scale(scale)
    base = trainer.TrainConfig(hidden=s.noise_hidden, lr=s.noise_lr, horizon=s.noise_horizon,
                               batch_size=128, seed=seed, halting_in_eval=False)
    out = []
    for rate in rates:
        task = noise_task(seed, rate, s)
        ric_cfg = replace(base, epochs=s.noise_ric_epochs,
                          eval_every=max(1, s.noise_ric_epochs // 20))
        sup_cfg = replace(base, epochs=s.noise_sup_epochs,
                          eval_every=max(1, s.noise_sup_epochs // 20))
        ric, ric_log = trainer.train_ric(task, ric_cfg)
        sup, sup_log = trainer.train_supervised(task, sup_cfg)
        preds = {"ric": deterministic_steps(ric, task.test.X, ric_cfg.horizon)[0][-1],
                 "supervised": trainer.predict_supervised(sup, task.test.X)}
        row = {"seed": seed, "noise_rate": rate, "dynamics": {"ric": ric_log.rows,
                                                             "supervised": sup_log.rows}}
        for name, p in preds.items():
            rep = ece(p, task.test.y, bins)
            table, hist = reliability_and_histogram(p, task.test.y, bins)
            row[name] = {"accuracy": rep.overall_accuracy, "ece": rep.ece,
                         "mean_confidence": rep.mean_confidence,
                         "reliability": table, "histogram": hist.tolist()}
        row["ece_gap"] = row["supervised"]["ece"] - row["ric"]["ece"]
        row["accuracy_gap"] = row["ric"]["accuracy"] - row["supervised"]["accuracy"]
        out.append(row)
    return out


def _first(seq, pred):
    for i, v in enumerate(seq):
        if pred(v):
            return i
    return None


def logit_scale_study(seed, scale="full-desk"):
    """Classifier-norm growth after fitting a separable task, for both models.

    The supervised model has converged at the first epoch with training
    accuracy 1 and is run to ten times that epoch.  The recurrent agent
    has converged once its training accuracy is 1 and its normalized
    training return is at least 0.95; it then gets as many further
    updates as the supervised model received after convergence.
    """
    s = get_scale(scale)
    task = taskgen.generate(taskgen.TaskSpec(
        kind="separable-linear", num_classes=3, dim=4, margin=s.sep_margin,
        n_train=s.sep_train, n_val=0, n_test=0, seed=2000 + seed))
    cfg = trainer.TrainConfig(epochs=s.sep_max_epochs, hidden=32, lr=s.sep_lr, batch_size=128,
                              activation="tanh", seed=seed, eval_train_size=s.sep_train,
                              halting_in_eval=False)
    conv = {}

    def sup_cb(epoch, params, mlog):
        if "sup" not in conv and mlog.last("train")["accuracy"] == 1.0:
            conv["sup"] = epoch
        return "sup" in conv and epoch >= 10 * conv["sup"]

    _, sup_log = trainer.train_supervised(task, cfg, callback=sup_cb)
    sup_norm = [e["w_norm"] for e in sup_log.extras]
    out = {"seed": seed, "supervised_norms": sup_norm, "supervised_converged": "sup" in conv}
    if "sup" not in conv:
        return out
    e_s = conv["sup"]
    out.update(supervised_convergence_epoch=e_s,
               supervised_norm_at_convergence=sup_norm[e_s - 1],
               supervised_norm_at_10x=sup_norm[-1],
               supervised_ratio=sup_norm[-1] / sup_norm[e_s - 1])

    def ric_cb(epoch, params, mlog):
        row = mlog.last("train")
        if "ric" not in conv and row["accuracy"] == 1.0 and row["return_norm"] >= 0.95:
            conv["ric"] = epoch
        return "ric" in conv and epoch >= conv["ric"] + 9 * e_s

    _, ric_log = trainer.train_ric(task, cfg, callback=ric_cb)
    ric_norm = [e["w_norm"] for e in ric_log.extras]
    out["ric_norms"] = ric_norm
    out["ric_converged"] = "ric" in conv
    if "ric" in conv:
        e_r = conv["ric"]
        out.update(ric_convergence_epoch=e_r, ric_norm_at_convergence=ric_norm[e_r - 1],
                   ric_norm_final=ric_norm[-1], ric_ratio=ric_norm[-1] / ric_norm[e_r - 1])
    return out


def halting_study(seed, scale="full-desk", bins=15):
    """Anytime curve and value-halted inference on a mixed-difficulty ring task."""
    s = get_scale(scale)
    task = taskgen.generate(taskgen.TaskSpec(
        kind="ring", num_classes=3, dim=2, overlap=0.35, n_train=s.ring_train, n_val=500,
        n_test=s.ring_test, seed=3000 + seed))
    cfg = trainer.TrainConfig(epochs=s.ring_epochs, hidden=s.ring_hidden, lr=s.ring_lr,
                              batch_size=256, seed=seed, eval_every=max(1, s.ring_epochs // 10))
    params, mlog = trainer.train_ric(task, cfg)
    T = cfg.horizon
    curve = anytime_curve(params, task.test, T, bins)
    rec = infer_with_halting(task.test.X, params, T)
    correct = rec.prediction.argmax(axis=1) == task.test.y
    stats = halting_stats(rec, correct, T)
    full = deterministic_steps(params, task.test.X, T)[0][-1]
    acc = [r["accuracy"] for r in curve]
    conf = [r["mean_confidence"] for r in curve]
    return {"seed": seed, "anytime": curve, "halting": stats,
            "halt_steps": rec.halt_step.tolist(), "correct": correct.tolist(),
            "accuracy_halted": float(correct.mean()),
            "accuracy_full": float(np.mean(full.argmax(axis=1) == task.test.y)),
            "mean_halt_step": float(rec.halt_step.mean()), "horizon": T,
            "max_accuracy_drop": float(np.max(np.maximum.accumulate(acc) - acc)),
            "max_confidence_drop": float(np.max(np.maximum.accumulate(conf) - conf)),
            "metrics": mlog.rows}


# ---------------------------------------------------------------------------
# suite


def _write_csv(path, rows):
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def _free_bytes(path):
    p = Path(path).resolve()
    while not p.exists():
        p = p.parent
    return shutil.disk_usage(p).free


def run_paper_suite(scale, out, seed=0):
    """Run every recipe once and write raw CSVs plus ``summary.json`` under ``out``."""
    s = get_scale(scale)
    out = Path(out)
    free = _free_bytes(out)
    if free < MIN_FREE_BYTES:
        raise OSError(f"insufficient disk space at {out}: {free} bytes free")
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()

    noise = noise_study(seed, s)
    dyn, noise_rows, rel = [], [], []
    for row in noise:
        for model in ("ric", "supervised"):
            for m in row["dynamics"][model]:
                dyn.append({"noise_rate": row["noise_rate"], "model": model, **m})
            r = row[model]
            noise_rows.append({"noise_rate": row["noise_rate"], "model": model,
                               "accuracy": r["accuracy"], "ece": r["ece"],
                               "mean_confidence": r["mean_confidence"]})
            for b, t in enumerate(r["reliability"]):
                rel.append({"noise_rate": row["noise_rate"], "model": model, "bin": b, **t})
    _write_csv(out / "dynamics.csv", dyn)
    _write_csv(out / "noise_study.csv", noise_rows)
    _write_csv(out / "reliability.csv", rel)

    halt = halting_study(seed, s)
    _write_csv(out / "anytime.csv", halt["anytime"])
    _write_csv(out / "halting.csv", [{"index": i, "halt_step": h, "correct": int(c)}
                                     for i, (h, c) in enumerate(zip(halt["halt_steps"],
                                                                    halt["correct"]))])

    scale_rows = logit_scale_study(seed, s)
    norms = [{"model": "supervised", "epoch": i + 1, "w_norm": v}
             for i, v in enumerate(scale_rows["supervised_norms"])]
    norms += [{"model": "ric", "epoch": i + 1, "w_norm": v}
              for i, v in enumerate(scale_rows.get("ric_norms", []))]
    _write_csv(out / "logit_scale.csv", norms)

    theory = [o.to_dict() for o in theoryverify.run_all(seed=seed)]
    with open(out / "theory.jsonl", "w") as fh:
        for o in theory:
            fh.write(json.dumps(o, default=_jsonable) + "\n")

    summary = {
        "scale": scale if isinstance(scale, str) else "custom",
        "seed": seed,
        "noise_study": [{"noise_rate": r["noise_rate"],
                         "ece_supervised": r["supervised"]["ece"], "ece_ric": r["ric"]["ece"],
                         "sign_ece_supervised_minus_ric": int(np.sign(r["ece_gap"])),
                         "accuracy_supervised": r["supervised"]["accuracy"],
                         "accuracy_ric": r["ric"]["accuracy"]} for r in noise],
        "halting": {k: halt[k] for k in ("accuracy_halted", "accuracy_full", "mean_halt_step",
                                         "horizon", "max_accuracy_drop",
                                         "max_confidence_drop")}
        | {"ordering": halt["halting"]["ordering"]},
        "logit_scale": {k: v for k, v in scale_rows.items() if not k.endswith("norms")},
        "theory_passed": all(o["passed"] for o in theory),
        "seconds": time.time() - t0,
        "outputs": ["dynamics.csv", "noise_study.csv", "reliability.csv", "anytime.csv",
                    "halting.csv", "logit_scale.csv", "theory.jsonl"],
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, default=_jsonable)
    return summary


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)
