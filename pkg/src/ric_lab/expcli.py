"""Command-line driver: data generation, training, evaluation, theory checks.

Every subcommand writes into a run directory holding the resolved config,
its outputs and a ``manifest.json``.  Exit codes: 0 success, 1 invalid
input or a failed verification, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import taskgen, theoryverify, trainer
from .agent import load_checkpoint, save_checkpoint
from .episodes import infer_with_halting
from .metrics import (MetricLog, anytime_curve, deterministic_steps, ece, halting_stats,
                      reliability_and_histogram)
from .suite import run_paper_suite

log = logging.getLogger("ric_lab")

MANIFEST = "manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; the contract here is 1
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ---------------------------------------------------------------------------
# manifest


def code_hash():
    """Content hash over the package sources, in sorted path order."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def worker_cap():
    raw = os.environ.get("RIC_LAB_THREADS")
    if raw is None:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"RIC_LAB_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("RIC_LAB_THREADS must be a positive integer")
    return n


def write_manifest(run_dir, command, config, seeds, outputs, started, extra=None):
    manifest = {
        "command": command,
        "config": config,
        "code_version": code_hash(),
        "seeds": seeds,
        "outputs": sorted(outputs),
        "workers": worker_cap(),
        "started": started,
        "finished": _now(),
    }
    if extra:
        manifest.update(extra)
    with open(Path(run_dir) / MANIFEST, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True, default=_jsonable)
    return manifest


def read_manifest(run_dir):
    path = Path(run_dir) / MANIFEST
    if not path.exists():
        raise UsageError(f"{run_dir} is not a run directory (no {MANIFEST})")
    with open(path) as fh:
        return json.load(fh)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(type(o).__name__)


def _dump(obj, path):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, default=_jsonable)


# ---------------------------------------------------------------------------
# task and config resolution


TASK_FLAGS = ("kind", "num_classes", "dim", "overlap", "separation", "margin",
              "noise_rate", "n_train", "n_val", "n_test")


def _add_task_flags(p):
    g = p.add_argument_group("task")
    g.add_argument("--data", help="task directory written by generate-data")
    g.add_argument("--kind", choices=taskgen.GENERATORS)
    g.add_argument("--num-classes", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--overlap", type=float)
    g.add_argument("--separation", type=float)
    g.add_argument("--margin", type=float)
    g.add_argument("--noise-rate", type=float)
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-val", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--task-seed", type=int)


def _task_spec(args, seed):
    base = taskgen.TaskSpec(kind=args.kind or "gaussian-mixture", seed=seed)
    changes = {k: getattr(args, k) for k in TASK_FLAGS if getattr(args, k, None) is not None}
    if getattr(args, "task_seed", None) is not None:
        changes["seed"] = args.task_seed
    return replace(base, **changes).validate()


def load_task(args, seed):
    """A task from ``--data`` if given, otherwise generated from the task flags."""
    if getattr(args, "data", None):
        return taskgen.import_task(args.data), {"data": str(args.data)}
    spec = _task_spec(args, seed)
    return taskgen.generate(spec), {"task_spec": spec.to_dict()}


def _task_from_manifest(man):
    if "data" in man:
        return taskgen.import_task(man["data"])
    return taskgen.generate(taskgen.TaskSpec.from_dict(man["task_spec"]))


TRAIN_FLAGS = {"epochs": int, "horizon": int, "lr": float, "batch_size": int,
               "hidden": int, "gamma": float, "optimizer": str, "passes_per_snapshot": int,
               "eval_every": int}


def _add_train_flags(p):
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key")
    for name, kind in TRAIN_FLAGS.items():
        p.add_argument("--" + name.replace("_", "-"), type=kind)


def train_config(args):
    overrides = {k: getattr(args, k) for k in TRAIN_FLAGS if getattr(args, k, None) is not None}
    for item in args.set:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if args.seed is not None:
        overrides["seed"] = args.seed
    text = Path(args.config).read_text() if args.config else ""
    return trainer.TrainConfig.from_text(text, **overrides)


def _run_dir(args, default):
    d = Path(args.out or Path("runs") / default)
    d.mkdir(parents=True, exist_ok=True)
    return d


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate_data(args):
    started = _now()
    seed = 0 if args.seed is None else args.seed
    spec = _task_spec(args, seed)
    out = _run_dir(args, f"data-{spec.kind}-seed{seed}")
    task = taskgen.generate(spec)
    taskgen.export_task(task, out)
    write_manifest(out, "generate-data", spec.to_dict(), {"task": spec.seed},
                   [f"{s}.csv" for s in taskgen.SPLITS] + ["task.json"], started)
    print(out)
    return 0


def _train(args, kind):
    started = _now()
    cfg = train_config(args)
    task, source = load_task(args, cfg.seed)
    out = _run_dir(args, f"{kind}-seed{cfg.seed}")
    if kind == "ric":
        params, mlog = trainer.train_ric(task, cfg)
    else:
        params, mlog = trainer.train_supervised(task, cfg)
    (out / "config.cfg").write_text(cfg.to_text())
    mlog.write(out / "metrics.csv")
    with open(out / "extras.jsonl", "w") as fh:
        for row in mlog.extras:
            fh.write(json.dumps(row, default=_jsonable) + "\n")
    save_checkpoint(params, out / "checkpoint", extra={"kind": kind})
    write_manifest(out, f"train-{kind}", trainer.config_dict(cfg), {"train": cfg.seed},
                   ["config.cfg", "metrics.csv", "extras.jsonl", "checkpoint.json",
                    "checkpoint.bin"], started, {"model": kind, **source})
    last = mlog.last("val") or mlog.last("train")
    if last:
        print(json.dumps(last, default=_jsonable))
    return 0


def cmd_train_ric(args):
    return _train(args, "ric")


def cmd_train_supervised(args):
    return _train(args, "supervised")


def _load_run(run_dir):
    man = read_manifest(run_dir)
    if man.get("model") not in ("ric", "supervised"):
        raise UsageError(f"{run_dir} does not hold a trained model")
    params, _, _ = load_checkpoint(Path(run_dir) / "checkpoint")
    cfg = trainer.TrainConfig.from_text((Path(run_dir) / "config.cfg").read_text())
    return man, params, cfg


def _eval_data(args, man):
    task = taskgen.import_task(args.data) if args.data else _task_from_manifest(man)
    return task.split(args.split)


def final_predictions(params, cfg, X):
    if params.kind == "supervised":
        return trainer.predict_supervised(params, X)
    return deterministic_steps(params, X, cfg.horizon)[0][-1]


def cmd_evaluate(args):
    started = _now()
    man, params, cfg = _load_run(args.run)
    data = _eval_data(args, man)
    probs = final_predictions(params, cfg, data.X)
    rep = ece(probs, data.y, args.bins)
    table, hist = reliability_and_histogram(probs, data.y, args.bins)
    out = Path(args.out or args.run)
    out.mkdir(parents=True, exist_ok=True)
    report = {"split": args.split, "model": man["model"], **rep.to_dict(),
              "reliability": table, "histogram": hist}
    _dump(report, out / f"evaluate-{args.split}.json")
    print(json.dumps({"split": args.split, "accuracy": rep.overall_accuracy, "ece": rep.ece,
                      "mean_confidence": rep.mean_confidence}))
    if args.out:
        write_manifest(out, "evaluate", {"run": str(args.run), "split": args.split,
                                          "bins": args.bins}, {}, [f"evaluate-{args.split}.json"],
                       started)
    return 0


def _require_ric(man, what):
    if man["model"] != "ric":
        raise UsageError(f"{what} needs a recurrent agent run")


def cmd_anytime(args):
    man, params, cfg = _load_run(args.run)
    _require_ric(man, "anytime")
    data = _eval_data(args, man)
    rows = anytime_curve(params, data, args.steps or cfg.horizon, args.bins)
    out = Path(args.out or args.run)
    out.mkdir(parents=True, exist_ok=True)
    _write_rows(out / f"anytime-{args.split}.csv", rows)
    for r in rows:
        print(json.dumps(r))
    return 0


def cmd_halting(args):
    man, params, cfg = _load_run(args.run)
    _require_ric(man, "halting")
    data = _eval_data(args, man)
    steps = args.steps or cfg.horizon
    rec = infer_with_halting(data.X, params, steps)
    correct = rec.prediction.argmax(axis=1) == data.y
    stats = halting_stats(rec, correct, steps)
    full = deterministic_steps(params, data.X, steps)[0][-1]
    stats["accuracy_halted"] = float(correct.mean())
    stats["accuracy_full"] = float(np.mean(full.argmax(axis=1) == data.y))
    stats["max_steps"] = steps
    out = Path(args.out or args.run)
    out.mkdir(parents=True, exist_ok=True)
    _dump(stats, out / f"halting-{args.split}.json")
    _write_rows(out / f"halting-{args.split}.csv",
                [{"index": i, "halt_step": int(h), "correct": int(c)}
                 for i, (h, c) in enumerate(zip(rec.halt_step, correct))])
    print(json.dumps({k: stats[k] for k in ("ordering", "accuracy_halted", "accuracy_full")}
                     | {"mean_halt_step": stats["all"]["mean"]}))
    return 0


def _write_rows(path, rows):
    with open(path, "w", newline="") as fh:
        if not rows:
            return
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_verify_theory(args):
    seed = 0 if args.seed is None else args.seed
    outcomes = theoryverify.run_all(samples=args.samples, seed=seed)
    for o in outcomes:
        print(o.to_json())
    if args.out:
        out = _run_dir(args, "")
        with open(out / "theory.jsonl", "w") as fh:
            for o in outcomes:
                fh.write(o.to_json() + "\n")
    return 0 if all(o.passed for o in outcomes) else 1


def cmd_compare(args):
    rows = []
    for run in args.runs:
        path = Path(run) / "metrics.csv" if Path(run).is_dir() else Path(run)
        if not path.exists():
            raise UsageError(f"no metric log at {path}")
        mlog = MetricLog.read(path)
        last = mlog.last(args.split)
        if last is None:
            raise UsageError(f"{path} has no {args.split!r} rows")
        rows.append((str(run), last))
    width = max(len(r) for r, _ in rows)
    print(f"{'run':<{width}}  {'epoch':>6}  {'accuracy':>9}  {'ece':>7}  {'confidence':>10}")
    for run, last in rows:
        print(f"{run:<{width}}  {last['epoch']:>6d}  {last['accuracy']:>9.4f}  "
              f"{last['ece']:>7.4f}  {last['mean_confidence']:>10.4f}")
    return 0


def cmd_paper_suite(args):
    out = Path(args.out or Path("runs") / f"suite-{args.scale}")
    summary = run_paper_suite(args.scale, out, seed=0 if args.seed is None else args.seed)
    print(json.dumps(summary["noise_study"], default=_jsonable))
    return 0


# ---------------------------------------------------------------------------
# dispatch


def build_parser():
    p = _Parser(prog="ric-lab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=fn)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", help="run directory")
        return sp

    g = add("generate-data", cmd_generate_data, "generate and export a synthetic task")
    _add_task_flags(g)
    for name, fn in (("train-ric", cmd_train_ric), ("train-supervised", cmd_train_supervised)):
        t = add(name, fn, f"train ({name[6:]})")
        _add_train_flags(t)
        _add_task_flags(t)
    for name, fn in (("evaluate", cmd_evaluate), ("anytime", cmd_anytime),
                     ("halting", cmd_halting)):
        e = add(name, fn, f"{name} a trained run")
        e.add_argument("--run", required=True)
        e.add_argument("--data", help="evaluate on this task directory instead")
        e.add_argument("--split", default="test", choices=("train", "val", "test"))
        e.add_argument("--bins", type=int, default=15)
        if name != "evaluate":
            e.add_argument("--steps", type=int)
    v = add("verify-theory", cmd_verify_theory, "run the Monte-Carlo and numeric verifiers")
    v.add_argument("--samples", type=int, default=theoryverify.DEFAULT_SAMPLES)
    c = sub.add_parser("compare", help="final metrics of several runs side by side")
    c.set_defaults(func=cmd_compare)
    c.add_argument("runs", nargs="+")
    c.add_argument("--split", default="val")
    s = add("paper-suite", cmd_paper_suite, "regenerate all experiment data")
    s.add_argument("--scale", choices=("smoke", "full-desk"), default="smoke")
    return p


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return 1
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        worker_cap()
        return args.func(args)
    except UsageError as e:
        print(f"ric-lab: error: {e}", file=sys.stderr)
        return 1
    except (taskgen.TaskError, taskgen.CSVFormatError, ValueError, FileNotFoundError) as e:
        print(f"ric-lab: invalid input: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - top-level boundary
        log.debug("failure", exc_info=True)
        print(f"ric-lab: failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
