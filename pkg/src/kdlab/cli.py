"""Command-line front end: ``kdlab <command> [flags]``.

Commands: gen-data, train-teacher, distill, eval, sweep. Each prints its
effective configuration to stderr before doing any work; results go to
stdout and to files. Exit status is 0 on success and 1 on any failure.
"""

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from . import __version__, evalkit, synthdata, trainkit
from . import detector as det_mod
from . import losses as L

log = logging.getLogger("kdlab")

DEFAULT_TEMPERATURES = "25,30,35,40,45"
SWEEP_COLUMNS = ("model", "temperature", "map50", "map50_95")


class CommandError(Exception):
    pass


def _show_config(command, values):
    print(f"[{command}] effective configuration:", file=sys.stderr)
    for k in sorted(values):
        print(f"  {k} = {values[k]}", file=sys.stderr)
    sys.stderr.flush()


def _sidecar(path, suffix):
    stem, _ = os.path.splitext(path)
    return stem + suffix


def _run_config(path):
    return trainkit.load_config(path) if path else trainkit.RunConfig()


def _load_splits(data_dir):
    manifest, splits = synthdata.load_dataset(data_dir)
    classes = manifest.params.get("classes")
    if classes is None:
        classes = 1 + max((c for scenes in splits.values() for s in scenes for _, c in s.annotations), default=0)
    return manifest, splits, int(classes)


def _config_digest(values):
    blob = json.dumps(values, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _evaluate_split(model, scenes, train_cfg):
    data = trainkit.PreparedData(scenes, model.config, L.DistillConfig.supervised())
    return trainkit.evaluate_model(model, data, train_cfg)


# ---------------------------------------------------------------- commands


def cmd_gen_data(args):
    values = {"out": args.out, "n": args.n, "seed": args.seed, "size": args.size, "classes": args.classes,
              "max_objects": args.max_objects}
    _show_config("gen-data", values)
    if args.n < 10:
        raise CommandError(f"--n must be at least 10, got {args.n}")
    manifest, scenes = synthdata.make_dataset(args.n, args.seed, args.size, args.size, args.max_objects, args.classes)
    synthdata.save_dataset(manifest, scenes, args.out)
    counts = manifest.counts
    print(" ".join(f"{k}={counts[k]}" for k in synthdata.SPLITS))


def cmd_train_teacher(args):
    run = _run_config(args.config)
    _, splits, classes = _load_splits(args.data)
    config = run.teacher_config(classes)
    _show_config("train-teacher", {**run.flat(), "data": args.data, "out": args.out, "seed": args.seed,
                                   "classes": classes})
    model, history = trainkit.train_teacher(
        splits["train"], splits["val"], config, run.schedule, args.seed, run.train,
        L.DistillConfig.supervised(elr_radius=run.distill.elr_radius, elr_decay=run.distill.elr_decay),
        ckpt_path=args.out, early=run.early,
    )
    evalkit.emit_curves(history, _sidecar(args.out, ".csv"))
    best = history.records[history.best_epoch]
    print(f"val_map50 {best.val_map50:.6f}")


def _distill_from_args(run, args):
    values = {**run.distill.as_dict()}
    for key in ("temperature", "gamma", "epsilon"):
        v = getattr(args, key, None)
        if v is not None:
            values["T" if key == "temperature" else key] = v
    return L.DistillConfig(**values)


def cmd_distill(args):
    run = _run_config(args.config)
    distill = _distill_from_args(run, args)
    teacher, _ = det_mod.load_checkpoint(args.teacher, requires_grad=False)
    _, splits, classes = _load_splits(args.data)
    student_cfg = run.student_config(classes)
    flat = {**run.flat(), **distill.as_dict(), "teacher": args.teacher, "data": args.data, "out": args.out,
            "seed": args.seed, "classes": classes}
    _show_config("distill", flat)
    trainkit.check_compatible(teacher.config, student_cfg)
    model, history = trainkit.distill_student(
        teacher, student_cfg, distill, splits["train"], splits["val"], run.schedule, run.early, args.seed,
        run.train, ckpt_path=args.out,
    )
    evalkit.emit_curves(history, _sidecar(args.out, ".csv"))
    best = history.records[history.best_epoch]
    trainkit.write_run_meta(_sidecar(args.out, ".run.meta"), {**flat, "best_epoch": history.best_epoch,
                                                              "val_map50": f"{best.val_map50:.6f}"})
    print(f"val_map50 {best.val_map50:.6f}")


def cmd_eval(args):
    run = _run_config(args.config)
    report_path = args.report or _sidecar(args.model, f".{args.split}.eval.json")
    _show_config("eval", {"model": args.model, "data": args.data, "split": args.split, "report": report_path,
                          **{k: v for k, v in run.flat().items() if k in ("conf_threshold", "nms_iou",
                                                                         "pr_score_threshold")}})
    if not os.path.exists(args.model):
        raise CommandError(f"checkpoint not found: {args.model}")
    model, _ = det_mod.load_checkpoint(args.model, requires_grad=False)
    _, splits, _ = _load_splits(args.data)
    if not splits.get(args.split):
        raise CommandError(f"split {args.split!r} is empty in {args.data}")
    report = _evaluate_split(model, splits[args.split], run.train)
    with open(report_path, "w") as fh:
        fh.write(report.to_json() + "\n")
    print(f"mAP50 {report.map50:.6f}")
    print(f"mAP50-95 {report.map50_95:.6f}")
    print(f"precision {report.precision:.6f}")
    print(f"recall {report.recall:.6f}")


def _sweep_job(job):
    """One sweep sub-run; returns ``(model, temperature, map50, map50_95)``."""
    name, T, teacher_path, data, config_path, seed, ckpt = job
    run = _run_config(config_path)
    _, splits, classes = _load_splits(data)
    student_cfg = run.student_config(classes)
    if T is None:
        model, _ = trainkit.train_baseline(student_cfg, splits["train"], splits["val"], run.schedule, run.early,
                                           seed, run.train, ckpt_path=ckpt, distill=run.distill)
    else:
        distill = L.DistillConfig(**{**run.distill.as_dict(), "T": T})
        model, _ = trainkit.distill_student(teacher_path, student_cfg, distill, splits["train"], splits["val"],
                                            run.schedule, run.early, seed, run.train, ckpt_path=ckpt)
    report = _evaluate_split(model, splits["test"], run.train)
    return name, "-" if T is None else f"{T:g}", report.map50, report.map50_95


def parse_temperatures(text):
    try:
        temps = [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise CommandError(f"bad temperature list {text!r}") from None
    if not temps:
        raise CommandError("temperature list is empty")
    if any(t <= 0 for t in temps):
        raise CommandError(f"temperatures must be positive, got {text!r}")
    return temps


def cmd_sweep(args):
    temps = parse_temperatures(args.temperatures)
    run = _run_config(args.config)
    runs_dir = args.runs_dir or _sidecar(args.out, "_runs")
    flat = {**run.flat(), "teacher": args.teacher, "data": args.data, "temperatures": args.temperatures,
            "seed": args.seed, "out": args.out, "runs_dir": runs_dir, "jobs": args.jobs}
    _show_config("sweep", flat)
    teacher, _ = det_mod.load_checkpoint(args.teacher, requires_grad=False)
    _, _, classes = _load_splits(args.data)
    trainkit.check_compatible(teacher.config, run.student_config(classes))
    os.makedirs(runs_dir, exist_ok=True)
    jobs = [("baseline", None, args.teacher, args.data, args.config, args.seed,
             os.path.join(runs_dir, "baseline.dstl"))]
    for i, T in enumerate(temps, 1):
        jobs.append((f"distilled-{i}", T, args.teacher, args.data, args.config, args.seed,
                     os.path.join(runs_dir, f"distilled-T{T:g}.dstl")))
    trainkit.write_run_meta(_sidecar(args.out, ".meta"), {"seed": args.seed, "config_digest": _config_digest(flat),
                                                          "temperatures": args.temperatures})
    rows = []
    with open(args.out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(SWEEP_COLUMNS)
        fh.flush()

        def emit(row):
            name, t, m50, m5095 = row
            writer.writerow([name, t, f"{m50:.6f}", f"{m5095:.6f}"])
            fh.flush()
            rows.append(row)
            print(f"{name} T={t} mAP50 {m50:.6f} mAP50-95 {m5095:.6f}", file=sys.stderr)

        if args.jobs > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                for row in pool.map(_sweep_job, jobs):
                    emit(row)
        else:
            for job in jobs:
                emit(_sweep_job(job))
    swept = [r[2] for r in rows[1:]]
    monotone = all(a <= b for a, b in zip(swept, swept[1:]))
    best = max(rows[1:], key=lambda r: r[2])
    print(f"best temperature {best[1]} mAP50 {best[2]:.6f} (baseline {rows[0][2]:.6f})")
    print(f"mAP50 monotone non-decreasing in temperature: {'yes' if monotone else 'no'}")


# ---------------------------------------------------------------- parser


def build_parser():
    p = argparse.ArgumentParser(prog="kdlab", description="Detector distillation experiments on synthetic scenes.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="per-epoch progress on stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=600)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=48)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--max-objects", type=int, default=3)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train-teacher", help="train the teacher detector")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train_teacher)

    d = sub.add_parser("distill", help="train a student against a teacher checkpoint")
    d.add_argument("--teacher", required=True)
    d.add_argument("--data", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--temperature", type=float)
    d.add_argument("--gamma", type=float)
    d.add_argument("--epsilon", type=float)
    d.add_argument("--config")
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_distill)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=synthdata.SPLITS)
    e.add_argument("--report", help="JSON report path (default: next to the checkpoint)")
    e.add_argument("--config")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sweep", help="baseline plus one distilled student per temperature")
    s.add_argument("--teacher", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--temperatures", default=DEFAULT_TEMPERATURES)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--config")
    s.add_argument("--runs-dir", help="checkpoint directory (default: <out>_runs)")
    s.add_argument("--jobs", type=int, default=1, help="parallel sub-runs")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(message)s")
    try:
        args.func(args)
    except (CommandError, OSError, ValueError, RuntimeError) as exc:
        print(f"kdlab {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
