"""Command-line entry point: ``augpt <subcommand> [options]``.

Exit codes: 0 success, 1 usage or configuration error, 2 data or schema
error, 3 numerical failure.  Data goes to files (or stdout where noted);
diagnostics go to stderr.  Every run directory is assembled in a temporary
sibling and renamed into place, so a failed run leaves nothing behind.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import tempfile
from typing import List, Optional

from . import config as cfgmod
from . import report as rep
from . import serialization
from .augment import build_view_set, provenance_records
from .distill import StudentModel, run_distillation
from .errors import (
    AlignmentError,
    DataError,
    DegenerateFeatureError,
    NumericalFailure,
    ParameterError,
    SchemaError,
)
from .gate import filter_views, filter_views_topk, pass_through
from .harness import (
    SWEEPS,
    _few_shot,
    base_to_new_pipeline,
    config_digest,
    cross_dataset_pipeline,
    evaluate,
    build_split_teacher,
    generate_dataset,
    ablation_csv,
    run_ablation,
    synthesize,
)
from .imageops import load_ppm, save_ppm
from .scoring import group_by_image, ingest_logits
from .teacher import TeacherModel

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CONFIG_NAME = "config.cfg"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# Run directories


class RunDir:
    """Outputs are written to a temporary directory, renamed on success.

    An existing target is replaced only if it looks like an earlier run
    (it holds ``config.cfg``); anything else is refused.
    """

    def __init__(self, out: str):
        self.out = os.path.abspath(out)
        parent = os.path.dirname(self.out)
        if os.path.exists(self.out):
            if not os.path.isdir(self.out) or (
                os.listdir(self.out) and not os.path.exists(os.path.join(self.out, CONFIG_NAME))
            ):
                raise UsageError(f"refusing to overwrite {self.out}: not an earlier run directory")
        os.makedirs(parent, exist_ok=True)
        self.tmp = tempfile.mkdtemp(prefix=".tmp-" + os.path.basename(self.out) + "-", dir=parent)

    def path(self, name: str) -> str:
        return os.path.join(self.tmp, name)

    def commit(self) -> None:
        old = None
        if os.path.exists(self.out):
            old = self.out + ".old-" + os.path.basename(self.tmp)
            os.rename(self.out, old)
        os.rename(self.tmp, self.out)
        if old:
            shutil.rmtree(old)

    def abort(self) -> None:
        shutil.rmtree(self.tmp, ignore_errors=True)


def _with_run_dir(args, body) -> int:
    run = RunDir(args.out)
    try:
        body(run)
        run.commit()
    except BaseException:
        run.abort()
        raise
    print(run.out)
    return EXIT_OK


def _write_config(run: RunDir, cfg) -> None:
    serialization.write_text_atomic(run.path(CONFIG_NAME), cfgmod.render(cfg))


# ---------------------------------------------------------------------------
# Config handling


def _overrides(args) -> List[tuple]:
    pairs = []
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    if args.seed is not None:
        pairs.append(("seed", str(args.seed)))
    return pairs


def _load_cfg(args):
    return cfgmod.load(args.config, _overrides(args)).resolved()


def _read_manifest(directory: str):
    """(image_key, raster, row) triples from a generated dataset directory."""
    path = os.path.join(directory, "manifest.jsonl")
    if not os.path.isfile(path):
        raise DataError(f"no manifest.jsonl in {directory}")
    out = []
    for row in serialization.read_jsonl(path):
        if "image_key" not in row or "path" not in row:
            raise SchemaError("manifest rows need image_key and path")
        out.append((row["image_key"], load_ppm(os.path.join(directory, row["path"])), row))
    return out


# ---------------------------------------------------------------------------
# Subcommands


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)

    def body(run):
        generate_dataset(cfg.data, run.tmp)
        _write_config(run, cfg)

    return _with_run_dir(args, body)


def cmd_fit_teacher(args) -> int:
    cfg = _load_cfg(args)

    def body(run):
        t, samples, split, label_to_row = build_split_teacher(cfg)
        t.save(run.path("teacher.json"))
        test = [s for s in samples if s.split == "test" and s.label in set(split.all_classes)]
        report = evaluate(None, t, test, split, label_to_row, config_digest(cfg.to_dict()))
        serialization.write_json(run.path("teacher_report.json"), report.to_dict())
        _write_config(run, cfg)

    return _with_run_dir(args, body)


def cmd_augment(args) -> int:
    cfg = _load_cfg(args)
    img = load_ppm(args.image)
    key = args.key or os.path.splitext(os.path.basename(args.image))[0]

    def body(run):
        vs = build_view_set(img, cfg.distill.augment, key, args.epoch, cfg.seed)
        for j, m in enumerate(vs.members):
            save_ppm(m, run.path(f"view_{j:02d}.ppm"))
        serialization.write_jsonl(run.path("provenance.jsonl"), provenance_records(vs, key, args.epoch))
        _write_config(run, cfg)

    return _with_run_dir(args, body)


def cmd_gate(args) -> int:
    cfg = _load_cfg(args)
    groups = group_by_image(ingest_logits(args.logits))
    k = args.topk if args.topk is not None else cfg.distill.gate_topk
    records = []
    for key, vectors in groups.items():
        if not cfg.distill.gate_enabled:
            result = pass_through(None, vectors)
        elif k > 1:
            result = filter_views_topk(None, vectors, k)
        else:
            result = filter_views(None, vectors)
        records.append(result.to_record(key))
    if args.out is None:
        for r in records:
            sys.stdout.write(serialization.dump_line(r) + "\n")
        return EXIT_OK

    def body(run):
        serialization.write_jsonl(run.path("gate.jsonl"), records)
        _write_config(run, cfg)

    return _with_run_dir(args, body)


def _distill_inputs(cfg, data_dir: Optional[str]):
    """Unlabelled (key, raster) pairs: from a dataset directory or the config's synthetic set."""
    if data_dir:
        rows = _read_manifest(data_dir)
        return [(key, img) for key, img, row in rows if row.get("split", "train") == "train"]
    split = cfg.split_plan()
    train = [s for s in synthesize(cfg.data) if s.split == "train"]
    chosen = _few_shot(train, split.all_classes, split.shots, cfg.seed, 3)
    return [(s.image_key, s.raster) for s in chosen]


def cmd_distill(args) -> int:
    cfg = _load_cfg(args)
    t = TeacherModel.load(args.teacher)
    dataset = _distill_inputs(cfg, args.data)

    def body(run):
        student, log = run_distillation(dataset, t, cfg.distill, threads=args.threads)
        student.save(run.path("student.json"))
        log.save(run.path("train_log.jsonl"))
        rep.write_training(log, run.tmp)
        _write_config(run, cfg)

    return _with_run_dir(args, body)


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    t = TeacherModel.load(args.teacher)
    s = StudentModel.load(args.student) if args.student else None
    split = cfg.split_plan()
    if t.c != len(split.all_classes):
        raise DataError(f"teacher has {t.c} classes but the split covers {len(split.all_classes)}")
    label_to_row = {k: i for i, k in enumerate(split.base_classes + split.new_classes)}
    test = [x for x in synthesize(cfg.data) if x.split == "test" and x.label in set(split.all_classes)]
    report = evaluate(s, t, test, split, label_to_row, config_digest(cfg.to_dict()))
    if args.out is None:
        sys.stdout.write(serialization.dumps(report.to_dict()))
        return EXIT_OK

    def body(run):
        serialization.write_json(run.path("report.json"), report.to_dict())
        serialization.write_text_atomic(run.path("metrics.csv"), rep.metrics_csv(report))
        _write_config(run, cfg)

    return _with_run_dir(args, body)


def _write_result(run, result) -> None:
    result.teacher.save(run.path("teacher.json"))
    result.student.save(run.path("student.json"))
    result.log.save(run.path("train_log.jsonl"))
    serialization.write_json(run.path("report.json"), result.report.to_dict())
    serialization.write_text_atomic(run.path("metrics.csv"), rep.metrics_csv(result.report, result.teacher_report))
    rep.write_training(result.log, run.tmp)
    _write_config(run, result.config)


def cmd_base_to_new(args) -> int:
    cfg = _load_cfg(args)
    return _with_run_dir(args, lambda run: _write_result(run, base_to_new_pipeline(cfg, threads=args.threads)))


def cmd_cross_dataset(args) -> int:
    cfg = _load_cfg(args)
    return _with_run_dir(args, lambda run: _write_result(run, cross_dataset_pipeline(cfg, threads=args.threads)))


def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    if args.sweep not in SWEEPS:
        raise UsageError(f"unknown sweep {args.sweep!r}; choose from {', '.join(SWEEPS)}")
    grid = [v.strip() for v in args.grid.split(",") if v.strip()]
    if not grid:
        raise UsageError("--grid must list at least one value")

    def body(run):
        rows = run_ablation(args.sweep, grid, cfg, threads=args.threads)
        serialization.write_text_atomic(run.path("ablation.csv"), ablation_csv(rows))
        serialization.write_jsonl(run.path("reports.jsonl"), [{"value": v, **r.to_dict()} for v, r in rows])
        rep.plot_ablation(rows, args.sweep, run.path("ablation.png"))
        _write_config(run, cfg)

    return _with_run_dir(args, body)


def cmd_selftest(args) -> int:
    from .selftest import run_selftest

    failures = run_selftest(sys.stdout)
    return EXIT_OK if failures == 0 else EXIT_NUMERIC


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable; wins over the file)")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--threads", type=int, default=1, help="worker threads (results do not depend on this)")

    def out_arg(p, required=True):
        p.add_argument("--out", required=required, help="run directory to create")

    parser = _Parser(prog="augpt", description="Augmentation, consensus gating and prompt distillation at desk scale.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    p = sub.add_parser("gen-data", parents=[common], help="write the synthetic dataset (PPM + manifest.jsonl)")
    out_arg(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("fit-teacher", parents=[common], help="fit the base-class teacher and extend it to new classes")
    out_arg(p)
    p.set_defaults(func=cmd_fit_teacher)

    p = sub.add_parser("augment", parents=[common], help="build one view set for a PPM image")
    p.add_argument("--image", required=True, help="input PPM (P6)")
    p.add_argument("--key", help="image key used for seeding (default: file stem)")
    p.add_argument("--epoch", type=int, default=0)
    out_arg(p)
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("gate", parents=[common], help="gate teacher logits from a CSV (image_key,view_index,c0..)")
    p.add_argument("--logits", required=True)
    p.add_argument("--topk", type=int, help="signature length (default: distill.gate_topk)")
    out_arg(p, required=False)
    p.set_defaults(func=cmd_gate)

    p = sub.add_parser("distill", parents=[common], help="distill a student from a saved teacher")
    p.add_argument("--teacher", required=True, help="teacher.json from fit-teacher")
    p.add_argument("--data", help="dataset directory from gen-data (default: the config's synthetic set)")
    out_arg(p)
    p.set_defaults(func=cmd_distill)

    p = sub.add_parser("eval", parents=[common], help="base/new/HM accuracy of a student (or the teacher alone)")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", help="student.json (omit to score the teacher)")
    out_arg(p, required=False)
    p.set_defaults(func=cmd_eval)

    for name, func, text in (
        ("base-to-new", cmd_base_to_new, "full base-to-new experiment"),
        ("cross-dataset", cmd_cross_dataset, "teacher on data.*, student and evaluation on target.*"),
    ):
        p = sub.add_parser(name, parents=[common], help=text)
        out_arg(p)
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", parents=[common], help="one base-to-new run per grid value; CSV + PNG")
    p.add_argument("--sweep", required=True, help="one of: " + ", ".join(SWEEPS))
    p.add_argument("--grid", required=True, help="comma-separated values, e.g. 0,2,5")
    out_arg(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("selftest", help="run the bundled invariant checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalFailure as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        if exc.diagnostics:
            print(serialization.dump_line(exc.diagnostics), file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, SchemaError, AlignmentError, DegenerateFeatureError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ParameterError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
