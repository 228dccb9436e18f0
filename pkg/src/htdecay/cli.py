"""Command-line front end: audit checkpoints, train, export reports.

Exit codes: 0 success, 2 config/format errors, 3 spectral failures
(module named on stderr), 4 training divergence. All numeric output is
serialized with 17 significant digits so float64 values survive a
round-trip through the CSV/JSON files.

``HTSR_NUMBA`` selects the kernel backend (see :mod:`htdecay.kernels`);
``HTSR_THREADS`` caps the per-module analysis parallelism of ``analyze``
(default: machine cores).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .schedule import (
    PLAN_CSV_HEADER,
    MetricKind,
    SchedulerConfig,
    parse_assign_fn,
    plan_csv_rows,
)
from .spectral import FitMethod, SpectralError, SpectralReport, analyze_module
from .tensor_io import (
    SCHEDULED_KINDS,
    CheckpointError,
    ModuleId,
    ModuleKind,
    WeightMatrix,
    parse_module_name,
    read_checkpoint,
    write_checkpoint,
)
from .train import (
    DivergenceError,
    ModelConfig,
    TrainConfig,
    load_corpus,
    synthetic_corpus,
    train_run,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_SPECTRAL = 3
EXIT_DIVERGED = 4

_FIT_NAMES = {"median": FitMethod.MEDIAN, "fixfinger": FitMethod.FIX_FINGER, "gof": FitMethod.GOODNESS_OF_FIT}

REPORT_GROUPS: list[tuple[str, frozenset[ModuleKind]]] = [
    ("att.q/k", frozenset({ModuleKind.ATT_Q, ModuleKind.ATT_K})),
    ("att.v/o", frozenset({ModuleKind.ATT_V, ModuleKind.ATT_O})),
    ("mlp", frozenset({ModuleKind.MLP_GATE, ModuleKind.MLP_UP, ModuleKind.MLP_DOWN})),
]

ANALYZE_CSV_HEADER = "raw_name,layer,kind,n,m,alpha,k,xmin,spectral_norm,frobenius_norm"
REPORTS_CSV_HEADER = (
    "step,module,layer,kind,alpha,k,xmin,spectral_norm,frobenius_norm,grad_norm"
)
ALPHA_TABLE_HEADER = "step,group,mean_alpha,min_alpha,max_alpha"
DECAY_TABLE_HEADER = "step,module,decay"


def f17(x: float) -> str:
    return format(float(x), ".17g")


def _analysis_workers() -> int:
    env = os.environ.get("HTSR_THREADS", "").strip()
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def cmd_analyze(ckpt_path: str, fit_name: str, out_path: str) -> int:
    fit = _FIT_NAMES[fit_name]
    try:
        ckpt = read_checkpoint(ckpt_path)
    except (CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    entries = [e for e in ckpt.entries if e.id.kind in SCHEDULED_KINDS]
    entries.sort(key=lambda e: e.id.sort_key())

    def work(e: WeightMatrix):
        return analyze_module(e, method=fit)

    with ThreadPoolExecutor(max_workers=_analysis_workers()) as pool:
        results: list[SpectralReport | SpectralError] = list(
            pool.map(lambda e: _try(work, e), entries)
        )
    for res in results:
        if isinstance(res, SpectralError):
            print(f"error: {res}", file=sys.stderr)
            return EXIT_SPECTRAL

    lines = [ANALYZE_CSV_HEADER]
    for e, rep in zip(entries, results):
        lines.append(
            ",".join(
                [
                    e.id.raw_name,
                    str(e.id.layer),
                    e.id.kind.value,
                    str(e.rows),
                    str(e.cols),
                    f17(rep.alpha.alpha),
                    str(rep.alpha.k),
                    f17(rep.alpha.xmin),
                    f17(rep.spectral_norm),
                    f17(rep.frobenius_norm),
                ]
            )
        )
    Path(out_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return EXIT_OK


def _try(fn, arg):
    try:
        return fn(arg)
    except SpectralError as exc:
        return exc


def parse_config(doc: dict) -> tuple[ModelConfig, TrainConfig, dict]:
    """Build configs from the JSON document; raises ValueError on defects."""
    if not isinstance(doc, dict):
        raise ValueError("config root must be a JSON object")
    for section in ("model", "train", "scheduler", "data"):
        if section not in doc or not isinstance(doc[section], dict):
            raise ValueError(f"config is missing the {section!r} object")
    m = doc["model"]
    model_cfg = ModelConfig(
        hidden=int(m["hidden"]),
        intermediate=int(m["intermediate"]),
        heads=int(m["heads"]),
        layers=int(m["layers"]),
        vocab=int(m.get("vocab", 256)),
        context=int(m.get("context", 256)),
    )
    s = doc["scheduler"]
    fit_name = str(s.get("fit", "median"))
    if fit_name not in _FIT_NAMES:
        raise ValueError(f"unknown fit method {fit_name!r}")
    sched_cfg = SchedulerConfig(
        eta=float(s["eta"]),
        assign=parse_assign_fn(s.get("assign", "linear")),
        metric=MetricKind(str(s.get("metric", "pl_alpha_hill"))),
        fit=_FIT_NAMES[fit_name],
        interval=int(s.get("interval", 500)),
        invert_metric=bool(s.get("invert_metric", False)),
        per_layer=bool(s.get("per_layer", False)),
    )
    t = doc["train"]
    train_cfg = TrainConfig(
        lr=float(t["lr"]),
        steps=int(t["steps"]),
        scheduler=sched_cfg,
        warmup_fraction=float(t.get("warmup_fraction", 0.1)),
        batch=int(t.get("batch", 8)),
        seq_len=int(t.get("seq_len", 64)),
        clip=float(t.get("clip", 1.0)),
        seed=int(t.get("seed", 0)),
        optimizer=str(t.get("optimizer", "adam")),
        eval_windows=int(t.get("eval_windows", 64)),
    )
    return model_cfg, train_cfg, doc["data"]


def _load_config_corpus(data_cfg: dict) -> tuple[np.ndarray, int]:
    if "corpus" in data_cfg:
        corpus = load_corpus(str(data_cfg["corpus"]))
    elif "synthetic_bytes" in data_cfg:
        corpus = synthetic_corpus(
            int(data_cfg["synthetic_bytes"]), int(data_cfg.get("synthetic_seed", 0))
        )
    else:
        raise ValueError("data config needs either 'corpus' or 'synthetic_bytes'")
    split = int(data_cfg["split_offset"])
    return corpus, split


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_run_artifacts(out_dir: Path, model, log, config_doc: dict) -> None:
    lines = []
    for rec in log.steps:
        lines.append(
            _canonical_json(
                {"step": rec.step, "loss": rec.loss, "lr": rec.lr, "grad_norm": rec.grad_norm}
            )
        )
    (out_dir / "runlog.jsonl").write_text("\n".join(lines) + ("\n" if lines else ""), "utf-8")

    plan_lines = [PLAN_CSV_HEADER]
    for plan in log.plans:
        plan_lines.extend(plan_csv_rows(plan))
    (out_dir / "plans.csv").write_text("\n".join(plan_lines) + "\n", "utf-8")

    rep_lines = [REPORTS_CSV_HEADER]
    for step, reports in log.reports:
        for mid in sorted(reports, key=ModuleId.sort_key):
            r = reports[mid]
            gtxt = "" if r.grad_norm is None else f17(r.grad_norm)
            rep_lines.append(
                ",".join(
                    [
                        str(step),
                        mid.raw_name,
                        str(mid.layer),
                        mid.kind.value,
                        f17(r.alpha.alpha),
                        str(r.alpha.k),
                        f17(r.alpha.xmin),
                        f17(r.spectral_norm),
                        f17(r.frobenius_norm),
                        gtxt,
                    ]
                )
            )
    (out_dir / "reports.csv").write_text("\n".join(rep_lines) + "\n", "utf-8")

    if model is not None:
        entries = []
        for name in sorted(model.params):
            values = model.params[name]
            if values.ndim == 1:
                values = values.reshape(1, -1)
            entries.append(WeightMatrix(id=parse_module_name(name), values=values.astype(np.float32)))
        write_checkpoint(entries, {"config": _canonical_json(config_doc)}, out_dir / "model.ckpt")


def cmd_train(config_path: str, out_dir_path: str) -> int:
    try:
        doc = json.loads(Path(config_path).read_text("utf-8"))
        model_cfg, train_cfg, data_cfg = parse_config(doc)
        corpus, split = _load_config_corpus(data_cfg)
    except (OSError, ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        print(f"error: bad config: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out_dir = Path(out_dir_path)
    out_dir.mkdir(parents=True, exist_ok=True)

    t0 = time.perf_counter()
    try:
        model, log = train_run(model_cfg, train_cfg, corpus, split)
    except DivergenceError as exc:
        wall = time.perf_counter() - t0
        summary = {"status": "diverged", "abort_step": exc.step, "steps": train_cfg.steps}
        (out_dir / "summary.json").write_text(_canonical_json(summary) + "\n", "utf-8")
        (out_dir / "timing.json").write_text(_canonical_json({"wall_seconds": wall}) + "\n", "utf-8")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except SpectralError as exc:
        print(f"error: spectral analysis failed: {exc}", file=sys.stderr)
        return EXIT_SPECTRAL
    wall = time.perf_counter() - t0

    _write_run_artifacts(out_dir, model, log, doc)
    summary = {
        "status": "ok",
        "steps": train_cfg.steps,
        "final_val_loss": log.final_val_loss,
        "perplexity": log.perplexity,
    }
    (out_dir / "summary.json").write_text(_canonical_json(summary) + "\n", "utf-8")
    (out_dir / "timing.json").write_text(_canonical_json({"wall_seconds": wall}) + "\n", "utf-8")
    return EXIT_OK


def _read_reports_csv(path: Path) -> list[dict]:
    rows = []
    lines = path.read_text("utf-8").splitlines()
    if not lines or lines[0] != REPORTS_CSV_HEADER:
        raise ValueError(f"{path}: unexpected header")
    for line in lines[1:]:
        parts = line.split(",")
        rows.append(
            {
                "step": int(parts[0]),
                "module": parts[1],
                "layer": int(parts[2]),
                "kind": parts[3],
                "alpha": float(parts[4]),
            }
        )
    return rows


def _read_plans_csv(path: Path) -> list[dict]:
    rows = []
    lines = path.read_text("utf-8").splitlines()
    if not lines or lines[0] != PLAN_CSV_HEADER:
        raise ValueError(f"{path}: unexpected header")
    for line in lines[1:]:
        step, module, _metric, decay = line.split(",")
        rows.append({"step": int(step), "module": module, "decay": float(decay)})
    return rows


def build_report_tables(run_dir: Path) -> tuple[list[dict], list[dict]]:
    """Group-level alpha table and per-module decay table for a run."""
    reports = _read_reports_csv(run_dir / "reports.csv")
    plans = _read_plans_csv(run_dir / "plans.csv")
    kind_of = {m.value: m for m in ModuleKind}
    alpha_rows: list[dict] = []
    steps = sorted({r["step"] for r in reports})
    for step in steps:
        at_step = [r for r in reports if r["step"] == step]
        for group_name, kinds in REPORT_GROUPS:
            alphas = [r["alpha"] for r in at_step if kind_of[r["kind"]] in kinds]
            if not alphas:
                continue
            alpha_rows.append(
                {
                    "step": step,
                    "group": group_name,
                    "mean_alpha": sum(alphas) / len(alphas),
                    "min_alpha": min(alphas),
                    "max_alpha": max(alphas),
                }
            )
    return alpha_rows, plans


def cmd_report(run_dir_path: str, fmt: str) -> int:
    run_dir = Path(run_dir_path)
    try:
        alpha_rows, decay_rows = build_report_tables(run_dir)
    except (OSError, ValueError, IndexError) as exc:
        print(f"error: bad run directory: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    if fmt == "json":
        doc = {"alpha_groups": alpha_rows, "decays": decay_rows}
        sys.stdout.write(_canonical_json(doc) + "\n")
        return EXIT_OK

    out = [ALPHA_TABLE_HEADER]
    for r in alpha_rows:
        out.append(
            f"{r['step']},{r['group']},{f17(r['mean_alpha'])},{f17(r['min_alpha'])},{f17(r['max_alpha'])}"
        )
    out.append("")
    out.append(DECAY_TABLE_HEADER)
    for r in decay_rows:
        out.append(f"{r['step']},{r['module']},{f17(r['decay'])}")
    sys.stdout.write("\n".join(out) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="htdecay",
        description="Audit weight-matrix spectra and run decay-scheduled training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    pa = sub.add_parser("analyze", help="per-module spectral audit of a checkpoint")
    pa.add_argument("--ckpt", required=True, help="path to a v1 checkpoint")
    pa.add_argument("--fit", choices=sorted(_FIT_NAMES), default="median")
    pa.add_argument("--out", required=True, help="output CSV path")

    pt = sub.add_parser("train", help="run a training experiment from a JSON config")
    pt.add_argument("--config", required=True, help="path to the JSON config")
    pt.add_argument("--out", required=True, help="output directory")

    pr = sub.add_parser("report", help="tidy tables from a finished run")
    pr.add_argument("--run", required=True, help="directory produced by train")
    pr.add_argument("--format", choices=["csv", "json"], default="csv")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "analyze":
        return cmd_analyze(args.ckpt, args.fit, args.out)
    if args.command == "train":
        return cmd_train(args.config, args.out)
    if args.command == "report":
        return cmd_report(args.run, args.format)
    raise AssertionError(f"unhandled command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
