"""Command-line entry points: ``ask``, ``eval`` and ``report``.

Exit codes: 0 ok, 1 configuration or input error, 2 pipeline error,
3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

import yaml

from . import evalharness
from .core import ImageRef, VqaTask
from .errors import (
    AuditIOError,
    ConfigError,
    EmptyInput,
    GatewayError,
    ImageRefError,
    PhaseError,
    SchemaError,
    ScriptParseError,
)
from .gateway import BackendConfig, Gateway
from .orchestrator import Pipeline, PipelineConfig

log = logging.getLogger("visreason")

EXIT_OK, EXIT_CONFIG, EXIT_PIPELINE, EXIT_IO = 0, 1, 2, 3


@dataclass(frozen=True)
class AppConfig:
    pipeline: PipelineConfig
    dataset_path: Path | None = None
    sample_n: int = 50
    seed: int = 0
    output_dir: Path = Path("runs")
    concurrency_limit: int = 1
    max_in_flight: int = 16
    label: str = "run"
    mode: str = "agent"


def _backend(raw, base: Path, where: str, **defaults) -> BackendConfig:
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping")
    try:
        return BackendConfig.from_dict(raw, base, **defaults)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path: str | Path) -> AppConfig:
    """Read and validate a YAML config file.

    Relative paths inside the file resolve against the file's directory.
    """
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file {path} not found") from None
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    if not isinstance(raw, dict) or not isinstance(raw.get("pipeline"), dict):
        raise ConfigError(f"{path}: needs a 'pipeline' section")
    base = path.parent
    p = raw["pipeline"]
    try:
        for key in ("backbone", "captioner", "suite"):
            if key not in p:
                raise ConfigError(f"pipeline.{key} is required")
        suite = p["suite"]
        if not isinstance(suite, list):
            raise ConfigError("pipeline.suite must be a list")
        pipeline = PipelineConfig(
            backbone=_backend(p["backbone"], base, "pipeline.backbone"),
            captioner=_backend(p["captioner"], base, "pipeline.captioner"),
            suite=tuple(_backend(s, base, f"pipeline.suite[{i}]") for i, s in enumerate(suite)),
            judge=_backend(p["judge"], base, "pipeline.judge", temperature=0.0) if p.get("judge") else None,
            iterations=int(p.get("iterations", 3)),
            context_policy=p.get("context_policy", "full_transcript"),
            inquirer_mode=p.get("inquirer_mode", "extract"),
        )
    except ScriptParseError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None

    def resolve(value):
        if value is None:
            return None
        value = Path(value)
        return value if value.is_absolute() else base / value

    mode = raw.get("mode", "agent")
    if mode not in ("agent", "baseline"):
        raise ConfigError(f"mode must be 'agent' or 'baseline', got {mode!r}")
    cfg = AppConfig(
        pipeline=pipeline,
        dataset_path=resolve(raw.get("dataset_path")),
        sample_n=int(raw.get("sample_n", 50)),
        seed=int(raw.get("seed", 0)),
        output_dir=resolve(raw.get("output_dir", "runs")),
        concurrency_limit=int(raw.get("concurrency_limit", 1)),
        max_in_flight=int(raw.get("max_in_flight", 16)),
        label=str(raw.get("label", "run")),
        mode=mode,
    )
    check_env(cfg)
    return cfg


def check_env(cfg: AppConfig) -> None:
    p = cfg.pipeline
    for b in (p.backbone, p.captioner, *p.suite, *([p.judge] if p.judge else [])):
        if b.auth_token_env and b.auth_token_env not in os.environ:
            raise ConfigError(f"{b.backend_id}: env var {b.auth_token_env} is not set")


def _writable_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {path} is not writable: {exc}") from None
    if not os.access(path, os.W_OK):
        raise ConfigError(f"output directory {path} is not writable")
    return path


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


# -- commands -----------------------------------------------------------------


def cmd_ask(args) -> int:
    try:
        cfg = load_config(args.config)
        out_dir = _writable_dir(Path(args.out) if args.out else cfg.output_dir)
        image = ImageRef.from_path(args.image)
        image.read_bytes()
    except (ConfigError, ImageRefError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S%f")
    task = VqaTask(task_id=f"ask-{stamp}", image=image, question=args.question)
    with Gateway(max_in_flight=cfg.max_in_flight) as gateway:
        try:
            result = Pipeline(cfg.pipeline, gateway).run_task(task)
        except PhaseError as exc:
            _err(str(exc))
            return EXIT_PIPELINE
    audit_path = out_dir / "audit" / f"{task.task_id}.jsonl"
    try:
        result.write_audit(audit_path)
    except AuditIOError as exc:
        print(result.final_answer)
        _err(str(exc))
        return EXIT_IO
    print(result.final_answer)
    print(f"audit: {audit_path}")
    return EXIT_OK


def _make_answer(cfg: AppConfig, gateway: Gateway, audit_dir: Path, timer=None):
    pipeline = Pipeline(cfg.pipeline, gateway, timer=timer or time.perf_counter)

    if cfg.mode == "baseline":
        backend = cfg.pipeline.suite[0]

        def answer(rec: evalharness.EvalRecord):
            reply = gateway.vision_query(backend, rec.image, rec.question)
            return reply.text, reply.latency_s

        return answer

    def answer(rec: evalharness.EvalRecord):
        task = VqaTask(rec.record_id, rec.image, rec.question, rec.question_type, rec.ground_truth)
        result = pipeline.run_task(task)
        result.write_audit(audit_dir / f"{rec.record_id}.jsonl")
        return result.final_answer, result.total_latency_s

    return answer


def cmd_eval(args, on_record_done=None, timer=None) -> int:
    """Evaluate the configured dataset.

    ``on_record_done(record, verdict)`` runs after each record is persisted
    and ``timer`` replaces the wall clock used for runtimes; both exist so
    tests can interrupt a run and get reproducible runtime tables.
    """
    try:
        cfg = load_config(args.config)
        if cfg.pipeline.judge is None:
            raise ConfigError("eval needs pipeline.judge")
        if cfg.dataset_path is None:
            raise ConfigError("eval needs dataset_path")
        out_dir = _writable_dir(Path(args.out) if args.out else cfg.output_dir)
        records = evalharness.load_dataset(cfg.dataset_path)
    except (ConfigError, SchemaError, ImageRefError) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except OSError as exc:
        _err(f"cannot read dataset: {exc}")
        return EXIT_IO

    if args.types:
        wanted = {t.strip() for t in args.types.split(",") if t.strip()}
        records = [r for r in records if r.question_type in wanted]
    seed = cfg.seed if args.seed is None else args.seed
    records = evalharness.sample_per_type(records, cfg.sample_n, seed) if records else []
    if args.limit is not None:
        records = records[: args.limit]
    if not records:
        _err("no records selected for evaluation")
        return EXIT_CONFIG
    concurrency = args.concurrency or cfg.concurrency_limit

    try:
        store = evalharness.EvalStore(out_dir, resume=args.resume)
    except (SchemaError, OSError) as exc:
        _err(f"cannot open evaluation store: {exc}")
        return EXIT_IO
    with Gateway(max_in_flight=cfg.max_in_flight) as gateway:
        answer = _make_answer(cfg, gateway, out_dir / "audit", timer)
        try:
            verdicts = evalharness.run_eval(
                records, answer, cfg.pipeline.judge, store, concurrency, gateway, on_record_done
            )
        except (PhaseError, GatewayError) as exc:
            _err(f"{exc} (progress saved; rerun with --resume)")
            return EXIT_PIPELINE
        except (AuditIOError, OSError) as exc:
            _err(f"{exc} (progress saved; rerun with --resume)")
            return EXIT_IO
    report = evalharness.report_from_store(verdicts, store.runtimes, label=cfg.label)
    try:
        paths = evalharness.write_reports(report, out_dir)
    except OSError as exc:
        _err(str(exc))
        return EXIT_IO
    unparseable = sum(report.unparseable.values())
    print(f"evaluated {len(verdicts)} records; overall accuracy {evalharness.fmt2(report.overall_accuracy)}%")
    if unparseable:
        print(f"unparseable judge replies: {unparseable}")
    for p in paths:
        print(f"report: {p}")
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        verdicts = evalharness.read_verdicts(args.verdicts)
        runtimes = evalharness.read_runtimes(args.runtimes)
        report = evalharness.report_from_store(verdicts, runtimes, label=args.label)
    except (SchemaError, EmptyInput) as exc:
        _err(str(exc))
        return EXIT_CONFIG
    except KeyError as exc:
        _err(f"no runtime for record {exc}")
        return EXIT_CONFIG
    except OSError as exc:
        _err(str(exc))
        return EXIT_IO
    out_dir = Path(args.out) if args.out else Path(args.verdicts).parent
    try:
        paths = evalharness.write_reports(report, out_dir)
    except OSError as exc:
        _err(str(exc))
        return EXIT_IO
    for p in paths:
        print(f"report: {p}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="visreason", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    ask = sub.add_parser("ask", help="answer one question about one image")
    ask.add_argument("image")
    ask.add_argument("question")
    ask.add_argument("--config", required=True)
    ask.add_argument("--out", help="output directory (default: config output_dir)")
    ask.set_defaults(func=cmd_ask)

    ev = sub.add_parser("eval", help="run the benchmark described by a config")
    ev.add_argument("--config", required=True)
    ev.add_argument("--types", help="comma-separated question types to evaluate")
    ev.add_argument("--limit", type=int, help="evaluate at most this many records")
    ev.add_argument("--resume", action="store_true", help="skip records already judged in --out")
    ev.add_argument("--out", help="output directory (default: config output_dir)")
    ev.add_argument("--seed", type=int, help="sampling seed (default: config seed)")
    ev.add_argument("--concurrency", type=int, help="records evaluated in parallel")
    ev.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", help="rebuild report tables from verdict and runtime files")
    rep.add_argument("verdicts")
    rep.add_argument("runtimes")
    rep.add_argument("--out", help="output directory (default: next to the verdicts)")
    rep.add_argument("--label", default="run", help="row label in the tables")
    rep.set_defaults(func=cmd_report)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
