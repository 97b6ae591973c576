"""VQA evaluation: dataset ingestion, sampling, judging and report tables.

Dataset files are JSON lines with ``image_path``, ``question``,
``ground_truth`` and ``type`` (plus an optional ``id``). Image paths are
resolved relative to the dataset file.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import random
import threading
import time
from collections import defaultdict
from concurrent.futures import FIRST_EXCEPTION, ThreadPoolExecutor, wait
from dataclasses import asdict, dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .core import ImageRef
from .errors import (
    EmptyInput,
    GatewayError,
    ImageRefError,
    SchemaError,
    TypeSetMismatch,
    UnparseableVerdict,
)
from .gateway import BackendConfig, CallTag, Gateway, default_gateway, messages_from_pair
from .parsing import Verdict, parse_judge_verdict
from .prompts import TemplateId

log = logging.getLogger(__name__)

QUESTION_TYPES = (
    "obj_quantity",
    "obj_position",
    "obj_direction",
    "obj_size",
    "reasoning",
    "obj_color",
    "obj_existence",
    "obj_category",
    "obj_shape",
    "scene_type",
)
OVERALL = "overall"


@dataclass(frozen=True)
class EvalRecord:
    record_id: str
    image: ImageRef
    question: str
    ground_truth: str
    question_type: str

    def __post_init__(self):
        if not self.question_type:
            raise ValueError("question_type must be non-empty")
        if not self.ground_truth:
            raise ValueError("ground_truth must be non-empty")


@dataclass(frozen=True)
class MatchVerdict:
    record_id: str
    question_type: str
    prediction: str
    verdict: Verdict
    unparseable: bool = False
    judge_latency_s: float = 0.0
    judge_reply: str = ""

    def __post_init__(self):
        object.__setattr__(self, "verdict", Verdict(self.verdict))
        if self.unparseable and self.verdict is not Verdict.NO_MATCH:
            raise ValueError("an unparseable verdict must score no_match")

    @property
    def matched(self) -> bool:
        return self.verdict is Verdict.MATCH

    def to_dict(self) -> dict:
        d = asdict(self)
        d["verdict"] = self.verdict.value
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "MatchVerdict":
        return cls(
            record_id=str(d["record_id"]),
            question_type=str(d["question_type"]),
            prediction=str(d["prediction"]),
            verdict=Verdict(d["verdict"]),
            unparseable=bool(d.get("unparseable", False)),
            judge_latency_s=float(d.get("judge_latency_s", 0.0)),
            judge_reply=str(d.get("judge_reply", "")),
        )


# -- dataset ------------------------------------------------------------------

_REQUIRED = ("image_path", "question", "ground_truth", "type")


def load_dataset(path: str | Path, check_images: bool = True) -> list[EvalRecord]:
    path = Path(path)
    base = path.parent
    records = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                raw = json.loads(line)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"not a JSON object: {exc.msg}", line_no) from None
            if not isinstance(raw, dict):
                raise SchemaError("record must be a JSON object", line_no)
            for key in _REQUIRED:
                value = raw.get(key)
                if not isinstance(value, str) or not value.strip():
                    raise SchemaError(f"missing or empty field {key!r}", line_no)
            record_id = str(raw.get("id", f"{line_no:06d}"))
            if record_id in seen:
                raise SchemaError(f"duplicate record id {record_id!r}", line_no)
            seen.add(record_id)
            image_path = Path(raw["image_path"])
            if not image_path.is_absolute():
                image_path = base / image_path
            if check_images and not image_path.is_file():
                raise ImageRefError(f"image {image_path} not found", line_no)
            try:
                image = ImageRef.from_path(image_path)
            except ImageRefError as exc:
                raise ImageRefError(str(exc), line_no) from None
            qtype = raw["type"]
            if qtype not in QUESTION_TYPES:
                log.warning("line %d: unknown question type %r", line_no, qtype)
            records.append(EvalRecord(record_id, image, raw["question"], raw["ground_truth"], qtype))
    return records


def sample_per_type(records: Sequence[EvalRecord], n: int, seed: int) -> list[EvalRecord]:
    """Pick ``n`` records per question type, uniformly without replacement.

    Each type draws from its own RNG seeded by (seed, type), so adding or
    dropping a type never changes another type's selection. Types with
    fewer than ``n`` records are taken whole. The result is ordered by
    (type, record_id).
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    by_type: dict[str, list[EvalRecord]] = defaultdict(list)
    for rec in records:
        by_type[rec.question_type].append(rec)
    chosen = []
    for qtype in sorted(by_type):
        pool = sorted(by_type[qtype], key=lambda r: r.record_id)
        if len(pool) < n:
            log.warning("type %s has only %d records (< %d); taking all", qtype, len(pool), n)
            chosen.extend(pool)
            continue
        rng = random.Random(f"{seed}:{qtype}")
        chosen.extend(rng.sample(pool, n))
    return sorted(chosen, key=lambda r: (r.question_type, r.record_id))


# -- judging ------------------------------------------------------------------


def judge(
    record: EvalRecord,
    prediction: str,
    judge_backend: BackendConfig,
    gateway: Gateway | None = None,
) -> MatchVerdict:
    """Ask the judge backend whether ``prediction`` matches the ground truth.

    Empty predictions score no_match without a call. Judge failures and
    replies without a 0/1 token are tallied as unparseable (no_match).
    """
    if not prediction or not prediction.strip():
        return MatchVerdict(record.record_id, record.question_type, prediction or "", Verdict.NO_MATCH)
    gateway = gateway or default_gateway()
    pair = gateway.registry.render(
        TemplateId.JUDGE_USER,
        {"question": record.question, "ground_truth": record.ground_truth, "prediction": prediction},
    )
    t0 = time.perf_counter()
    try:
        reply = gateway.chat(judge_backend, messages_from_pair(pair), CallTag("judge", 0, record.question))
    except GatewayError as exc:
        log.warning("judge failed on %s: %s", record.record_id, exc)
        return MatchVerdict(
            record.record_id, record.question_type, prediction, Verdict.NO_MATCH,
            unparseable=True, judge_latency_s=time.perf_counter() - t0, judge_reply=f"[error] {exc}",
        )
    try:
        verdict, bad = parse_judge_verdict(reply.text), False
    except UnparseableVerdict:
        verdict, bad = Verdict.NO_MATCH, True
    return MatchVerdict(
        record.record_id, record.question_type, prediction, verdict,
        unparseable=bad, judge_latency_s=reply.latency_s, judge_reply=reply.text,
    )


# -- reports ------------------------------------------------------------------


def column_order(types: Iterable[str]) -> list[str]:
    """Known types in table order, then unknown ones alphabetically."""
    types = set(types)
    known = [t for t in QUESTION_TYPES if t in types]
    return known + sorted(types - set(QUESTION_TYPES))


def _mean(values: Iterable[float]) -> float:
    values = list(values)
    return math.fsum(values) / len(values)


@dataclass(frozen=True)
class RunReport:
    """Per-type accuracy (percent) and runtime (minutes) with their means.

    The overall figures are unweighted means over question types, whatever
    the per-type counts.
    """

    per_type_accuracy: Mapping[str, float]
    overall_accuracy: float
    per_type_runtime: Mapping[str, float] = field(default_factory=dict)
    overall_runtime: float | None = None
    counts: Mapping[str, int] = field(default_factory=dict)
    unparseable: Mapping[str, int] = field(default_factory=dict)
    overall_runtime_record_mean: float | None = None
    label: str = "run"

    @classmethod
    def from_cells(
        cls,
        per_type_accuracy: Mapping[str, float],
        per_type_runtime: Mapping[str, float] | None = None,
        counts: Mapping[str, int] | None = None,
        label: str = "run",
        **extra,
    ) -> "RunReport":
        if not per_type_accuracy:
            raise EmptyInput("a report needs at least one question type")
        runtime = dict(per_type_runtime or {})
        if runtime and set(runtime) != set(per_type_accuracy):
            raise TypeSetMismatch("runtime and accuracy cover different types")
        order = column_order(per_type_accuracy)
        return cls(
            per_type_accuracy={t: float(per_type_accuracy[t]) for t in order},
            overall_accuracy=_mean(per_type_accuracy[t] for t in order),
            per_type_runtime={t: float(runtime[t]) for t in order} if runtime else {},
            overall_runtime=_mean(runtime[t] for t in order) if runtime else None,
            counts=dict(counts or {}),
            label=label,
            **extra,
        )

    @property
    def types(self) -> list[str]:
        return column_order(self.per_type_accuracy)

    def accuracy_cells(self) -> dict[str, float]:
        cells = {t: self.per_type_accuracy[t] for t in self.types}
        cells[OVERALL] = self.overall_accuracy
        return cells

    def runtime_cells(self) -> dict[str, float] | None:
        if not self.per_type_runtime:
            return None
        cells = {t: self.per_type_runtime[t] for t in self.types}
        cells[OVERALL] = self.overall_runtime
        return cells

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "per_type_accuracy": dict(self.per_type_accuracy),
            "overall_accuracy": self.overall_accuracy,
            "per_type_runtime": dict(self.per_type_runtime),
            "overall_runtime": self.overall_runtime,
            "overall_runtime_record_mean": self.overall_runtime_record_mean,
            "counts": dict(self.counts),
            "unparseable": dict(self.unparseable),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunReport":
        return cls(
            per_type_accuracy=dict(d["per_type_accuracy"]),
            overall_accuracy=d["overall_accuracy"],
            per_type_runtime=dict(d.get("per_type_runtime") or {}),
            overall_runtime=d.get("overall_runtime"),
            counts=dict(d.get("counts") or {}),
            unparseable=dict(d.get("unparseable") or {}),
            overall_runtime_record_mean=d.get("overall_runtime_record_mean"),
            label=d.get("label", "run"),
        )


def aggregate(
    verdicts: Sequence[MatchVerdict],
    runtimes: Mapping[str, float] | None = None,
    label: str = "run",
) -> RunReport:
    """Build a RunReport from judged records.

    ``runtimes`` maps record_id to wall-clock seconds; per-type runtime is
    the mean in minutes. Both the type-level mean (the table's "overall")
    and the plain record-level mean are kept.
    """
    if not verdicts:
        raise EmptyInput("no verdicts to aggregate")
    by_type: dict[str, list[MatchVerdict]] = defaultdict(list)
    for v in verdicts:
        by_type[v.question_type].append(v)
    accuracy = {t: 100.0 * sum(v.matched for v in vs) / len(vs) for t, vs in by_type.items()}
    counts = {t: len(vs) for t, vs in by_type.items()}
    unparseable = {t: sum(v.unparseable for v in vs) for t, vs in by_type.items()}
    runtime = None
    record_mean = None
    if runtimes is not None:
        missing = [v.record_id for v in verdicts if v.record_id not in runtimes]
        if missing:
            raise SchemaError(f"no runtime for records {missing[:5]}")
        runtime = {t: _mean(runtimes[v.record_id] / 60.0 for v in vs) for t, vs in by_type.items()}
        record_mean = _mean(runtimes[v.record_id] / 60.0 for v in verdicts)
    return RunReport.from_cells(
        accuracy,
        runtime,
        counts,
        label=label,
        unparseable={t: unparseable[t] for t in column_order(unparseable)},
        overall_runtime_record_mean=record_mean,
    )


def _check_types(reports: Sequence[RunReport]) -> None:
    first = set(reports[0].per_type_accuracy)
    for r in reports[1:]:
        if set(r.per_type_accuracy) != first:
            raise TypeSetMismatch(f"report {r.label!r} covers {sorted(r.per_type_accuracy)}, expected {sorted(first)}")


def baseline_average(reports: Sequence[RunReport], label: str = "average") -> RunReport:
    """Cell-wise unweighted mean of reports; overall is recomputed from the cells."""
    if not reports:
        raise EmptyInput("no reports to average")
    _check_types(reports)
    types = reports[0].types
    accuracy = {t: _mean(r.per_type_accuracy[t] for r in reports) for t in types}
    runtime = None
    if all(r.per_type_runtime for r in reports):
        runtime = {t: _mean(r.per_type_runtime[t] for r in reports) for t in types}
    counts = {t: sum(r.counts.get(t, 0) for r in reports) for t in types}
    return RunReport.from_cells(accuracy, runtime, counts, label=label)


def improvement(report_a: RunReport, report_b: RunReport) -> dict[str, float]:
    """Cell-wise ``b - a`` over accuracy cells, including overall."""
    _check_types([report_a, report_b])
    a, b = report_a.accuracy_cells(), report_b.accuracy_cells()
    return {cell: b[cell] - a[cell] for cell in a}


def fmt2(value: float) -> str:
    """Two decimals, halves rounded up, from the shortest decimal repr."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


REPORT_FORMATS = ("table_text", "csv", "structured")
_SUFFIX = {"table_text": ".txt", "csv": ".csv", "structured": ".json"}


def _rows(reports: Sequence[RunReport]) -> tuple[list[str], list[tuple[str, str, list[str]]]]:
    _check_types(reports)
    columns = reports[0].types + [OVERALL]
    rows = []
    for r in reports:
        acc = r.accuracy_cells()
        rows.append((r.label, "accuracy", [fmt2(acc[c]) for c in columns]))
    for r in reports:
        rt = r.runtime_cells()
        if rt is not None:
            rows.append((r.label, "runtime_min", [fmt2(rt[c]) for c in columns]))
    return columns, rows


def render_report(reports: RunReport | Sequence[RunReport], fmt: str) -> str:
    if isinstance(reports, RunReport):
        reports = [reports]
    if not reports:
        raise EmptyInput("no reports to render")
    if fmt == "structured":
        payload = {"reports": [r.to_dict() for r in reports]}
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"
    columns, rows = _rows(reports)
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["model", "metric", *columns])
        for label, metric, cells in rows:
            writer.writerow([label, metric, *cells])
        return buf.getvalue()
    if fmt == "table_text":
        out = []
        for metric, title in (("accuracy", "Accuracy in %"), ("runtime_min", "Runtime in minutes")):
            block = [(label, cells) for label, m, cells in rows if m == metric]
            if not block:
                continue
            header = ["Model", *columns]
            widths = [max(len(header[0]), *(len(label) for label, _ in block))]
            widths += [max(len(c), *(len(cells[i]) for _, cells in block)) for i, c in enumerate(columns)]
            line = lambda cells: "  ".join(
                cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(cells, widths))
            )
            out.append(title)
            out.append(line(header))
            out.append("  ".join("-" * w for w in widths))
            out.extend(line([label, *cells]) for label, cells in block)
            out.append("")
        return "\n".join(out)
    raise ValueError(f"unknown report format {fmt!r}; expected one of {REPORT_FORMATS}")


def emit_report(reports: RunReport | Sequence[RunReport], fmt: str, path: str | Path) -> Path:
    """Write ``reports`` in ``fmt`` to ``path`` (a suffix is added if missing)."""
    path = Path(path)
    if not path.suffix:
        path = path.with_suffix(_SUFFIX[fmt])
    text = render_report(reports, fmt)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path


def read_structured_report(path: str | Path) -> list[RunReport]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return [RunReport.from_dict(d) for d in data["reports"]]


# -- incremental runs ---------------------------------------------------------


def _read_jsonl(path: Path, tolerant: bool) -> list[dict]:
    if not path.exists():
        return []
    out = []
    lines = path.read_text(encoding="utf-8").split("\n")
    while lines and not lines[-1]:
        lines.pop()
    for line_no, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError:
            # a torn final line is what an interrupted append leaves behind
            if tolerant and line_no == len(lines):
                log.warning("%s: dropping incomplete last line", path)
                continue
            raise SchemaError(f"{path.name}: malformed JSON", line_no) from None
        if not isinstance(rec, dict):
            raise SchemaError(f"{path.name}: record must be an object", line_no)
        out.append(rec)
    return out


def read_verdicts(path: str | Path, tolerant: bool = False) -> list[MatchVerdict]:
    out = []
    for i, rec in enumerate(_read_jsonl(Path(path), tolerant), start=1):
        try:
            out.append(MatchVerdict.from_dict(rec))
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"bad verdict record: {exc}", i) from None
    return out


def read_runtimes(path: str | Path, tolerant: bool = False) -> dict[str, float]:
    out = {}
    for i, rec in enumerate(_read_jsonl(Path(path), tolerant), start=1):
        try:
            out[str(rec["record_id"])] = float(rec["runtime_s"])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad runtime record: {exc}", i) from None
    return out


class EvalStore:
    """Append-only verdict and runtime files for one evaluation directory.

    A record counts as done only once both its runtime line and its verdict
    line are on disk. Opening with ``resume=True`` drops anything else and
    rewrites the two files consistently; ``resume=False`` starts afresh.
    """

    VERDICTS = "verdicts.jsonl"
    RUNTIMES = "runtimes.jsonl"

    def __init__(self, out_dir: str | Path, resume: bool = False):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.verdicts_path = self.out_dir / self.VERDICTS
        self.runtimes_path = self.out_dir / self.RUNTIMES
        self._lock = threading.Lock()
        self.verdicts: dict[str, MatchVerdict] = {}
        self.runtimes: dict[str, float] = {}
        if resume:
            verdicts = {v.record_id: v for v in read_verdicts(self.verdicts_path, tolerant=True)}
            runtimes = read_runtimes(self.runtimes_path, tolerant=True)
            done = set(verdicts) & set(runtimes)
            self.verdicts = {k: verdicts[k] for k in sorted(done)}
            self.runtimes = {k: runtimes[k] for k in sorted(done)}
        self._rewrite()

    def _rewrite(self) -> None:
        for path, lines in (
            (self.runtimes_path, [json.dumps({"record_id": k, "runtime_s": v}) for k, v in self.runtimes.items()]),
            (self.verdicts_path, [json.dumps(v.to_dict(), ensure_ascii=False) for v in self.verdicts.values()]),
        ):
            tmp = path.with_suffix(".tmp")
            tmp.write_text("".join(ln + "\n" for ln in lines), encoding="utf-8")
            tmp.replace(path)

    def done(self, record_id: str) -> bool:
        return record_id in self.verdicts

    def add(self, verdict: MatchVerdict, runtime_s: float) -> None:
        with self._lock:
            with open(self.runtimes_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"record_id": verdict.record_id, "runtime_s": runtime_s}) + "\n")
            with open(self.verdicts_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(verdict.to_dict(), ensure_ascii=False) + "\n")
            self.runtimes[verdict.record_id] = runtime_s
            self.verdicts[verdict.record_id] = verdict


def run_eval(
    records: Sequence[EvalRecord],
    answer,
    judge_backend: BackendConfig,
    store: EvalStore,
    concurrency: int = 1,
    gateway: Gateway | None = None,
    on_record_done=None,
) -> list[MatchVerdict]:
    """Answer and judge every record not already in ``store``.

    ``answer(record)`` returns ``(prediction, runtime_s)``. Records run on
    up to ``concurrency`` threads; the first failure cancels what has not
    started and is re-raised, leaving finished records persisted. Returns
    the verdicts of ``records`` in input order.
    """
    todo = [r for r in records if not store.done(r.record_id)]
    log.info("%d records to evaluate, %d already done", len(todo), len(records) - len(todo))

    stop = threading.Event()

    def work(rec: EvalRecord) -> None:
        if stop.is_set():
            return
        try:
            prediction, runtime_s = answer(rec)
            verdict = judge(rec, prediction, judge_backend, gateway)
            store.add(verdict, runtime_s)
            if on_record_done is not None:
                on_record_done(rec, verdict)
        except BaseException:
            stop.set()
            raise

    if todo:
        pool = ThreadPoolExecutor(max_workers=max(1, concurrency), thread_name_prefix="eval")
        try:
            futures = [pool.submit(work, r) for r in todo]
            wait(futures, return_when=FIRST_EXCEPTION)
            for f in futures:
                if f.done() and f.exception() is not None:
                    raise f.exception()
        finally:
            pool.shutdown(wait=True, cancel_futures=True)
    return [store.verdicts[r.record_id] for r in records]


def report_from_store(verdicts: Sequence[MatchVerdict], runtimes: Mapping[str, float], label: str = "run") -> RunReport:
    ordered = sorted(verdicts, key=lambda v: (v.question_type, v.record_id))
    return aggregate(ordered, {v.record_id: runtimes[v.record_id] for v in ordered}, label=label)


def write_reports(report: RunReport | Sequence[RunReport], out_dir: str | Path, stem: str = "report") -> list[Path]:
    out_dir = Path(out_dir)
    return [emit_report(report, fmt, out_dir / f"{stem}{_SUFFIX[fmt]}") for fmt in REPORT_FORMATS]
