"""Domain types, shared conversation memory and the audit trail."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Callable, IO, Iterable, Union

from .errors import AuditIOError, ImageRefError, NoSuchTurn

MEDIA_TYPES = ("png", "jpeg", "webp", "bmp")

_EXT_TO_MEDIA = {
    ".png": "png",
    ".jpg": "jpeg",
    ".jpeg": "jpeg",
    ".webp": "webp",
    ".bmp": "bmp",
}


class Role(str, enum.Enum):
    CAPTIONER = "captioner"
    DRAFTER = "drafter"
    INQUIRER = "inquirer"
    VISION_SUITE = "vision_suite"
    REVISOR = "revisor"
    SPOKESMAN = "spokesman"
    JUDGE = "judge"

    def __str__(self) -> str:
        return self.value


# -- clock --------------------------------------------------------------------

Clock = Callable[[], datetime]


def truncate_ms(ts: datetime) -> datetime:
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    ts = ts.astimezone(timezone.utc)
    return ts.replace(microsecond=ts.microsecond // 1000 * 1000)


def utc_now() -> datetime:
    return truncate_ms(datetime.now(timezone.utc))


class FixedClock:
    """Clock that returns ``start`` and advances by ``step`` on every read.

    With the default ``step`` of zero it always returns the same instant,
    which makes rendered ``{time}`` bindings reproducible in tests.
    """

    def __init__(self, start: datetime, step: timedelta = timedelta(0)):
        self._now = truncate_ms(start)
        self._step = step

    def __call__(self) -> datetime:
        now = self._now
        self._now = truncate_ms(self._now + self._step)
        return now


def format_prompt_time(ts: datetime) -> str:
    """Render ``ts`` the way the ``{time}`` placeholder expects it."""
    return truncate_ms(ts).strftime("%Y-%m-%d %H:%M:%S UTC")


def format_timestamp(ts: datetime) -> str:
    ts = truncate_ms(ts)
    return ts.strftime("%Y-%m-%dT%H:%M:%S.") + f"{ts.microsecond // 1000:03d}Z"


def parse_timestamp(text: str) -> datetime:
    return datetime.strptime(text, "%Y-%m-%dT%H:%M:%S.%fZ").replace(tzinfo=timezone.utc)


# -- images -------------------------------------------------------------------


def sniff_media_type(data: bytes) -> str | None:
    if data.startswith(b"\x89PNG\r\n\x1a\n"):
        return "png"
    if data.startswith(b"\xff\xd8\xff"):
        return "jpeg"
    if len(data) >= 12 and data[:4] == b"RIFF" and data[8:12] == b"WEBP":
        return "webp"
    if data.startswith(b"BM"):
        return "bmp"
    return None


@dataclass(frozen=True)
class ImageRef:
    """An image given either as a file path or as raw bytes."""

    source: Union[Path, bytes]
    media_type: str

    def __post_init__(self):
        if isinstance(self.source, str):
            object.__setattr__(self, "source", Path(self.source))
        if not isinstance(self.source, (Path, bytes)):
            raise ImageRefError(f"unsupported image source type {type(self.source).__name__}")
        if self.media_type not in MEDIA_TYPES:
            raise ImageRefError(f"media_type must be one of {MEDIA_TYPES}, got {self.media_type!r}")

    @classmethod
    def from_path(cls, path: Union[str, os.PathLike]) -> "ImageRef":
        path = Path(path)
        media = _EXT_TO_MEDIA.get(path.suffix.lower())
        if media is None:
            try:
                with open(path, "rb") as fh:
                    media = sniff_media_type(fh.read(16))
            except OSError as exc:
                raise ImageRefError(f"cannot read image {path}: {exc}") from exc
        if media is None:
            raise ImageRefError(f"cannot determine image format of {path}")
        return cls(path, media)

    @classmethod
    def from_bytes(cls, data: bytes, media_type: str | None = None) -> "ImageRef":
        media_type = media_type or sniff_media_type(data)
        if media_type is None:
            raise ImageRefError("cannot determine image format from bytes")
        return cls(bytes(data), media_type)

    @property
    def path(self) -> Path | None:
        return self.source if isinstance(self.source, Path) else None

    def read_bytes(self) -> bytes:
        """Load the payload and check that it looks like the declared format."""
        if isinstance(self.source, bytes):
            data = self.source
        else:
            try:
                data = self.source.read_bytes()
            except OSError as exc:
                raise ImageRefError(f"cannot read image {self.source}: {exc}") from exc
        if sniff_media_type(data) is None:
            raise ImageRefError(f"payload of {self.describe()} is not a png/jpeg/webp/bmp image")
        return data

    def describe(self) -> str:
        if isinstance(self.source, Path):
            return str(self.source)
        return f"<{len(self.source)} bytes of {self.media_type}>"

    def to_json(self) -> str:
        return self.describe()


# -- tasks and turns ----------------------------------------------------------


@dataclass(frozen=True)
class VqaTask:
    task_id: str
    image: ImageRef
    question: str
    question_type: str | None = None
    ground_truth: str | None = None

    def __post_init__(self):
        if not self.question or not self.question.strip():
            raise ValueError("question must be non-empty")


@dataclass(frozen=True)
class AgentTurn:
    """One backend call (or local step) made while answering a task."""

    role: Role
    backend_id: str
    prompt_rendered: str
    response_raw: str
    started_at: datetime
    ended_at: datetime
    iteration: int = 0

    def __post_init__(self):
        object.__setattr__(self, "role", Role(self.role))
        object.__setattr__(self, "started_at", truncate_ms(self.started_at))
        object.__setattr__(self, "ended_at", truncate_ms(self.ended_at))
        if self.ended_at < self.started_at:
            raise ValueError("ended_at precedes started_at")
        if self.iteration < 0:
            raise ValueError("iteration must be >= 0")

    def to_record(self, task_id: str, seq: int) -> dict:
        return {
            "task_id": task_id,
            "seq": seq,
            "role": self.role.value,
            "backend_id": self.backend_id,
            "iteration": self.iteration,
            "started_at": format_timestamp(self.started_at),
            "ended_at": format_timestamp(self.ended_at),
            "prompt_rendered": self.prompt_rendered,
            "response_raw": self.response_raw,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AgentTurn":
        return cls(
            role=Role(rec["role"]),
            backend_id=rec["backend_id"],
            prompt_rendered=rec["prompt_rendered"],
            response_raw=rec["response_raw"],
            started_at=parse_timestamp(rec["started_at"]),
            ended_at=parse_timestamp(rec["ended_at"]),
            iteration=int(rec["iteration"]),
        )


@dataclass
class ConversationMemory:
    """Append-only transcript shared by every role working on one task.

    Turns are exposed as tuples, so a snapshot taken before an append keeps
    its old length.
    """

    task: VqaTask
    _turns: list = field(default_factory=list, repr=False)

    @property
    def turns(self) -> tuple[AgentTurn, ...]:
        return tuple(self._turns)

    def snapshot(self) -> tuple[AgentTurn, ...]:
        return tuple(self._turns)

    def append(self, turn: AgentTurn) -> None:
        if not isinstance(turn, AgentTurn):
            raise TypeError(f"expected AgentTurn, got {type(turn).__name__}")
        self._turns.append(turn)

    def __len__(self) -> int:
        return len(self._turns)

    def __iter__(self):
        return iter(tuple(self._turns))

    def by_role(self, role: Role | str) -> list[AgentTurn]:
        role = Role(role)
        return [t for t in self._turns if t.role is role]


def append_turn(memory: ConversationMemory, turn: AgentTurn) -> ConversationMemory:
    memory.append(turn)
    return memory


def latest_turn(memory: ConversationMemory, *roles: Role | str) -> AgentTurn:
    wanted = {Role(r) for r in roles}
    for turn in reversed(memory.turns):
        if turn.role in wanted:
            return turn
    names = ", ".join(sorted(r.value for r in wanted))
    raise NoSuchTurn(f"no turn with role {names} in memory of task {memory.task.task_id!r}")


def latest_response(memory: ConversationMemory, role: Role | str) -> str:
    return latest_turn(memory, role).response_raw


# -- draft structure ----------------------------------------------------------


@dataclass(frozen=True)
class DraftTriple:
    """Structured reading of a Drafter or Revisor reply.

    ``follow_up_question`` is empty only when the reply had no usable
    question and ``question_missing`` is set; the other flags describe
    template compliance rather than errors.
    """

    answer: str
    critique: str
    follow_up_question: str
    references: tuple[tuple[int, str], ...] = ()
    word_count: int = 0
    critique_missing: bool = False
    question_missing: bool = False
    references_missing: bool = False
    references_noncontiguous: bool = False
    word_limit_ok: bool = True


# -- audit --------------------------------------------------------------------


@dataclass(frozen=True)
class AuditTrail:
    task_id: str
    turns: tuple[AgentTurn, ...]
    final_answer: str
    total_latency_s: float

    def records(self) -> list[dict]:
        out = [t.to_record(self.task_id, seq) for seq, t in enumerate(self.turns, start=1)]
        out.append(
            {
                "task_id": self.task_id,
                "final_answer": self.final_answer,
                "total_latency_s": self.total_latency_s,
            }
        )
        return out

    def dumps(self) -> str:
        return "".join(json.dumps(r, ensure_ascii=False) + "\n" for r in self.records())


def _span_seconds(turns: Iterable[AgentTurn]) -> float:
    turns = list(turns)
    if not turns:
        return 0.0
    start = min(t.started_at for t in turns)
    end = max(t.ended_at for t in turns)
    return (end - start).total_seconds()


def write_audit(
    memory: ConversationMemory,
    final_answer: str,
    sink: Union[IO[str], str, os.PathLike],
    total_latency_s: float | None = None,
) -> AuditTrail:
    """Serialize ``memory`` as JSON lines, one per turn plus a summary line.

    ``sink`` is either an open text stream or a path. The payload is built
    before anything is written, and any failure surfaces as AuditIOError.
    """
    if len(memory) == 0:
        raise ValueError("cannot write an audit trail for an empty memory")
    turns = memory.snapshot()
    if total_latency_s is None:
        total_latency_s = _span_seconds(turns)
    trail = AuditTrail(memory.task.task_id, turns, final_answer, float(total_latency_s))
    payload = trail.dumps()
    try:
        if isinstance(sink, (str, os.PathLike)):
            Path(sink).parent.mkdir(parents=True, exist_ok=True)
            with open(sink, "w", encoding="utf-8") as fh:
                fh.write(payload)
        else:
            sink.write(payload)
            flush = getattr(sink, "flush", None)
            if flush is not None:
                flush()
    except (OSError, ValueError) as exc:
        raise AuditIOError(f"cannot write audit trail: {exc}") from exc
    return trail


def read_audit(source: Union[IO[str], str, os.PathLike]) -> AuditTrail:
    try:
        if isinstance(source, (str, os.PathLike)):
            text = Path(source).read_text(encoding="utf-8")
        else:
            text = source.read()
    except (OSError, ValueError) as exc:
        raise AuditIOError(f"cannot read audit trail: {exc}") from exc
    lines = [ln for ln in text.split("\n") if ln.strip()]
    if not lines:
        raise AuditIOError("audit trail is empty")
    try:
        records = [json.loads(ln) for ln in lines]
    except json.JSONDecodeError as exc:
        raise AuditIOError(f"malformed audit record: {exc}") from exc
    summary = records[-1]
    if "final_answer" not in summary:
        raise AuditIOError("audit trail lacks its summary record")
    turns = []
    for expected_seq, rec in enumerate(records[:-1], start=1):
        if rec.get("seq") != expected_seq:
            raise AuditIOError(f"audit record out of sequence: expected seq {expected_seq}")
        turns.append(AgentTurn.from_record(rec))
    return AuditTrail(
        task_id=summary["task_id"],
        turns=tuple(turns),
        final_answer=summary["final_answer"],
        total_latency_s=float(summary["total_latency_s"]),
    )
