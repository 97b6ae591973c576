import io
import json
from datetime import datetime, timedelta, timezone

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from visreason.core import (
    AgentTurn,
    AuditTrail,
    ConversationMemory,
    FixedClock,
    ImageRef,
    Role,
    VqaTask,
    append_turn,
    format_prompt_time,
    latest_response,
    read_audit,
    write_audit,
)
from visreason.errors import AuditIOError, ImageRefError, NoSuchTurn

from conftest import png_bytes

T0 = datetime(2025, 1, 2, 3, 4, 5, 678000, tzinfo=timezone.utc)


def turn(role, text="r", iteration=0, offset_ms=0, backend="b"):
    start = T0 + timedelta(milliseconds=offset_ms)
    return AgentTurn(role, backend, f"prompt for {role}", text, start, start + timedelta(milliseconds=5), iteration)


@pytest.fixture
def memory(image):
    return ConversationMemory(VqaTask("t1", image, "How many planes?"))


def test_append_to_empty(memory):
    append_turn(memory, turn(Role.CAPTIONER))
    assert len(memory) == 1


def test_append_preserves_order(memory):
    roles = [Role.CAPTIONER, Role.DRAFTER, Role.INQUIRER, Role.VISION_SUITE, Role.REVISOR]
    for i, r in enumerate(roles):
        append_turn(memory, turn(r, offset_ms=i))
    assert [t.role for t in memory.turns] == roles


def test_snapshot_is_not_affected_by_later_appends(memory):
    append_turn(memory, turn(Role.CAPTIONER))
    snap = memory.snapshot()
    append_turn(memory, turn(Role.DRAFTER))
    assert len(snap) == 1
    assert len(memory) == 2


def test_turns_cannot_be_mutated(memory):
    append_turn(memory, turn(Role.CAPTIONER, "cap"))
    with pytest.raises(AttributeError):
        memory.turns[0].response_raw = "changed"
    with pytest.raises(TypeError):
        memory.turns[0] = turn(Role.DRAFTER)
    assert memory.turns[0].response_raw == "cap"


def test_latest_response_returns_most_recent(memory):
    append_turn(memory, turn(Role.REVISOR, "first", 1))
    append_turn(memory, turn(Role.REVISOR, "second", 2))
    assert latest_response(memory, Role.REVISOR) == "second"


def test_latest_response_missing_role(memory):
    append_turn(memory, turn(Role.DRAFTER, "draft"))
    with pytest.raises(NoSuchTurn):
        latest_response(memory, Role.SPOKESMAN)
    assert latest_response(memory, "drafter") == "draft"


def test_turn_rejects_reversed_timestamps():
    with pytest.raises(ValueError):
        AgentTurn(Role.DRAFTER, "b", "p", "r", T0, T0 - timedelta(seconds=1))


def test_timestamps_truncated_to_milliseconds():
    t = AgentTurn(Role.DRAFTER, "b", "p", "r", T0.replace(microsecond=123456), T0.replace(microsecond=123999))
    assert t.started_at.microsecond == 123000
    assert t.ended_at.microsecond == 123000


def test_prompt_time_format():
    assert format_prompt_time(T0) == "2025-01-02 03:04:05 UTC"


def test_fixed_clock_steps():
    clock = FixedClock(T0, timedelta(seconds=1))
    assert clock() == T0
    assert clock() == T0 + timedelta(seconds=1)


def fifteen_turn_memory(image):
    mem = ConversationMemory(VqaTask("task-15", image, "Q?"))
    roles = [Role.CAPTIONER, Role.DRAFTER] + [Role.INQUIRER, Role.VISION_SUITE, Role.VISION_SUITE, Role.REVISOR] * 3 + [Role.SPOKESMAN]
    for i, r in enumerate(roles):
        mem.append(turn(r, f"reply {i}", offset_ms=10 * i))
    return mem


def test_write_audit_record_per_turn(image):
    mem = fifteen_turn_memory(image)
    buf = io.StringIO()
    write_audit(mem, "final", buf, total_latency_s=1.5)
    lines = buf.getvalue().splitlines()
    assert len(lines) == 16
    first = json.loads(lines[0])
    assert list(first) == [
        "task_id", "seq", "role", "backend_id", "iteration",
        "started_at", "ended_at", "prompt_rendered", "response_raw",
    ]
    assert json.loads(lines[-1]) == {"task_id": "task-15", "final_answer": "final", "total_latency_s": 1.5}


def test_audit_round_trip(image, tmp_path):
    mem = fifteen_turn_memory(image)
    trail = write_audit(mem, "final", tmp_path / "a.jsonl")
    assert read_audit(tmp_path / "a.jsonl") == trail
    assert trail.turns == mem.turns


class BrokenSink(io.StringIO):
    def write(self, s):
        raise OSError("disk full")


def test_audit_sink_failure_leaves_memory_unchanged(image):
    mem = fifteen_turn_memory(image)
    before = mem.snapshot()
    with pytest.raises(AuditIOError):
        write_audit(mem, "final", BrokenSink())
    closed = io.StringIO()
    closed.close()
    with pytest.raises(AuditIOError):
        write_audit(mem, "final", closed)
    assert mem.snapshot() == before


def test_audit_unwritable_path(image, tmp_path):
    mem = fifteen_turn_memory(image)
    target = tmp_path / "file"
    target.write_text("x")
    with pytest.raises(AuditIOError):
        write_audit(mem, "final", target / "sub" / "a.jsonl")


text = st.text(st.characters(blacklist_categories=("Cs",)), max_size=40)
ms_datetimes = st.datetimes(
    min_value=datetime(2000, 1, 1), max_value=datetime(2100, 1, 1), timezones=st.just(timezone.utc)
).map(lambda d: d.replace(microsecond=d.microsecond // 1000 * 1000))


@st.composite
def trails(draw):
    n = draw(st.integers(1, 8))
    turns = []
    for _ in range(n):
        start = draw(ms_datetimes)
        dur = draw(st.integers(0, 10_000))
        turns.append(
            AgentTurn(
                draw(st.sampled_from([r for r in Role if r is not Role.JUDGE])),
                draw(text),
                draw(text),
                draw(text),
                start,
                start + timedelta(milliseconds=dur),
                draw(st.integers(0, 5)),
            )
        )
    return AuditTrail(draw(text), tuple(turns), draw(text), draw(st.floats(0, 1e6)))


@settings(max_examples=200)
@given(trails())
def test_audit_round_trip_property(trail):
    assert read_audit(io.StringIO(trail.dumps())) == trail


def test_image_ref_sources(image_path):
    ref = ImageRef.from_path(image_path)
    assert ref.media_type == "png"
    assert ref.read_bytes() == png_bytes()
    assert ImageRef.from_bytes(png_bytes()).media_type == "png"


def test_image_ref_rejects_bad_media_type(image_path):
    with pytest.raises(ImageRefError):
        ImageRef(image_path, "gif")


def test_image_ref_unreadable(tmp_path):
    ref = ImageRef(tmp_path / "missing.png", "png")
    with pytest.raises(ImageRefError):
        ref.read_bytes()
    bogus = tmp_path / "bogus.png"
    bogus.write_bytes(b"not an image")
    with pytest.raises(ImageRefError):
        ImageRef.from_path(bogus).read_bytes()


def test_task_requires_question(image):
    with pytest.raises(ValueError):
        VqaTask("t", image, "  ")
