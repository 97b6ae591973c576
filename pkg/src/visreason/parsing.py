"""Extract structure from free-form Drafter, Revisor and judge replies.

Everything here is a pure function of its input text.
"""

from __future__ import annotations

import enum
import re

from .core import DraftTriple
from .errors import NoQuestionFound, UnparseableVerdict

WORD_LIMIT = 50

_TERMINATORS = "?!.\n"

_REFERENCES_HEADING = re.compile(
    r"^[ \t]*(?:#{1,6}[ \t]*)?(?:\*\*|__)?[ \t]*references[ \t]*(?:\*\*|__)?[ \t]*:?[ \t]*(?:\*\*|__)?[ \t]*$",
    re.IGNORECASE | re.MULTILINE,
)
_REFERENCE_LINE = re.compile(r"^\s*(?:[-*•]\s*)?\[(\d+)\]\s*(.*?)\s*$")

_NUMBER_MARKER = re.compile(r"(?:(?<=\s)|^)(?:\*\*)?([123])[.)](?:\*\*)?(?=\s)", re.MULTILINE)
_MD_HEADER = re.compile(
    r"^[ \t]*(?:#{1,6}[ \t]*(?P<h>[^\n]+?)|\*\*(?P<b>[^*\n]+?)\*\*[ \t]*:?)[ \t]*:?[ \t]*$",
    re.MULTILINE,
)
_KEYWORD_HEADER = re.compile(
    r"^[ \t]*(?:[-*][ \t]+)?(?:\*\*)?[ \t]*"
    r"(?P<k>(?:initial |revised |draft |final )?answer|(?:self[- ])?critique|reflection"
    r"|(?:follow[- ]?up )?question)"
    r"[ \t]*(?:\*\*)?[ \t]*:[ \t]*(?:\*\*)?",
    re.IGNORECASE | re.MULTILINE,
)
_SECTION_LABEL = re.compile(
    r"^\s*(?:\*\*)?\s*(?:(?:initial |revised |draft |final )?answer|(?:self[- ])?critique|reflection"
    r"|(?:follow[- ]?up )?question)\s*(?:\*\*)?\s*:\s*(?:\*\*)?\s*",
    re.IGNORECASE,
)
_QUESTION_DECORATION = re.compile(
    r"^(?:[\s*_#>\-•]+)?(?:(?:follow[- ]?up |next )?question(?: for the vision model)?\s*:\s*(?:\*\*)?\s*)?",
    re.IGNORECASE,
)


# -- sentences and questions --------------------------------------------------


def _sentences(text: str) -> list[tuple[str, str]]:
    """Split ``text`` into (sentence, terminator) spans.

    A sentence is a maximal span ending at ``?``, ``!``, ``.`` or a newline;
    a period between two digits (``2.5``) does not end a sentence. The
    trailing span, if unterminated, has terminator ``""``.
    """
    out = []
    start = 0
    n = len(text)
    for i, ch in enumerate(text):
        if ch not in _TERMINATORS:
            continue
        if ch == "." and 0 < i < n - 1 and text[i - 1].isdigit() and text[i + 1].isdigit():
            continue
        out.append((text[start:i + 1], ch))
        start = i + 1
    if start < n:
        out.append((text[start:], ""))
    return out


def _clean_question(sentence: str) -> str:
    q = _QUESTION_DECORATION.sub("", sentence.strip(), count=1)
    return q.strip()


def extract_question(text: str) -> str:
    """Return the last ``?``-terminated sentence of ``text``, trimmed.

    Leading list bullets, markdown emphasis and a ``Question:`` label are
    dropped from the returned sentence.
    """
    for sentence, term in reversed(_sentences(text)):
        if term != "?":
            continue
        q = _clean_question(sentence)
        if any(c.isalnum() for c in q):
            return q
    raise NoQuestionFound("no question found in text")


# -- words and references -----------------------------------------------------


def split_references(text: str) -> tuple[str, str | None]:
    """Split at the last "References" heading line.

    Returns (body, reference block); the block is None when there is no
    heading.
    """
    last = None
    for last in _REFERENCES_HEADING.finditer(text):
        pass
    if last is None:
        return text, None
    return text[:last.start()], text[last.end():]


def count_words(text: str) -> int:
    body, _ = split_references(text)
    return len(body.split())


def parse_references(block: str) -> tuple[tuple[int, str], ...]:
    refs = []
    for line in block.splitlines():
        m = _REFERENCE_LINE.match(line)
        if m:
            refs.append((int(m.group(1)), m.group(2)))
    return tuple(refs)


# -- sections -----------------------------------------------------------------


def _section_name(title: str) -> str | None:
    t = title.lower()
    if "critique" in t or "reflect" in t:
        return "critique"
    if "question" in t and "answer" not in t:
        return "question"
    if "answer" in t:
        return "answer"
    return None


def _slice_sections(text: str, marks: list[tuple[str, int, int]]) -> dict[str, str]:
    # marks: (name, header_start, content_start), sorted by position
    sections: dict[str, str] = {}
    for idx, (name, _, content_start) in enumerate(marks):
        end = marks[idx + 1][1] if idx + 1 < len(marks) else len(text)
        if name not in sections:
            sections[name] = text[content_start:end].strip()
    return sections


def _numbered_sections(text: str) -> dict[str, str] | None:
    found: list[tuple[str, int, int]] = []
    want = "1"
    for m in _NUMBER_MARKER.finditer(text):
        if m.group(1) == want:
            found.append((want, m.start(), m.end()))
            if want == "3":
                break
            want = str(int(want) + 1)
    if len(found) < 3:
        return None
    names = {"1": "answer", "2": "critique", "3": "question"}
    marks = [(names[k], s, e) for k, s, e in found]
    sections = _slice_sections(text, marks)
    return {k: _SECTION_LABEL.sub("", v, count=1).strip() for k, v in sections.items()}


def _header_sections(text: str) -> dict[str, str] | None:
    marks = []
    for m in _MD_HEADER.finditer(text):
        name = _section_name(m.group("h") or m.group("b") or "")
        if name:
            marks.append((name, m.start(), m.end()))
    return _accept(_slice_sections(text, marks)) if marks else None


def _keyword_sections(text: str) -> dict[str, str] | None:
    marks = []
    for m in _KEYWORD_HEADER.finditer(text):
        name = _section_name(m.group("k"))
        if name:
            marks.append((name, m.start(), m.end()))
    return _accept(_slice_sections(text, marks)) if marks else None


def _accept(sections: dict[str, str]) -> dict[str, str] | None:
    if "answer" in sections and ("critique" in sections or "question" in sections):
        return sections
    return None


def detect_sections(text: str) -> dict[str, str] | None:
    """Apply the layout heuristics in precedence order; first match wins."""
    for heuristic in (_numbered_sections, _header_sections, _keyword_sections):
        sections = heuristic(text)
        if sections is not None:
            return sections
    return None


def _first_paragraph(text: str) -> str:
    for para in re.split(r"\n\s*\n", text):
        if para.strip():
            return para.strip()
    return ""


def _question_from_section(section: str) -> str:
    if "?" in section:
        return extract_question(section)
    q = _clean_question(section.strip().splitlines()[0] if section.strip() else "")
    q = q.rstrip(" .!:")
    if not q:
        raise NoQuestionFound("question section is empty")
    return q + "?"


def _answer_critique_question(text: str) -> tuple[str, str, bool, str]:
    """Shared core of the draft and revision parsers.

    Returns (answer, critique, critique_missing, question); raises
    NoQuestionFound when there is no question anywhere.
    """
    sections = detect_sections(text)
    if sections is None:
        return _first_paragraph(text), "", True, extract_question(text)
    answer = sections.get("answer", "")
    critique = sections.get("critique", "")
    section_q = sections.get("question", "")
    if section_q:
        try:
            question = _question_from_section(section_q)
        except NoQuestionFound:
            question = extract_question(text)
    else:
        question = extract_question(text)
    return answer, critique, "critique" not in sections or not critique, question


def parse_draft(text: str) -> DraftTriple:
    if not text or not text.strip():
        raise NoQuestionFound("empty draft")
    answer, critique, critique_missing, question = _answer_critique_question(text)
    words = count_words(answer)
    return DraftTriple(
        answer=answer,
        critique=critique,
        follow_up_question=question,
        references=(),
        word_count=words,
        critique_missing=critique_missing,
        references_missing=True,
        word_limit_ok=words <= WORD_LIMIT,
    )


def parse_revision(text: str) -> DraftTriple:
    """Best-effort parse of a Revisor reply; never raises.

    Compliance problems surface through the triple's flags instead.
    """
    text = text or ""
    body, block = split_references(text)
    refs = parse_references(block) if block is not None else ()
    question_missing = False
    try:
        answer, critique, critique_missing, question = _answer_critique_question(body)
    except NoQuestionFound:
        sections = detect_sections(body) or {}
        answer = sections.get("answer") or _first_paragraph(body)
        critique = sections.get("critique", "")
        critique_missing = not critique
        question = ""
        question_missing = True
    words = count_words(answer)
    return DraftTriple(
        answer=answer,
        critique=critique,
        follow_up_question=question,
        references=refs,
        word_count=words,
        critique_missing=critique_missing,
        question_missing=question_missing,
        references_missing=not refs,
        references_noncontiguous=bool(refs) and [i for i, _ in refs] != list(range(1, len(refs) + 1)),
        word_limit_ok=words <= WORD_LIMIT,
    )


def format_triple(triple: DraftTriple) -> str:
    """Canonical numbered layout; ``parse_revision`` reads it back unchanged."""
    lines = [
        f"1. {triple.answer}",
        f"2. {triple.critique}",
        f"3. {triple.follow_up_question}",
    ]
    text = "\n".join(lines)
    if triple.references:
        text += "\n\nReferences:\n" + "\n".join(f"- [{i}] {ref}" for i, ref in triple.references)
    return text


# -- judge --------------------------------------------------------------------


class Verdict(str, enum.Enum):
    MATCH = "match"
    NO_MATCH = "no_match"

    def __str__(self) -> str:
        return self.value


_VERDICT_TOKEN = re.compile(r"(?<!\d)[01](?!\d)")


def parse_judge_verdict(text: str) -> Verdict:
    """The first standalone ``0`` or ``1`` (not touching another digit) decides."""
    m = _VERDICT_TOKEN.search(text or "")
    if m is None:
        raise UnparseableVerdict(f"no 0/1 verdict in judge reply {text[:80]!r}")
    return Verdict.MATCH if m.group(0) == "1" else Verdict.NO_MATCH
