"""Prompt template registry and renderer.

Templates live as text assets in ``templates/``, one file per id. Each file
starts with a two-line header::

    id: judge_user
    placeholders: question, ground_truth, prediction

followed by the template body. Placeholders are ``{name}`` tokens; the
``<image>`` token marks where the image attachment goes.
"""

from __future__ import annotations

import enum
import re
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping

from .errors import MalformedTemplate, MissingBinding, UnknownPlaceholder, UnknownTemplate

RECOGNIZED_PLACEHOLDERS = frozenset(
    {"time", "question", "ground_truth", "prediction", "inquirer_question", "image"}
)
IMAGE_TOKEN = "<image>"

_BRACE_RE = re.compile(r"\{([^{}]*)\}")
_NAME_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


class TemplateId(str, enum.Enum):
    CAPTIONER_USER = "captioner_user"
    DRAFTER_SYSTEM = "drafter_system"
    DRAFTER_USER = "drafter_user"
    INQUIRER_USER = "inquirer_user"
    VISION_USER = "vision_user"
    REVISOR_SYSTEM = "revisor_system"
    REVISOR_USER = "revisor_user"
    SPOKESMAN_SYSTEM = "spokesman_system"
    SPOKESMAN_USER = "spokesman_user"
    JUDGE_USER = "judge_user"

    def __str__(self) -> str:
        return self.value

    @property
    def is_system(self) -> bool:
        return self.value.endswith("_system")


# User templates whose role also carries a system prompt.
SYSTEM_FOR = {
    TemplateId.DRAFTER_USER: TemplateId.DRAFTER_SYSTEM,
    TemplateId.REVISOR_USER: TemplateId.REVISOR_SYSTEM,
    TemplateId.SPOKESMAN_USER: TemplateId.SPOKESMAN_SYSTEM,
}


@dataclass(frozen=True)
class PromptPair:
    """Rendered prompt. ``image_slot`` is a character offset into ``user_text``."""

    system_text: str | None
    user_text: str
    image_slot: int | None = None


def scan_placeholders(body: str) -> frozenset[str]:
    """Return the placeholder names used in ``body``.

    Raises MalformedTemplate on any brace token that is not a recognized
    placeholder, and on more than one image token.
    """
    names = set()
    for match in _BRACE_RE.finditer(body):
        name = match.group(1)
        if not _NAME_RE.fullmatch(name) or name not in RECOGNIZED_PLACEHOLDERS:
            raise MalformedTemplate(f"unrecognized placeholder {match.group(0)!r}")
        if name == "image":
            raise MalformedTemplate("the image position is written <image>, not {image}")
        names.add(name)
    n_images = body.count(IMAGE_TOKEN)
    if n_images > 1:
        raise MalformedTemplate("a template may hold at most one <image> token")
    if n_images:
        names.add("image")
    return frozenset(names)


def _parse_asset(text: str, source: str) -> tuple[str, frozenset[str], str]:
    lines = text.split("\n", 2)
    if len(lines) < 3 or not lines[0].startswith("id:") or not lines[1].startswith("placeholders:"):
        raise MalformedTemplate(f"{source}: missing 'id:' / 'placeholders:' header")
    tid = lines[0][len("id:"):].strip()
    declared = frozenset(
        p.strip() for p in lines[1][len("placeholders:"):].split(",") if p.strip()
    )
    body = lines[2]
    if body.endswith("\n"):
        body = body[:-1]
    return tid, declared, body


class TemplateRegistry:
    """Immutable mapping from TemplateId to template body."""

    def __init__(self, bodies: Mapping[TemplateId | str, str]):
        self._bodies: dict[TemplateId, str] = {}
        for key, body in bodies.items():
            try:
                tid = TemplateId(key)
            except ValueError:
                raise UnknownTemplate(key) from None
            self._bodies[tid] = body
        missing = [t.value for t in TemplateId if t not in self._bodies]
        if missing:
            raise MalformedTemplate(f"registry lacks templates: {', '.join(missing)}")

    @classmethod
    def load(cls, directory: str | Path | None = None) -> "TemplateRegistry":
        if directory is None:
            root = resources.files(__package__).joinpath("templates")
        else:
            root = Path(directory)
        bodies = {}
        for tid in TemplateId:
            entry = root.joinpath(f"{tid.value}.txt")
            if not entry.is_file():
                raise MalformedTemplate(f"template asset {tid.value}.txt not found")
            file_id, declared, body = _parse_asset(entry.read_text(encoding="utf-8"), entry.name)
            if file_id != tid.value:
                raise MalformedTemplate(f"{entry.name}: header id {file_id!r} does not match file name")
            found = scan_placeholders(body)
            if found != declared:
                raise MalformedTemplate(
                    f"{entry.name}: header declares {sorted(declared)}, body uses {sorted(found)}"
                )
            bodies[tid] = body
        return cls(bodies)

    def body(self, tid: TemplateId | str) -> str:
        try:
            return self._bodies[TemplateId(tid)]
        except ValueError:
            raise UnknownTemplate(str(tid)) from None

    def placeholders(self, tid: TemplateId | str) -> frozenset[str]:
        return scan_placeholders(self.body(tid))

    def validate(self) -> list[tuple[TemplateId, frozenset[str]]]:
        return [(tid, scan_placeholders(self._bodies[tid])) for tid in TemplateId]

    def _fill(self, tid: TemplateId, bindings: Mapping[str, object]) -> tuple[str, int | None]:
        body = self._bodies[tid]
        for name in sorted(scan_placeholders(body)):
            if name not in bindings:
                raise MissingBinding(name)

        # one pass, so bound values are never rescanned for placeholders
        text = _BRACE_RE.sub(lambda m: str(bindings[m.group(1)]), body)
        slot = None
        pos = text.find(IMAGE_TOKEN)
        if pos >= 0:
            end = pos + len(IMAGE_TOKEN)
            if text[end:end + 1] == " ":
                end += 1
            text = text[:pos] + text[end:]
            slot = pos
        return text, slot

    def render(self, tid: TemplateId | str, bindings: Mapping[str, object] | None = None) -> PromptPair:
        """Substitute ``bindings`` into template ``tid``.

        A ``*_user`` id renders together with its role's system template when
        the role has one; ids with no system prompt give ``system_text=None``.
        A ``*_system`` id renders into ``system_text`` alone.
        """
        try:
            tid = TemplateId(tid)
        except ValueError:
            raise UnknownTemplate(str(tid)) from None
        bindings = dict(bindings or {})
        unknown = set(bindings) - RECOGNIZED_PLACEHOLDERS
        if unknown:
            raise UnknownPlaceholder(", ".join(sorted(unknown)))

        if tid.is_system:
            text, _ = self._fill(tid, bindings)
            return PromptPair(system_text=text, user_text="")
        system_text = None
        if tid in SYSTEM_FOR:
            system_text, _ = self._fill(SYSTEM_FOR[tid], bindings)
        user_text, slot = self._fill(tid, bindings)
        return PromptPair(system_text=system_text, user_text=user_text, image_slot=slot)


@lru_cache(maxsize=1)
def default_registry() -> TemplateRegistry:
    return TemplateRegistry.load()


def render(tid: TemplateId | str, bindings: Mapping[str, object] | None = None) -> PromptPair:
    return default_registry().render(tid, bindings)


def validate_registry(registry: TemplateRegistry | None = None) -> list[tuple[TemplateId, frozenset[str]]]:
    return (registry or default_registry()).validate()
