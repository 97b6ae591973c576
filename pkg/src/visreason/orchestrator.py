"""The Think-Critique-Act pipeline.

A task runs as::

    captioner -> drafter -> (inquirer -> vision suite -> revisor) x K -> spokesman

Every backend call, and the local Inquirer step, is appended to the task's
ConversationMemory as one AgentTurn. Memory keeps raw model text; the
parsers re-derive structure whenever a phase needs it.
"""

from __future__ import annotations

import enum
import logging
import time
from typing import Callable
from dataclasses import dataclass, field
from datetime import timedelta

from . import parsing
from .core import (
    AgentTurn,
    AuditTrail,
    Clock,
    ConversationMemory,
    Role,
    VqaTask,
    format_prompt_time,
    latest_turn,
    truncate_ms,
    utc_now,
    write_audit,
)
from .errors import ConfigError, MissingContext, NoSuchTurn, PhaseError, VisReasonError
from .gateway import (
    ASK_VISION_TOOL,
    BackendConfig,
    BackendKind,
    CallTag,
    ChatMessage,
    Gateway,
    assistant,
    default_gateway,
    system,
    tool_question,
    transcript_text,
    user,
)
from .prompts import TemplateId

log = logging.getLogger(__name__)

LOCAL_BACKEND = "local"


class ContextPolicy(str, enum.Enum):
    FULL_TRANSCRIPT = "full_transcript"
    LAST_ROUND = "last_round"


class InquirerMode(str, enum.Enum):
    EXTRACT = "extract"
    MODEL = "model"


@dataclass(frozen=True)
class PipelineConfig:
    backbone: BackendConfig
    suite: tuple[BackendConfig, ...]
    captioner: BackendConfig
    judge: BackendConfig | None = None
    iterations: int = 3
    context_policy: ContextPolicy = ContextPolicy.FULL_TRANSCRIPT
    inquirer_mode: InquirerMode = InquirerMode.EXTRACT

    def __post_init__(self):
        object.__setattr__(self, "suite", tuple(self.suite))
        object.__setattr__(self, "context_policy", ContextPolicy(self.context_policy))
        object.__setattr__(self, "inquirer_mode", InquirerMode(self.inquirer_mode))
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if not self.suite:
            raise ConfigError("the vision suite must hold at least one backend")
        if self.captioner.kind not in (BackendKind.CHAT_VISION, BackendKind.MOCK):
            raise ConfigError("the captioner must be a chat_vision backend")
        if self.backbone.kind not in (BackendKind.CHAT_TEXT, BackendKind.MOCK):
            raise ConfigError("the backbone must be a chat_text backend")
        for cfg in self.suite:
            if cfg.kind not in (BackendKind.CHAT_VISION, BackendKind.MOCK):
                raise ConfigError(f"suite backend {cfg.backend_id} must be chat_vision")
        ids = [c.backend_id for c in self.suite]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"suite backend ids must be unique, got {ids}")
        self._check_mock_coverage()

    def _check_mock_coverage(self) -> None:
        needs = [
            (self.captioner, [Role.CAPTIONER]),
            (self.backbone, [Role.DRAFTER, Role.REVISOR, Role.SPOKESMAN]),
        ]
        if self.inquirer_mode is InquirerMode.MODEL:
            needs.append((self.backbone, [Role.INQUIRER]))
        needs += [(cfg, [Role.VISION_SUITE]) for cfg in self.suite]
        if self.judge is not None:
            needs.append((self.judge, [Role.JUDGE]))
        for cfg, roles in needs:
            if cfg.script is None:
                continue
            for role in roles:
                if not cfg.script.covers(role.value):
                    raise ConfigError(
                        f"mock script for {cfg.backend_id} has no replies for role {role.value!r}"
                    )

    @property
    def expected_turns(self) -> int:
        return 2 + self.iterations * (1 + len(self.suite) + 1) + 1


@dataclass
class PipelineResult:
    final_answer: str
    memory: ConversationMemory
    per_phase_latency: dict[str, float]
    iterations_run: int
    total_latency_s: float
    revisions: list = field(default_factory=list)

    def write_audit(self, sink) -> AuditTrail:
        return write_audit(self.memory, self.final_answer, sink, self.total_latency_s)


def _tool_label(k: int, backend_id: str) -> str:
    return f"Tool output [{k}] ({backend_id})"


class Pipeline:
    """Runs tasks against one PipelineConfig.

    ``clock`` feeds both the turn timestamps and the ``{time}`` binding.
    ``timer`` is a monotonic seconds counter used for the latency figures.
    """

    def __init__(
        self,
        cfg: PipelineConfig,
        gateway: Gateway | None = None,
        clock: Clock = utc_now,
        timer: Callable[[], float] = time.perf_counter,
    ):
        self.cfg = cfg
        self.gateway = gateway or default_gateway()
        self.clock = clock
        self.timer = timer
        self.registry = self.gateway.registry

    # -- transcript views -----------------------------------------------------

    def _rounds(self, memory: ConversationMemory) -> list[dict]:
        """Group loop turns by iteration: inquirer, suite turns, revisor."""
        rounds: dict[int, dict] = {}
        for t in memory.turns:
            if t.role in (Role.INQUIRER, Role.VISION_SUITE, Role.REVISOR):
                r = rounds.setdefault(t.iteration, {"inquirer": None, "evidence": [], "revisor": None})
                if t.role is Role.INQUIRER:
                    r["inquirer"] = t
                elif t.role is Role.VISION_SUITE:
                    r["evidence"].append(t)
                else:
                    r["revisor"] = t
        return [rounds[i] for i in sorted(rounds)]

    @staticmethod
    def _evidence_message(rnd: dict) -> ChatMessage:
        lines = [f"Question asked to the vision models: {rnd['inquirer'].response_raw}", ""]
        for k, turn in enumerate(rnd["evidence"], start=1):
            lines.append(f"{_tool_label(k, turn.backend_id)}: {turn.response_raw}")
        return user("\n".join(lines))

    def _opening(self, memory: ConversationMemory) -> list[ChatMessage]:
        caption = latest_turn(memory, Role.CAPTIONER).response_raw
        return [
            user(f"User question: {memory.task.question}"),
            assistant(f"Image caption: {caption}"),
        ]

    def _loop_context(self, memory: ConversationMemory) -> list[ChatMessage]:
        """Transcript the Revisor sees after its system prompt."""
        draft = latest_turn(memory, Role.DRAFTER).response_raw
        rounds = self._rounds(memory)
        if self.cfg.context_policy is ContextPolicy.LAST_ROUND:
            current = rounds[-1]
            previous = rounds[-2]["revisor"].response_raw if len(rounds) > 1 else draft
            return [user(f"User question: {memory.task.question}"), assistant(previous), self._evidence_message(current)]
        msgs = self._opening(memory) + [assistant(draft)]
        for rnd in rounds:
            if rnd["inquirer"] is None:
                continue
            msgs.append(self._evidence_message(rnd))
            if rnd["revisor"] is not None:
                msgs.append(assistant(rnd["revisor"].response_raw))
        return msgs

    # -- phases ---------------------------------------------------------------

    def _time_binding(self) -> dict:
        return {"time": format_prompt_time(self.clock())}

    def _turn(self, role, backend_id, prompt, response, started, iteration) -> AgentTurn:
        return AgentTurn(role, backend_id, prompt, response, started, max(self.clock(), started), iteration)

    def run_phase(self, memory: ConversationMemory, phase: Role | str) -> list[AgentTurn]:
        """Run one phase against ``memory`` and append its turns.

        Returns the appended turns: one for every phase except the vision
        suite, which appends one per backend.
        """
        phase = Role(phase)
        handler = {
            Role.CAPTIONER: self._captioner,
            Role.DRAFTER: self._drafter,
            Role.INQUIRER: self._inquirer,
            Role.VISION_SUITE: self._vision_suite,
            Role.REVISOR: self._revisor,
            Role.SPOKESMAN: self._spokesman,
        }.get(phase)
        if handler is None:
            raise ValueError(f"{phase.value} is not a pipeline phase")
        before = len(memory)
        handler(memory)
        return list(memory.turns[before:])

    def _captioner(self, memory: ConversationMemory) -> None:
        if memory.by_role(Role.CAPTIONER):
            raise MissingContext("the caption already exists")
        pair = self.registry.render(TemplateId.CAPTIONER_USER, {"image": True})
        cfg = self.cfg.captioner
        started = self.clock()
        reply = self.gateway.image_prompt(cfg, memory.task.image, pair, CallTag(Role.CAPTIONER.value, 0))
        prompt = transcript_text([user(pair.user_text, memory.task.image, pair.image_slot)])
        memory.append(self._turn(Role.CAPTIONER, cfg.backend_id, prompt, reply.text, started, 0))

    def _drafter(self, memory: ConversationMemory) -> None:
        if not memory.by_role(Role.CAPTIONER):
            raise MissingContext("the drafter needs a caption first")
        pair = self.registry.render(TemplateId.DRAFTER_USER, self._time_binding())
        messages = [system(pair.system_text), *self._opening(memory), user(pair.user_text)]
        started = self.clock()
        reply = self.gateway.chat(self.cfg.backbone, messages, CallTag(Role.DRAFTER.value, 0))
        memory.append(self._turn(Role.DRAFTER, self.cfg.backbone.backend_id, transcript_text(messages), reply.text, started, 0))

    def _latest_answer_turn(self, memory: ConversationMemory) -> AgentTurn:
        try:
            return latest_turn(memory, Role.DRAFTER, Role.REVISOR)
        except NoSuchTurn:
            raise MissingContext("the inquirer needs a draft or revision first") from None

    def _inquirer(self, memory: ConversationMemory) -> None:
        source = self._latest_answer_turn(memory)
        iteration = len(memory.by_role(Role.INQUIRER)) + 1
        if source.role is Role.REVISOR and source.iteration != iteration - 1:
            raise MissingContext("the previous round has no revision yet")
        if source.role is Role.DRAFTER and iteration != 1:
            raise MissingContext("the previous round has no revision yet")
        pair = self.registry.render(TemplateId.INQUIRER_USER, {})
        started = self.clock()
        if self.cfg.inquirer_mode is InquirerMode.EXTRACT:
            question = parsing.extract_question(source.response_raw)
            prompt = transcript_text([assistant(source.response_raw), user(pair.user_text)])
            backend_id = LOCAL_BACKEND
        else:
            messages = [assistant(source.response_raw), user(pair.user_text)]
            reply = self.gateway.chat(
                self.cfg.backbone, messages, CallTag(Role.INQUIRER.value, iteration - 1), tools=[ASK_VISION_TOOL]
            )
            question = tool_question(reply) or parsing.extract_question(reply.text)
            prompt = transcript_text(messages)
            backend_id = self.cfg.backbone.backend_id
        memory.append(self._turn(Role.INQUIRER, backend_id, prompt, question, started, iteration))

    def _vision_suite(self, memory: ConversationMemory) -> None:
        try:
            inquiry = latest_turn(memory, Role.INQUIRER)
        except NoSuchTurn:
            raise MissingContext("the vision suite needs an inquirer question first") from None
        iteration = inquiry.iteration
        if any(t.role is Role.VISION_SUITE and t.iteration == iteration for t in memory.turns):
            raise MissingContext(f"iteration {iteration} already has vision evidence")
        question = inquiry.response_raw
        started = self.clock()
        evidence = self.gateway.fan_out(self.cfg.suite, memory.task.image, question, ordinal=iteration - 1)
        pair = self.registry.render(TemplateId.VISION_USER, {"image": True, "inquirer_question": question})
        prompt = transcript_text([user(pair.user_text, memory.task.image, pair.image_slot)])
        for ev in evidence:
            ended = truncate_ms(started + timedelta(seconds=ev.latency_s))
            memory.append(AgentTurn(Role.VISION_SUITE, ev.backend_id, prompt, ev.text, started, ended, iteration))

    def _revisor(self, memory: ConversationMemory) -> None:
        try:
            inquiry = latest_turn(memory, Role.INQUIRER)
        except NoSuchTurn:
            raise MissingContext("the revisor needs a loop round first") from None
        iteration = inquiry.iteration
        if not any(t.role is Role.VISION_SUITE and t.iteration == iteration for t in memory.turns):
            raise MissingContext(f"iteration {iteration} has no vision evidence yet")
        if any(t.role is Role.REVISOR and t.iteration == iteration for t in memory.turns):
            raise MissingContext(f"iteration {iteration} is already revised")
        pair = self.registry.render(TemplateId.REVISOR_USER, self._time_binding())
        messages = [system(pair.system_text), *self._loop_context(memory), user(pair.user_text)]
        started = self.clock()
        reply = self.gateway.chat(self.cfg.backbone, messages, CallTag(Role.REVISOR.value, iteration - 1))
        memory.append(
            self._turn(Role.REVISOR, self.cfg.backbone.backend_id, transcript_text(messages), reply.text, started, iteration)
        )

    def _spokesman(self, memory: ConversationMemory) -> None:
        try:
            last = latest_turn(memory, Role.REVISOR)
        except NoSuchTurn:
            raise MissingContext("the spokesman needs a revision first") from None
        pair = self.registry.render(TemplateId.SPOKESMAN_USER, self._time_binding())
        messages = [
            system(pair.system_text),
            user(f"User question: {memory.task.question}"),
            assistant(last.response_raw),
            user(pair.user_text),
        ]
        started = self.clock()
        reply = self.gateway.chat(self.cfg.backbone, messages, CallTag(Role.SPOKESMAN.value, 0))
        memory.append(
            self._turn(
                Role.SPOKESMAN, self.cfg.backbone.backend_id, transcript_text(messages), reply.text, started, last.iteration + 1
            )
        )

    # -- whole task -----------------------------------------------------------

    def run_task(self, task: VqaTask) -> PipelineResult:
        memory = ConversationMemory(task)
        latency: dict[str, float] = {}
        revisions = []
        t_task = self.timer()

        def step(phase: Role, iteration: int) -> None:
            t0 = self.timer()
            try:
                self.run_phase(memory, phase)
            except (VisReasonError, ValueError, OSError) as exc:
                if isinstance(exc, MissingContext):
                    raise
                raise PhaseError(phase.value, iteration, exc) from exc
            finally:
                latency[phase.value] = latency.get(phase.value, 0.0) + self.timer() - t0

        step(Role.CAPTIONER, 0)
        step(Role.DRAFTER, 0)
        for i in range(1, self.cfg.iterations + 1):
            step(Role.INQUIRER, i)
            step(Role.VISION_SUITE, i)
            step(Role.REVISOR, i)
            revisions.append(parsing.parse_revision(memory.turns[-1].response_raw))
        step(Role.SPOKESMAN, self.cfg.iterations + 1)
        total = self.timer() - t_task
        return PipelineResult(
            final_answer=memory.turns[-1].response_raw,
            memory=memory,
            per_phase_latency=latency,
            iterations_run=self.cfg.iterations,
            total_latency_s=total,
            revisions=revisions,
        )


def run_task(
    task: VqaTask, cfg: PipelineConfig, gateway: Gateway | None = None, clock: Clock = utc_now
) -> PipelineResult:
    return Pipeline(cfg, gateway, clock).run_task(task)


def role_pattern(n_suite: int, iterations: int) -> list[Role]:
    """The role sequence a completed task's memory must show."""
    loop = [Role.INQUIRER, *([Role.VISION_SUITE] * n_suite), Role.REVISOR]
    return [Role.CAPTIONER, Role.DRAFTER, *(loop * iterations), Role.SPOKESMAN]
