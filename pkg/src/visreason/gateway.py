"""Uniform client layer over chat-completions backends.

Three backend kinds exist: ``chat_text`` (the text-only reasoning model),
``chat_vision`` (image + text models) and ``mock`` (a scripted backend
used for tests and dry runs). Real backends speak the OpenAI-compatible
chat-completions protocol; images travel as base64 data URLs.
"""

from __future__ import annotations

import base64
import enum
import json
import logging
import os
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence, Union

import httpx
import yaml

from .core import ImageRef, Role
from .errors import (
    AllBackendsFailed,
    BackendTimeout,
    BadStatus,
    ConfigError,
    EmptyCompletion,
    ImageDecodeError,
    ImageRefError,
    ScriptParseError,
    TransportError,
)
from .prompts import PromptPair, TemplateId, TemplateRegistry, default_registry

log = logging.getLogger(__name__)

_MIME = {"png": "image/png", "jpeg": "image/jpeg", "webp": "image/webp", "bmp": "image/bmp"}


class BackendKind(str, enum.Enum):
    CHAT_TEXT = "chat_text"
    CHAT_VISION = "chat_vision"
    MOCK = "mock"

    def __str__(self) -> str:
        return self.value


# -- mock scripts -------------------------------------------------------------


@dataclass(frozen=True)
class ReplyRule:
    by_question: Mapping[str, str] = field(default_factory=dict)
    by_ordinal: tuple[str, ...] = ()
    default: str | None = None

    def reply(self, ordinal: int, key: str | None) -> str:
        if key is not None and key in self.by_question:
            return self.by_question[key]
        if self.by_ordinal:
            return self.by_ordinal[min(ordinal, len(self.by_ordinal) - 1)]
        return self.default


_FAIL_MODES = ("timeout", "transport", "empty")


@dataclass(frozen=True)
class MockScript:
    """Parsed mock script: replies keyed by role tag, ordinal and question."""

    rules: Mapping[str, ReplyRule]
    delay_s: Mapping[str, float] = field(default_factory=dict)
    fail: str | None = None
    source: str = ""

    def covers(self, role: str) -> bool:
        return role in self.rules or "*" in self.rules

    def rule_for(self, role: str) -> ReplyRule:
        rule = self.rules.get(role) or self.rules.get("*")
        if rule is None:
            raise ScriptParseError(f"mock script {self.source} has no replies for role {role!r}")
        return rule

    def delay_for(self, role: str) -> float:
        return self.delay_s.get(role, self.delay_s.get("*", 0.0))


def _parse_rule(role: str, raw: Any, source: str) -> ReplyRule:
    def text(value, where):
        if not isinstance(value, str):
            raise ScriptParseError(f"{source}: reply for {where} must be a string, got {value!r}")
        return value

    if isinstance(raw, str):
        return ReplyRule(default=raw)
    if isinstance(raw, list):
        if not raw:
            raise ScriptParseError(f"{source}: empty reply list for role {role!r}")
        return ReplyRule(by_ordinal=tuple(text(v, f"{role}[{i}]") for i, v in enumerate(raw)))
    if isinstance(raw, dict):
        unknown = set(raw) - {"by_question", "by_ordinal", "default"}
        if unknown:
            raise ScriptParseError(f"{source}: unknown keys {sorted(unknown)} for role {role!r}")
        by_q = raw.get("by_question") or {}
        if not isinstance(by_q, dict):
            raise ScriptParseError(f"{source}: by_question for {role!r} must be a mapping")
        by_ord = raw.get("by_ordinal") or []
        if not isinstance(by_ord, list):
            raise ScriptParseError(f"{source}: by_ordinal for {role!r} must be a list")
        default = raw.get("default")
        if default is None and not by_ord:
            # a question map alone cannot answer unseen questions
            raise ScriptParseError(f"{source}: role {role!r} needs a 'default' or 'by_ordinal' reply")
        return ReplyRule(
            by_question={str(k): text(v, f"{role}.by_question[{k!r}]") for k, v in by_q.items()},
            by_ordinal=tuple(text(v, f"{role}.by_ordinal[{i}]") for i, v in enumerate(by_ord)),
            default=None if default is None else text(default, f"{role}.default"),
        )
    raise ScriptParseError(f"{source}: cannot read replies for role {role!r}")


def parse_mock_script(data: Any, source: str = "<script>") -> MockScript:
    if not isinstance(data, dict) or not isinstance(data.get("replies"), dict):
        raise ScriptParseError(f"{source}: script needs a 'replies' mapping")
    rules = {str(role): _parse_rule(str(role), raw, source) for role, raw in data["replies"].items()}
    if not rules:
        raise ScriptParseError(f"{source}: script has no replies")
    delay = data.get("delay_s", 0.0)
    if isinstance(delay, (int, float)):
        delays = {"*": float(delay)}
    elif isinstance(delay, dict):
        delays = {str(k): float(v) for k, v in delay.items()}
    else:
        raise ScriptParseError(f"{source}: delay_s must be a number or a mapping")
    fail = data.get("fail")
    if fail is not None and fail not in _FAIL_MODES and not str(fail).startswith("status:"):
        raise ScriptParseError(f"{source}: unknown fail mode {fail!r}")
    return MockScript(rules=rules, delay_s=delays, fail=fail, source=source)


# -- configuration ------------------------------------------------------------


@dataclass(frozen=True)
class BackendConfig:
    backend_id: str
    kind: BackendKind
    endpoint_url: str = ""
    model_name: str = ""
    timeout_s: float = 120.0
    max_retries: int = 2
    auth_token_env: str | None = None
    temperature: float = 0.2
    max_tokens: int = 1024
    backoff_s: float = 0.5
    script_path: str | None = None
    script: MockScript | None = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "kind", BackendKind(self.kind))
        if not self.backend_id:
            raise ConfigError("backend_id must be non-empty")
        if not self.timeout_s > 0:
            raise ConfigError(f"{self.backend_id}: timeout_s must be > 0")
        if self.max_retries < 0:
            raise ConfigError(f"{self.backend_id}: max_retries must be >= 0")
        if self.kind is BackendKind.MOCK:
            if self.script is None and not self.script_path:
                raise ConfigError(f"{self.backend_id}: mock backend needs a script path")
        elif not self.endpoint_url:
            raise ConfigError(f"{self.backend_id}: endpoint_url is required")

    @classmethod
    def from_dict(cls, raw: Mapping[str, Any], base_dir: Path | None = None, **defaults) -> "BackendConfig":
        raw = {**defaults, **raw}
        if raw.get("kind") == BackendKind.MOCK.value or "script" in raw:
            path = raw.get("script") or raw.get("script_path")
            if not path:
                raise ConfigError(f"{raw.get('backend_id', '?')}: mock backend needs 'script'")
            path = Path(path)
            if base_dir is not None and not path.is_absolute():
                path = base_dir / path
            extra = {k: v for k, v in raw.items() if k not in ("kind", "script", "script_path")}
            return mock_from_script(path, **extra)
        known = {f for f in cls.__dataclass_fields__ if f not in ("script", "script_path")}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown backend config keys: {sorted(unknown)}")
        return cls(**raw)


def mock_from_script(path: Union[str, os.PathLike], **overrides) -> BackendConfig:
    """Load a mock script file (YAML or JSON) into a mock BackendConfig.

    The script may set ``backend_id``, ``timeout_s`` and ``max_retries``;
    keyword overrides win over the script.
    """
    path = Path(path)
    try:
        data = yaml.safe_load(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ScriptParseError(f"cannot read mock script {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ScriptParseError(f"{path}: {exc}") from exc
    script = parse_mock_script(data, str(path))
    settings = {
        "backend_id": data.get("backend_id", path.stem),
        "timeout_s": data.get("timeout_s", 30.0),
        "max_retries": data.get("max_retries", 0),
        "backoff_s": data.get("backoff_s", 0.0),
        "model_name": data.get("model_name", "mock"),
    }
    settings.update(overrides)
    return BackendConfig(kind=BackendKind.MOCK, script_path=str(path), script=script, **settings)


# -- messages and replies -----------------------------------------------------


class MessageRole(str, enum.Enum):
    SYSTEM = "system"
    USER = "user"
    ASSISTANT = "assistant"


@dataclass(frozen=True)
class ChatMessage:
    role: MessageRole
    text: str
    image: ImageRef | None = None
    image_slot: int = 0

    def __post_init__(self):
        object.__setattr__(self, "role", MessageRole(self.role))
        if self.image is not None and self.role is not MessageRole.USER:
            raise ValueError("only user messages may carry an image")
        if not self.text and self.image is None:
            raise ValueError("message text may be empty only when an image is attached")


def system(text: str) -> ChatMessage:
    return ChatMessage(MessageRole.SYSTEM, text)


def user(text: str, image: ImageRef | None = None, image_slot: int = 0) -> ChatMessage:
    return ChatMessage(MessageRole.USER, text, image, image_slot)


def assistant(text: str) -> ChatMessage:
    return ChatMessage(MessageRole.ASSISTANT, text)


def messages_from_pair(pair: PromptPair, image: ImageRef | None = None) -> list[ChatMessage]:
    out = []
    if pair.system_text is not None:
        out.append(system(pair.system_text))
    slot = pair.image_slot if pair.image_slot is not None else 0
    out.append(user(pair.user_text, image if pair.image_slot is not None else None, slot))
    return out


def transcript_text(messages: Sequence[ChatMessage]) -> str:
    """Human-readable rendering of a message list, for the audit trail."""
    parts = []
    for m in messages:
        text = m.text
        if m.image is not None:
            text = text[:m.image_slot] + "<image>" + (" " if m.image_slot < len(text) else "") + text[m.image_slot:]
        parts.append(f"[{m.role.value}]\n{text}")
    return "\n\n".join(parts)


@dataclass(frozen=True)
class CallTag:
    """What a call is for; the mock backend keys its replies on this."""

    role: str
    ordinal: int = 0
    key: str | None = None


@dataclass(frozen=True)
class ModelReply:
    text: str
    latency_s: float
    backend_id: str
    truncated: bool = False
    attempts: int = 1
    tool_calls: tuple[tuple[str, str], ...] = ()


@dataclass(frozen=True)
class FailureRecord:
    backend_id: str
    error: str
    message: str
    latency_s: float = 0.0

    @property
    def text(self) -> str:
        return f"[backend {self.backend_id} unavailable]"


@dataclass(frozen=True)
class VisualEvidence:
    backend_id: str
    question: str
    reply: Union[ModelReply, FailureRecord]

    @property
    def ok(self) -> bool:
        return isinstance(self.reply, ModelReply)

    @property
    def text(self) -> str:
        return self.reply.text

    @property
    def latency_s(self) -> float:
        return self.reply.latency_s


# -- gateway ------------------------------------------------------------------


def _encode_message(m: ChatMessage, image_bytes: bytes | None) -> dict:
    if m.image is None:
        return {"role": m.role.value, "content": m.text}
    url = f"data:{_MIME[m.image.media_type]};base64," + base64.b64encode(image_bytes).decode("ascii")
    before, after = m.text[:m.image_slot].rstrip(), m.text[m.image_slot:]
    parts = []
    if before:
        parts.append({"type": "text", "text": before})
    parts.append({"type": "image_url", "image_url": {"url": url}})
    if after:
        parts.append({"type": "text", "text": after})
    return {"role": m.role.value, "content": parts}


def _load_image(image: ImageRef, backend_id: str = "") -> bytes:
    try:
        return image.read_bytes()
    except ImageRefError as exc:
        raise ImageDecodeError(str(exc), backend_id) from exc


class Gateway:
    """Sends chat requests to configured backends.

    One instance can be shared between threads: no per-call state lives on
    it, and ``max_in_flight`` bounds the number of concurrent requests
    across all callers.
    """

    def __init__(
        self,
        max_in_flight: int = 16,
        http_client: httpx.Client | None = None,
        registry: TemplateRegistry | None = None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")
        self._slots = threading.BoundedSemaphore(max_in_flight)
        self._http = http_client
        self._own_http = http_client is None
        self._http_lock = threading.Lock()
        self.registry = registry or default_registry()
        self._sleep = sleep
        self._observers: list[Callable[[BackendConfig, list[ChatMessage], CallTag | None], None]] = []

    def add_observer(self, fn) -> None:
        """Register ``fn(config, messages, tag)``, called before every request."""
        self._observers.append(fn)

    def close(self) -> None:
        if self._own_http and self._http is not None:
            self._http.close()
            self._http = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _client(self) -> httpx.Client:
        with self._http_lock:
            if self._http is None:
                self._http = httpx.Client()
            return self._http

    # -- public operations ----------------------------------------------------

    def chat(
        self,
        config: BackendConfig,
        messages: Sequence[ChatMessage],
        tag: CallTag | None = None,
        tools: list[dict] | None = None,
    ) -> ModelReply:
        if config.kind not in (BackendKind.CHAT_TEXT, BackendKind.MOCK):
            raise ConfigError(f"{config.backend_id}: chat() needs a chat_text or mock backend")
        if not messages:
            raise ValueError("messages must be non-empty")
        if any(m.image is not None for m in messages):
            raise ValueError("chat() sends text only; use vision_query() for images")
        return self._send(config, list(messages), tag, tools=tools)

    def image_prompt(
        self, config: BackendConfig, image: ImageRef, pair: PromptPair, tag: CallTag | None = None
    ) -> ModelReply:
        """Send a rendered template whose ``image_slot`` receives ``image``."""
        if config.kind not in (BackendKind.CHAT_VISION, BackendKind.MOCK):
            raise ConfigError(f"{config.backend_id}: image prompts need a chat_vision or mock backend")
        if pair.image_slot is None:
            raise ValueError("prompt has no image slot")
        payload = _load_image(image, config.backend_id)
        return self._send(config, messages_from_pair(pair, image), tag, image_bytes=payload)

    def vision_query(
        self, config: BackendConfig, image: ImageRef, question: str, tag: CallTag | None = None
    ) -> ModelReply:
        if not question or not question.strip():
            raise ValueError("question must be non-empty")
        pair = self.registry.render(TemplateId.VISION_USER, {"image": True, "inquirer_question": question})
        tag = tag or CallTag(Role.VISION_SUITE.value, 0, question)
        if tag.key is None:
            tag = replace(tag, key=question)
        return self.image_prompt(config, image, pair, tag)

    def fan_out(
        self,
        suite: Sequence[BackendConfig],
        image: ImageRef,
        question: str,
        ordinal: int = 0,
    ) -> list[VisualEvidence]:
        """Ask every suite backend ``question`` about ``image`` concurrently.

        Results come back in suite order. A failing backend yields a
        FailureRecord in its slot; AllBackendsFailed is raised only when
        every slot failed.
        """
        if not suite:
            raise ValueError("suite must be non-empty")
        if not question or not question.strip():
            raise ValueError("question must be non-empty")
        _load_image(image)
        tag = CallTag(Role.VISION_SUITE.value, ordinal, question)

        def one(cfg: BackendConfig) -> VisualEvidence:
            t0 = time.perf_counter()
            try:
                reply = self.vision_query(cfg, image, question, tag)
            except Exception as exc:  # isolate every slot, whatever went wrong
                log.warning("vision backend %s failed: %s", cfg.backend_id, exc)
                reply = FailureRecord(cfg.backend_id, type(exc).__name__, str(exc), time.perf_counter() - t0)
            return VisualEvidence(cfg.backend_id, question, reply)

        with ThreadPoolExecutor(max_workers=len(suite), thread_name_prefix="fan-out") as pool:
            evidence = list(pool.map(one, suite))
        if not any(e.ok for e in evidence):
            raise AllBackendsFailed(evidence)
        return evidence

    # -- transport ------------------------------------------------------------

    def _send(
        self,
        config: BackendConfig,
        messages: list[ChatMessage],
        tag: CallTag | None,
        image_bytes: bytes | None = None,
        tools: list[dict] | None = None,
    ) -> ModelReply:
        for fn in self._observers:
            fn(config, messages, tag)
        attempt = 0
        while True:
            try:
                with self._slots:
                    if config.kind is BackendKind.MOCK:
                        reply = self._mock_once(config, messages, tag)
                    else:
                        reply = self._http_once(config, messages, image_bytes, tools)
                return replace(reply, attempts=attempt + 1)
            except (BackendTimeout, TransportError) as exc:
                err = exc
            except BadStatus as exc:
                if exc.code < 500:
                    raise
                err = exc
            if attempt >= config.max_retries:
                raise err
            delay = config.backoff_s * (2 ** attempt)
            log.info("%s: attempt %d failed (%s); retrying in %.2fs", config.backend_id, attempt + 1, err, delay)
            self._sleep(delay)
            attempt += 1

    def _http_once(
        self,
        config: BackendConfig,
        messages: list[ChatMessage],
        image_bytes: bytes | None,
        tools: list[dict] | None,
    ) -> ModelReply:
        url = config.endpoint_url.rstrip("/")
        if not url.endswith("/chat/completions"):
            url += "/chat/completions"
        headers = {"Content-Type": "application/json"}
        if config.auth_token_env:
            token = os.environ.get(config.auth_token_env)
            if token is None:
                raise ConfigError(f"{config.backend_id}: env var {config.auth_token_env} is not set")
            headers["Authorization"] = f"Bearer {token}"
        body: dict[str, Any] = {
            "model": config.model_name,
            "messages": [_encode_message(m, image_bytes) for m in messages],
            "temperature": config.temperature,
            "max_tokens": config.max_tokens,
        }
        if tools:
            body["tools"] = tools
        t0 = time.perf_counter()
        try:
            resp = self._client().post(url, json=body, headers=headers, timeout=config.timeout_s)
        except httpx.TimeoutException as exc:
            raise BackendTimeout(f"{config.backend_id}: timed out after {config.timeout_s}s", config.backend_id) from exc
        except httpx.TransportError as exc:
            raise TransportError(f"{config.backend_id}: {exc}", config.backend_id) from exc
        latency = time.perf_counter() - t0
        if resp.status_code >= 400:
            raise BadStatus(resp.status_code, config.backend_id, resp.text[:500])
        try:
            choice = resp.json()["choices"][0]
            message = choice["message"]
        except (ValueError, KeyError, IndexError, TypeError) as exc:
            raise TransportError(f"{config.backend_id}: malformed completion payload", config.backend_id) from exc
        calls = tuple(
            (c.get("function", {}).get("name", ""), c.get("function", {}).get("arguments", ""))
            for c in (message.get("tool_calls") or [])
        )
        text = message.get("content") or ""
        if not text.strip() and not calls:
            raise EmptyCompletion(f"{config.backend_id}: empty completion", config.backend_id)
        return ModelReply(
            text=text,
            latency_s=latency,
            backend_id=config.backend_id,
            truncated=choice.get("finish_reason") == "length",
            tool_calls=calls,
        )

    def _mock_once(self, config: BackendConfig, messages: list[ChatMessage], tag: CallTag | None) -> ModelReply:
        script = config.script
        if script is None:
            config = mock_from_script(config.script_path, backend_id=config.backend_id)
            script = config.script
        role = tag.role if tag else "*"
        key = tag.key if tag and tag.key is not None else messages[-1].text
        ordinal = tag.ordinal if tag else 0
        rule = script.rule_for(role)
        t0 = time.perf_counter()
        delay = script.delay_for(role)
        if delay > config.timeout_s:
            time.sleep(config.timeout_s)
            raise BackendTimeout(f"{config.backend_id}: timed out after {config.timeout_s}s", config.backend_id)
        if delay:
            time.sleep(delay)
        if script.fail == "timeout":
            raise BackendTimeout(f"{config.backend_id}: scripted timeout", config.backend_id)
        if script.fail == "transport":
            raise TransportError(f"{config.backend_id}: scripted transport failure", config.backend_id)
        if script.fail and script.fail.startswith("status:"):
            raise BadStatus(int(script.fail.split(":", 1)[1]), config.backend_id)
        text = "" if script.fail == "empty" else rule.reply(ordinal, key)
        if not text.strip():
            raise EmptyCompletion(f"{config.backend_id}: empty completion", config.backend_id)
        return ModelReply(text=text, latency_s=time.perf_counter() - t0, backend_id=config.backend_id)


_default_gateway: Gateway | None = None
_default_lock = threading.Lock()


def default_gateway() -> Gateway:
    global _default_gateway
    with _default_lock:
        if _default_gateway is None:
            _default_gateway = Gateway()
        return _default_gateway


def chat(config: BackendConfig, messages: Sequence[ChatMessage], tag: CallTag | None = None) -> ModelReply:
    return default_gateway().chat(config, messages, tag)


def vision_query(config: BackendConfig, image: ImageRef, question: str, tag: CallTag | None = None) -> ModelReply:
    return default_gateway().vision_query(config, image, question, tag)


def fan_out(suite: Sequence[BackendConfig], image: ImageRef, question: str, ordinal: int = 0) -> list[VisualEvidence]:
    return default_gateway().fan_out(suite, image, question, ordinal)


def tool_question(reply: ModelReply) -> str | None:
    """Question argument of the first ``ask_vision_models`` tool call, if any."""
    for name, arguments in reply.tool_calls:
        if name != ASK_VISION_TOOL["function"]["name"]:
            continue
        try:
            args = json.loads(arguments) if isinstance(arguments, str) else dict(arguments)
        except (ValueError, TypeError):
            continue
        q = args.get("question")
        if isinstance(q, str) and q.strip():
            return q.strip()
    return None


ASK_VISION_TOOL = {
    "type": "function",
    "function": {
        "name": "ask_vision_models",
        "description": "Ask every vision model in the suite one question about the image.",
        "parameters": {
            "type": "object",
            "properties": {"question": {"type": "string"}},
            "required": ["question"],
        },
    },
}
