"""
services/backends.py — Client dei modelli

- OpenAICompatibleBackend : protocollo chat-completion JSON su HTTP (httpx)
- AnthropicBackend        : SDK anthropic, per team eterogenei
- ScriptedBackend         : risposte deterministiche a regole, per i test
- ReplayBackend           : ri-esegue le risposte registrate in un event log
"""
from __future__ import annotations

import asyncio
import json
import logging
import os
import re
from collections import defaultdict, deque
from typing import Any, Callable, Iterable, Literal, Optional, Protocol, Union

import anthropic
import httpx
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger(__name__)

# ── MODELS ──────────────────────────────────────────────────

Role = Literal["system", "user", "assistant", "tool"]


class ChatMessage(BaseModel):
    model_config = ConfigDict(frozen=True)

    role: Role
    content: str


class ToolCall(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: str
    arguments: str = "{}"  # JSON testuale, come sul filo


class Usage(BaseModel):
    model_config = ConfigDict(frozen=True)

    prompt_tokens: int = 0
    completion_tokens: int = 0


class Sampling(BaseModel):
    model_config = ConfigDict(frozen=True)

    temperature: float = 0.0
    seed: Optional[int] = None
    max_tokens: int = 4096


class ChatRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    model: str = ""
    messages: tuple[ChatMessage, ...]
    tool_schemas: tuple[dict, ...] = ()
    sampling: Sampling = Sampling()
    # Non va sul filo: serve a script, replay e log (agent_id, purpose, ...)
    metadata: dict[str, Any] = Field(default_factory=dict)

    def text(self) -> str:
        return "\n".join(m.content for m in self.messages)


class ChatResponse(BaseModel):
    model_config = ConfigDict(frozen=True)

    content: str = ""
    tool_call: Optional[ToolCall] = None
    usage: Optional[Usage] = None


# ── ERRORS ──────────────────────────────────────────────────


class BackendError(Exception):
    kind = "backend"


class TransportError(BackendError):
    kind = "transport"


class HTTPStatusError(BackendError):
    kind = "http_status"

    def __init__(self, status: int, body: str = "", message: Optional[str] = None):
        self.status = status
        super().__init__(message or f"HTTP {status}: {body[:200]}")

    @property
    def retryable(self) -> bool:
        return self.status >= 500 or self.status == 429


class MalformedResponseError(BackendError):
    kind = "malformed"


class ScriptExhausted(BackendError):
    kind = "script_exhausted"


ERROR_KINDS: dict[str, type[BackendError]] = {
    cls.kind: cls for cls in (BackendError, TransportError, MalformedResponseError, ScriptExhausted)
}


def error_from_kind(kind: str, message: str) -> BackendError:
    if kind == HTTPStatusError.kind:
        status = int(m.group(1)) if (m := re.search(r"HTTP (\d+)", message)) else 500
        return HTTPStatusError(status, message=message)
    return ERROR_KINDS.get(kind, BackendError)(message)


class ChatBackend(Protocol):
    name: str

    async def chat(self, request: ChatRequest) -> ChatResponse: ...


# ── WIRE ────────────────────────────────────────────────────

_FENCED_TOOL_RE = re.compile(r"```(?:tool|tool_call|json)\s*\n(.*?)\n?```", re.DOTALL)


def parse_fenced_tool_call(content: str) -> Optional[ToolCall]:
    """Fallback testuale: blocco ```tool {"name": ..., "arguments": {...}}```."""
    for block in _FENCED_TOOL_RE.findall(content or ""):
        try:
            data = json.loads(block)
        except json.JSONDecodeError:
            continue
        if isinstance(data, dict) and isinstance(data.get("name"), str):
            args = data.get("arguments", {})
            if not isinstance(args, str):
                args = json.dumps(args, ensure_ascii=False, sort_keys=True)
            return ToolCall(name=data["name"], arguments=args)
    return None


def to_wire(request: ChatRequest) -> dict:
    body: dict[str, Any] = {
        "model": request.model,
        "messages": [{"role": m.role, "content": m.content} for m in request.messages],
        "temperature": request.sampling.temperature,
        "max_tokens": request.sampling.max_tokens,
    }
    if request.sampling.seed is not None:
        body["seed"] = request.sampling.seed
    if request.tool_schemas:
        body["tools"] = [{"type": "function", "function": s} for s in request.tool_schemas]
    return body


def from_wire(body: Any) -> ChatResponse:
    try:
        message = body["choices"][0]["message"]
    except (KeyError, IndexError, TypeError) as e:
        raise MalformedResponseError(f"risposta senza choices[0].message: {e}") from e
    content = message.get("content") or ""
    if not isinstance(content, str):
        raise MalformedResponseError("content non testuale")

    tool_call = None
    native = message.get("tool_calls") or []
    if native:
        try:
            fn = native[0]["function"]
            args = fn.get("arguments") or "{}"
            if not isinstance(args, str):
                args = json.dumps(args, ensure_ascii=False, sort_keys=True)
            tool_call = ToolCall(name=fn["name"], arguments=args)
        except (KeyError, TypeError) as e:
            raise MalformedResponseError(f"tool_calls malformato: {e}") from e
    else:
        tool_call = parse_fenced_tool_call(content)

    usage = None
    if isinstance(body.get("usage"), dict):
        u = body["usage"]
        usage = Usage(prompt_tokens=u.get("prompt_tokens") or 0,
                      completion_tokens=u.get("completion_tokens") or 0)
    return ChatResponse(content=content, tool_call=tool_call, usage=usage)


# ── HTTP CLIENT ─────────────────────────────────────────────


class EndpointConfig(BaseModel):
    base_url: str
    model: str
    api_key_env: Optional[str] = None
    retries: int = Field(default=2, ge=0)
    backoff_seconds: float = Field(default=1.0, ge=0)
    timeout_seconds: float = Field(default=120.0, gt=0)
    max_in_flight: int = Field(default=8, ge=1)


class OpenAICompatibleBackend:
    """Client stateless: richieste idempotenti, retry con backoff esponenziale."""

    def __init__(self, name: str, config: EndpointConfig,
                 transport: Optional[httpx.AsyncBaseTransport] = None):
        self.name = name
        self.config = config
        self._transport = transport
        self._limits: dict[int, asyncio.Semaphore] = {}

    def _limit(self) -> asyncio.Semaphore:
        loop_id = id(asyncio.get_running_loop())
        if loop_id not in self._limits:
            self._limits[loop_id] = asyncio.Semaphore(self.config.max_in_flight)
        return self._limits[loop_id]

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.api_key_env:
            key = os.environ.get(self.config.api_key_env, "")
            if key:
                headers["Authorization"] = f"Bearer {key}"
        return headers

    async def _post_once(self, body: dict) -> ChatResponse:
        url = self.config.base_url.rstrip("/") + "/chat/completions"
        try:
            async with httpx.AsyncClient(timeout=self.config.timeout_seconds,
                                         transport=self._transport) as client:
                r = await client.post(url, headers=self._headers(), json=body)
        except httpx.TimeoutException as e:
            raise TransportError(f"timeout verso {self.name}: {e}") from e
        except httpx.HTTPError as e:
            raise TransportError(f"errore di trasporto verso {self.name}: {e}") from e

        if r.status_code // 100 != 2:
            raise HTTPStatusError(r.status_code, r.text)
        try:
            data = r.json()
        except ValueError as e:
            raise MalformedResponseError(f"body non JSON: {e}") from e
        return from_wire(data)

    async def chat(self, request: ChatRequest) -> ChatResponse:
        body = to_wire(request.model_copy(update={"model": request.model or self.config.model}))
        attempts = self.config.retries + 1
        async with self._limit():
            for attempt in range(1, attempts + 1):
                try:
                    return await self._post_once(body)
                except (TransportError, HTTPStatusError) as e:
                    if isinstance(e, HTTPStatusError) and not e.retryable:
                        raise
                    if attempt == attempts:
                        raise
                    delay = self.config.backoff_seconds * (2 ** (attempt - 1))
                    logger.warning(f"{self.name}: tentativo {attempt}/{attempts} fallito ({e}), nuovo tentativo tra {delay:.1f}s")
                    await asyncio.sleep(delay)
        raise BackendError("unreachable")


# ── ANTHROPIC ───────────────────────────────────────────────


class AnthropicBackend:
    def __init__(self, name: str, config: EndpointConfig, client: Any = None):
        self.name = name
        self.config = config
        self._client = client

    def _get_client(self):
        if self._client is None:
            api_key = os.environ.get(self.config.api_key_env or "ANTHROPIC_API_KEY", "")
            self._client = anthropic.AsyncAnthropic(
                api_key=api_key,
                max_retries=self.config.retries,
                timeout=self.config.timeout_seconds,
            )
        return self._client

    @staticmethod
    def _convert(request: ChatRequest) -> tuple[str, list[dict]]:
        system = "\n\n".join(m.content for m in request.messages if m.role == "system")
        messages: list[dict] = []
        for m in request.messages:
            if m.role == "system":
                continue
            role = "assistant" if m.role == "assistant" else "user"
            # L'API vuole ruoli alternati: accorpa i messaggi consecutivi
            if messages and messages[-1]["role"] == role:
                messages[-1]["content"] += "\n\n" + m.content
            else:
                messages.append({"role": role, "content": m.content})
        return system, messages

    async def chat(self, request: ChatRequest) -> ChatResponse:
        system, messages = self._convert(request)
        kwargs: dict[str, Any] = {
            "model": request.model or self.config.model,
            "max_tokens": request.sampling.max_tokens,
            "messages": messages,
            "temperature": request.sampling.temperature,
        }
        if system:
            kwargs["system"] = system
        if request.tool_schemas:
            kwargs["tools"] = [
                {"name": s["name"], "description": s.get("description", ""),
                 "input_schema": s.get("parameters", {"type": "object"})}
                for s in request.tool_schemas
            ]
        try:
            response = await self._get_client().messages.create(**kwargs)
        except anthropic.APITimeoutError as e:
            raise TransportError(f"timeout verso {self.name}: {e}") from e
        except anthropic.APIConnectionError as e:
            raise TransportError(f"errore di trasporto verso {self.name}: {e}") from e
        except anthropic.APIStatusError as e:
            raise HTTPStatusError(e.status_code, str(e)) from e

        text_parts, tool_call = [], None
        for block in response.content:
            if block.type == "text":
                text_parts.append(block.text)
            elif block.type == "tool_use" and tool_call is None:
                tool_call = ToolCall(name=block.name,
                                     arguments=json.dumps(block.input, ensure_ascii=False, sort_keys=True))
        content = "".join(text_parts)
        if tool_call is None:
            tool_call = parse_fenced_tool_call(content)
        usage = Usage(prompt_tokens=response.usage.input_tokens,
                      completion_tokens=response.usage.output_tokens)
        return ChatResponse(content=content, tool_call=tool_call, usage=usage)


# ── SCRIPTED ────────────────────────────────────────────────


class Match(BaseModel):
    """Condizioni di una regola; i campi assenti corrispondono a qualsiasi richiesta."""

    agent_id: Optional[str] = None
    purpose: Optional[str] = None
    ordinal: Optional[int] = Field(default=None, ge=1)  # chiamata n-esima per (agent_id, purpose)
    role: Optional[Role] = None                         # ruolo dell'ultimo messaggio
    contains: Optional[str] = None                      # sottostringa in un qualsiasi messaggio
    system_contains: Optional[str] = None

    def matches(self, request: ChatRequest, ordinal: int) -> bool:
        meta = request.metadata
        if self.agent_id is not None and meta.get("agent_id") != self.agent_id:
            return False
        if self.purpose is not None and meta.get("purpose", "agent") != self.purpose:
            return False
        if self.ordinal is not None and ordinal != self.ordinal:
            return False
        if self.role is not None and (not request.messages or request.messages[-1].role != self.role):
            return False
        if self.contains is not None and self.contains not in request.text():
            return False
        if self.system_contains is not None:
            system = "\n".join(m.content for m in request.messages if m.role == "system")
            if self.system_contains not in system:
                return False
        return True


class Rule(BaseModel):
    match: Match = Match()
    content: str = ""
    tool_call: Optional[ToolCall] = None
    error: Optional[str] = None  # kind dell'errore da sollevare
    usage: Optional[Usage] = None


class _Template(dict):
    def __missing__(self, key: str) -> str:
        return "{" + key + "}"


ScriptItem = Union[Rule, Callable[[ChatRequest, int], Optional[ChatResponse]]]


class ScriptedBackend:
    """Backend puro: stessa sequenza di richieste → stesse risposte e stessa traccia.

    Il contenuto delle regole è un template: `{agent_id}`, `{owner}`, `{ordinal}`,
    `{goal}`, `{page}` vengono presi dai metadata della richiesta, `{call}` è
    l'ordinale della chiamata.
    """

    def __init__(self, name: str, script: Iterable[ScriptItem]):
        self.name = name
        self.script: list[ScriptItem] = list(script)
        self.calls: list[ChatRequest] = []
        self._ordinals: dict[tuple[str, str], int] = defaultdict(int)

    @classmethod
    def from_rules(cls, name: str, rules: list[dict]) -> "ScriptedBackend":
        return cls(name, [Rule.model_validate(r) for r in rules])

    def calls_for(self, purpose: str, agent_id: Optional[str] = None) -> list[ChatRequest]:
        return [c for c in self.calls
                if c.metadata.get("purpose", "agent") == purpose
                and (agent_id is None or c.metadata.get("agent_id") == agent_id)]

    async def chat(self, request: ChatRequest) -> ChatResponse:
        key = (str(request.metadata.get("agent_id", "")), str(request.metadata.get("purpose", "agent")))
        self._ordinals[key] += 1
        ordinal = self._ordinals[key]
        self.calls.append(request)

        for item in self.script:
            if callable(item) and not isinstance(item, Rule):
                response = item(request, ordinal)
                if response is not None:
                    return response
                continue
            if not item.match.matches(request, ordinal):
                continue
            values = _Template({k: str(v) for k, v in request.metadata.items()})
            values["call"] = str(ordinal)
            if item.error:
                raise error_from_kind(item.error, item.content.format_map(values) or f"errore scriptato ({item.error})")
            return ChatResponse(content=item.content.format_map(values), tool_call=item.tool_call, usage=item.usage)

        last = request.messages[-1].content[:120] if request.messages else ""
        logger.error(f"{self.name}: script esaurito per {key} chiamata {ordinal}")
        raise ScriptExhausted(
            f"nessuna regola per agent={key[0]!r} purpose={key[1]!r} chiamata={ordinal}: {last!r}"
        )


# ── REPLAY ──────────────────────────────────────────────────


class ReplayBackend:
    """Risposte ri-lette da un event log, in ordine, per (agent_id, purpose)."""

    def __init__(self, name: str = "replay"):
        self.name = name
        self._queues: dict[tuple[str, str], deque] = defaultdict(deque)

    def push(self, agent_id: str, purpose: str, item: Union[ChatResponse, BackendError]) -> None:
        self._queues[(agent_id, purpose)].append(item)

    @classmethod
    def from_events(cls, events: Iterable[dict]) -> "ReplayBackend":
        backend = cls()
        for ev in events:
            kind, agent, payload = ev["kind"], ev["agent_id"], ev.get("payload", {})
            if kind == "turn":
                backend.push(agent, "agent", ChatResponse(
                    content=payload.get("content", ""),
                    tool_call=ToolCall(**payload["tool_call"]) if payload.get("tool_call") else None,
                    usage=Usage(**payload["usage"]) if payload.get("usage") else None,
                ))
            elif kind == "status" and payload.get("error_kind") and payload.get("source") == "backend":
                backend.push(agent, "agent", error_from_kind(payload["error_kind"], payload.get("error", "")))
            elif kind == "hub_write":
                if payload.get("degraded"):
                    backend.push(agent, "write", error_from_kind(payload.get("error_kind", "backend"),
                                                                 payload.get("error", "")))
                else:
                    backend.push(agent, "write", ChatResponse(content=payload["summary"]))
            elif kind == "hub_read":
                for out in payload.get("page_outputs", []):
                    backend.push(agent, "read", ChatResponse(content=out))
                if payload.get("error_kind"):
                    backend.push(agent, "read", error_from_kind(payload["error_kind"], payload.get("error", "")))
        return backend

    async def chat(self, request: ChatRequest) -> ChatResponse:
        key = (str(request.metadata.get("agent_id", "")), str(request.metadata.get("purpose", "agent")))
        queue = self._queues.get(key)
        if not queue:
            raise ScriptExhausted(f"replay: nessuna risposta registrata per {key}")
        item = queue.popleft()
        if isinstance(item, BackendError):
            raise item
        return item
