import asyncio
import json

import httpx
import pytest

from services.backends import (
    AnthropicBackend,
    ChatMessage,
    ChatRequest,
    EndpointConfig,
    HTTPStatusError,
    MalformedResponseError,
    OpenAICompatibleBackend,
    ReplayBackend,
    Sampling,
    ScriptExhausted,
    ToolCall,
    TransportError,
    from_wire,
    parse_fenced_tool_call,
    to_wire,
)
from tests.conftest import scripted

REQUEST = ChatRequest(
    messages=(ChatMessage(role="system", content="sys"), ChatMessage(role="user", content="hello")),
    tool_schemas=({"name": "search", "parameters": {"type": "object"}},),
    sampling=Sampling(temperature=0.3, seed=5, max_tokens=64),
    metadata={"agent_id": "a0", "purpose": "agent"},
)


def _endpoint(**kw) -> EndpointConfig:
    return EndpointConfig(**{"base_url": "http://stub/v1", "model": "m", "backoff_seconds": 0.0, **kw})


def _completion(content="", tool_calls=None, usage=None) -> dict:
    message = {"role": "assistant", "content": content}
    if tool_calls:
        message["tool_calls"] = tool_calls
    body = {"choices": [{"message": message}]}
    if usage:
        body["usage"] = usage
    return body


# ── wire ────────────────────────────────────────────────────


def test_to_wire_carries_sampling_and_tools_but_not_metadata():
    body = to_wire(REQUEST)
    assert body["temperature"] == 0.3 and body["seed"] == 5 and body["max_tokens"] == 64
    assert body["tools"][0] == {"type": "function", "function": REQUEST.tool_schemas[0]}
    assert "metadata" not in body


def test_from_wire_native_tool_call_and_usage():
    body = _completion(tool_calls=[{"function": {"name": "visit", "arguments": '{"url": "u"}'}}],
                       usage={"prompt_tokens": 10, "completion_tokens": 3})
    resp = from_wire(body)
    assert resp.tool_call == ToolCall(name="visit", arguments='{"url": "u"}')
    assert resp.usage.prompt_tokens == 10


def test_from_wire_fenced_fallback_and_missing_usage():
    content = 'Let me search.\n```tool\n{"name": "search", "arguments": {"queries": ["dafeng"]}}\n```'
    resp = from_wire(_completion(content))
    assert resp.tool_call.name == "search"
    assert json.loads(resp.tool_call.arguments) == {"queries": ["dafeng"]}
    assert resp.usage is None


def test_fenced_block_with_bad_json_is_ignored():
    assert parse_fenced_tool_call("```tool\n{not json}\n```") is None


def test_from_wire_malformed():
    with pytest.raises(MalformedResponseError):
        from_wire({"choices": []})


# ── HTTP ────────────────────────────────────────────────────


def test_openai_backend_round_trip():
    seen = []

    def handler(request: httpx.Request) -> httpx.Response:
        seen.append(json.loads(request.content))
        return httpx.Response(200, json=_completion("Exact Answer: 42"))

    backend = OpenAICompatibleBackend("stub", _endpoint(), transport=httpx.MockTransport(handler))
    resp = asyncio.run(backend.chat(REQUEST))
    assert resp.content == "Exact Answer: 42"
    assert seen[0]["model"] == "m"
    assert seen[0]["messages"][1] == {"role": "user", "content": "hello"}


def test_openai_backend_retries_server_errors():
    attempts = []

    def handler(request: httpx.Request) -> httpx.Response:
        attempts.append(1)
        return httpx.Response(500, text="boom")

    backend = OpenAICompatibleBackend("stub", _endpoint(retries=2), transport=httpx.MockTransport(handler))
    with pytest.raises(HTTPStatusError) as exc:
        asyncio.run(backend.chat(REQUEST))
    assert len(attempts) == 3
    assert exc.value.status == 500


def test_openai_backend_does_not_retry_client_errors():
    attempts = []

    def handler(request: httpx.Request) -> httpx.Response:
        attempts.append(1)
        return httpx.Response(400, text="bad request")

    backend = OpenAICompatibleBackend("stub", _endpoint(retries=2), transport=httpx.MockTransport(handler))
    with pytest.raises(HTTPStatusError):
        asyncio.run(backend.chat(REQUEST))
    assert len(attempts) == 1


def test_openai_backend_recovers_after_transient_failure():
    calls = []

    def handler(request: httpx.Request) -> httpx.Response:
        calls.append(1)
        if len(calls) == 1:
            raise httpx.ConnectError("refused")
        return httpx.Response(200, json=_completion("ok"))

    backend = OpenAICompatibleBackend("stub", _endpoint(retries=1), transport=httpx.MockTransport(handler))
    assert asyncio.run(backend.chat(REQUEST)).content == "ok"


def test_openai_backend_transport_error_kind():
    def handler(request: httpx.Request) -> httpx.Response:
        raise httpx.ConnectError("refused")

    backend = OpenAICompatibleBackend("stub", _endpoint(retries=0), transport=httpx.MockTransport(handler))
    with pytest.raises(TransportError):
        asyncio.run(backend.chat(REQUEST))


def test_api_key_comes_from_environment(monkeypatch):
    monkeypatch.setenv("STUB_KEY", "secret")
    headers = []

    def handler(request: httpx.Request) -> httpx.Response:
        headers.append(request.headers.get("authorization"))
        return httpx.Response(200, json=_completion("ok"))

    backend = OpenAICompatibleBackend("stub", _endpoint(api_key_env="STUB_KEY"), transport=httpx.MockTransport(handler))
    asyncio.run(backend.chat(REQUEST))
    assert headers == ["Bearer secret"]


# ── anthropic ───────────────────────────────────────────────


class _Block:
    def __init__(self, **kw):
        self.__dict__.update(kw)


class _FakeMessages:
    def __init__(self):
        self.kwargs = None

    async def create(self, **kwargs):
        self.kwargs = kwargs
        return _Block(
            content=[_Block(type="text", text="Searching."),
                     _Block(type="tool_use", name="search", input={"queries": ["q"]})],
            usage=_Block(input_tokens=7, output_tokens=2),
        )


class _FakeClient:
    def __init__(self):
        self.messages = _FakeMessages()


def test_anthropic_backend_converts_messages_and_tools():
    client = _FakeClient()
    backend = AnthropicBackend("claude", EndpointConfig(base_url="", model="claude-x"), client=client)
    resp = asyncio.run(backend.chat(REQUEST))
    kwargs = client.messages.kwargs
    assert kwargs["system"] == "sys"
    assert kwargs["messages"] == [{"role": "user", "content": "hello"}]
    assert kwargs["tools"][0]["name"] == "search"
    assert resp.tool_call.name == "search"
    assert json.loads(resp.tool_call.arguments) == {"queries": ["q"]}
    assert resp.usage.prompt_tokens == 7


# ── scripted ────────────────────────────────────────────────


def test_scripted_any_rule_answers_every_call():
    backend = scripted([{"content": "Exact Answer: 42\nConfidence: 90%"}])
    for _ in range(3):
        assert asyncio.run(backend.chat(REQUEST)).content == "Exact Answer: 42\nConfidence: 90%"
    assert len(backend.calls) == 3


def test_scripted_ordinal_rules_and_exhaustion():
    backend = scripted([
        {"match": {"agent_id": "a0", "ordinal": 1}, "tool_call": {"name": "search", "arguments": "{}"}},
        {"match": {"agent_id": "a0", "ordinal": 2}, "content": "done"},
    ])
    assert asyncio.run(backend.chat(REQUEST)).tool_call.name == "search"
    assert asyncio.run(backend.chat(REQUEST)).content == "done"
    with pytest.raises(ScriptExhausted, match="a0"):
        asyncio.run(backend.chat(REQUEST))


def test_scripted_is_pure():
    rules = [{"match": {"contains": "hello"}, "content": "call {call}"}]
    a, b = scripted(rules), scripted(rules)
    outs_a = [asyncio.run(a.chat(REQUEST)).content for _ in range(3)]
    outs_b = [asyncio.run(b.chat(REQUEST)).content for _ in range(3)]
    assert outs_a == outs_b == ["call 1", "call 2", "call 3"]


def test_scripted_error_rule():
    backend = scripted([{"error": "http_status", "content": "HTTP 429: slow down"}])
    with pytest.raises(HTTPStatusError) as exc:
        asyncio.run(backend.chat(REQUEST))
    assert exc.value.status == 429


# ── replay ──────────────────────────────────────────────────


def test_replay_backend_follows_log_per_agent_and_purpose():
    events = [
        {"kind": "turn", "agent_id": "a0", "payload": {"content": "first", "tool_call": None, "usage": None}},
        {"kind": "hub_write", "agent_id": "a0", "payload": {"summary": "NOTE", "degraded": False}},
        {"kind": "turn", "agent_id": "a0", "payload": {"content": "second",
                                                       "tool_call": {"name": "visit", "arguments": "{}"},
                                                       "usage": {"prompt_tokens": 1, "completion_tokens": 1}}},
        {"kind": "status", "agent_id": "a0", "payload": {"status": "failed", "source": "backend",
                                                         "error_kind": "transport", "error": "down"}},
    ]
    replay = ReplayBackend.from_events(events)
    write_req = REQUEST.model_copy(update={"metadata": {"agent_id": "a0", "purpose": "write"}})
    assert asyncio.run(replay.chat(REQUEST)).content == "first"
    assert asyncio.run(replay.chat(write_req)).content == "NOTE"
    assert asyncio.run(replay.chat(REQUEST)).tool_call.name == "visit"
    with pytest.raises(TransportError):
        asyncio.run(replay.chat(REQUEST))
    with pytest.raises(ScriptExhausted):
        asyncio.run(replay.chat(REQUEST))
