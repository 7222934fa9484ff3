"""
services/runtime.py — Loop ReAct per agente e runner del team

Un turno di step_agent:
  1. confine di turno: note dei compagni aggiornate, write-trigger, evizione, trimming
  2. prompt = [preambolo ∥ note compagni ∥ note proprie ∥ readout ∥ step attivi]
  3. una chiamata al modello, poi tool / memory / risposta finale
  4. osservazione in coda al segmento attivo, rounds_used + 1

Ogni passaggio rilevante finisce nell'event log (services/eventlog.py).
"""
from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Any, Mapping, Optional, Protocol

import httpx
from pydantic import BaseModel, ConfigDict, Field, model_validator

from services import prompts
from services.aggregate import SELECTION_RULES, select
from services.backends import BackendError, ChatBackend, ChatMessage, ChatRequest, Sampling, ToolCall
from services.core import (
    DEFAULT_COUNTER,
    ActionRecord,
    CandidateAnswer,
    Episode,
    EpisodeRef,
    Task,
    TokenCounter,
    ToolProfile,
    TrajectoryStep,
    WorkingContext,
    count_tokens,
    parse_final_answer,
    truncate_to_tokens,
)
from services.errors import FugueError, NoCommittedAnswer, ProtocolViolation, ToolArgumentError, ToolUnavailable
from services.eventlog import EventLog
from services.hub import MAX_READ_REFS, HubReadError, HubStore, ReadRequest
from services.toolenv import ToolEnv, tool_schemas

logger = logging.getLogger(__name__)

DEFAULT_CONTEXT_WINDOW = 131072
DEFAULT_WRITE_TRIGGER = 65536
DEFAULT_ROUND_BUDGET = 150

TRUNCATION_MARKER = "\n[observation truncated to fit the context window]"
OBSERVATION_PREFIX = "Observation: "
FORMAT_ERROR = (
    "ERROR: no tool call and no final answer found. Call exactly one tool, or reply with "
    "'Exact Answer: ...' and 'Confidence: N%'."
)

# ── CONFIG ──────────────────────────────────────────────────


class AgentSampling(BaseModel):
    model_config = ConfigDict(frozen=True)

    temperature: float = Field(default=0.0, ge=0.0)
    seed: Optional[int] = None


class AgentConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    agent_id: str = Field(min_length=1)
    backend_ref: str = Field(min_length=1)
    system_prompt: str = ""
    context_window: int = DEFAULT_CONTEXT_WINDOW
    write_trigger: int = DEFAULT_WRITE_TRIGGER
    round_budget: int = DEFAULT_ROUND_BUDGET
    sampling: AgentSampling = AgentSampling()

    @model_validator(mode="after")
    def _budgets(self) -> "AgentConfig":
        if not 0 < self.write_trigger <= self.context_window:
            raise ValueError(
                f"write_trigger ({self.write_trigger}) deve essere in (0, context_window={self.context_window}]"
            )
        if self.round_budget <= 0:
            raise ValueError("round_budget deve essere positivo")
        return self


class TeamConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    task: Task
    agents: tuple[AgentConfig, ...] = Field(min_length=1)
    hub_enabled: bool = True
    selector: str = "bon"

    @model_validator(mode="after")
    def _team(self) -> "TeamConfig":
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError(f"agent_id duplicati nel team: {ids}")
        if self.selector not in SELECTION_RULES:
            raise ValueError(f"selector '{self.selector}' non valido, ammessi: {sorted(SELECTION_RULES)}")
        return self


# ── STATE ───────────────────────────────────────────────────


class AgentStatus(str, Enum):
    RUNNING = "running"
    ANSWERED = "answered"
    EXHAUSTED = "exhausted"
    FAILED = "failed"


class AgentState(BaseModel):
    model_config = ConfigDict(frozen=True)

    config: AgentConfig
    tool_profile: ToolProfile = ToolProfile.WEB
    context: WorkingContext = WorkingContext()
    rounds_used: int = 0
    tool_calls: int = 0
    status: AgentStatus = AgentStatus.RUNNING
    final: Optional[CandidateAnswer] = None
    next_index: int = 0
    error: Optional[str] = None
    last_content: str = ""
    # note dei compagni scartate per overflow: restano fuori dal contesto
    dropped_notes: frozenset[EpisodeRef] = frozenset()

    @model_validator(mode="after")
    def _consistent(self) -> "AgentState":
        if self.rounds_used > self.config.round_budget:
            raise ValueError("rounds_used oltre il round_budget")
        if self.status == AgentStatus.ANSWERED and self.final is None:
            raise ValueError("stato answered senza risposta finale")
        return self

    @property
    def agent_id(self) -> str:
        return self.config.agent_id


def agent_preamble(config: AgentConfig, task: Task) -> str:
    if config.system_prompt:
        return f"{config.system_prompt}\n\nQuestion:\n{task.question}"
    return prompts.agent_system(task.question)


def initial_state(config: AgentConfig, task: Task, preamble: Optional[str] = None) -> AgentState:
    return AgentState(
        config=config,
        tool_profile=task.tool_profile,
        context=WorkingContext(system_preamble=preamble if preamble is not None else agent_preamble(config, task)),
    )


@dataclass
class RunEnv:
    """Dipendenze condivise da tutti gli agenti di una run."""

    log: EventLog
    hub: Optional[HubStore] = None
    write_model: Optional[ChatBackend] = None
    read_model: Optional[ChatBackend] = None
    counter: TokenCounter = DEFAULT_COUNTER
    max_tokens: int = 4096

    @property
    def hub_enabled(self) -> bool:
        return self.hub is not None


class ExtraTools(Protocol):
    """Tool aggiuntivi di un agente (usati dal meta-agente Swarm)."""

    def schemas(self) -> list[dict]: ...

    async def call(self, name: str, arguments: dict) -> str: ...


# ── TRIGGER E PROMPT ────────────────────────────────────────


def check_write_trigger(context: WorkingContext, trigger_tokens: int,
                        counter: Optional[TokenCounter] = None) -> bool:
    return context.token_size(counter) >= trigger_tokens


def memory_block(context: WorkingContext, hub: Optional[HubStore], requester: str = "") -> str:
    """Note dei compagni, note proprie e readout; le pagine portano il numero dell'indice del richiedente."""
    lines = ["## Exploration Memory"]
    if hub is not None:
        for title, notes in (("### Teammate pages", context.teammate_notes), ("### Your pages", context.own_notes)):
            if notes:
                lines.append(title)
            for note in notes:
                ref = note.episode_ref
                lines.append(f"Page {hub.page_number(ref, requester)} [agent {ref.owner}, episode {ref.ordinal}]: "
                             f"{note.summary}")
    if context.readouts:
        lines.append("### Readouts")
    for n, readout in enumerate(context.readouts, 1):
        lines.append(f"Readout {n}: {readout}")
    if len(lines) == 1:
        lines.append("(empty)")
    return "\n".join(lines)


def prompt_messages(context: WorkingContext, hub: Optional[HubStore], requester: str = "") -> list[ChatMessage]:
    messages = [
        ChatMessage(role="system", content=context.system_preamble),
        ChatMessage(role="user", content=memory_block(context, hub, requester)),
    ]
    for step in context.active:
        messages.append(ChatMessage(role="assistant", content=step.action.render()))
        messages.append(ChatMessage(role="user", content=OBSERVATION_PREFIX + step.observation))
    return messages


def prompt_tokens(messages: list[ChatMessage], counter: Optional[TokenCounter] = None) -> int:
    return sum(count_tokens(m.content, counter) for m in messages)


def fit_to_room(text: str, room: int, counter: Optional[TokenCounter] = None) -> tuple[str, bool]:
    if count_tokens(text, counter) <= room:
        return text, False
    marker = count_tokens(TRUNCATION_MARKER, counter)
    return truncate_to_tokens(text, room - marker, counter) + TRUNCATION_MARKER, True


# ── CONFINE DI TURNO ────────────────────────────────────────


async def _write_episode(state: AgentState, context: WorkingContext, env: RunEnv, backend: ChatBackend,
                         terminal: bool, tokens: int) -> WorkingContext:
    hub = env.hub
    owner = state.agent_id
    episode = Episode.close(owner, hub.next_ordinal(owner), context.active)
    ref, note = await hub.write_episode(owner, episode, env.write_model or backend, terminal=terminal)
    error = hub.write_errors.get(ref)
    env.log.emit(owner, "hub_write", {
        "round": state.rounds_used + 1,
        "ordinal": ref.ordinal,
        "steps": [s.index for s in episode.steps],
        "episode_tokens": episode.token_total,
        "tokens": tokens,
        "summary": note.summary,
        "degraded": note.degraded,
        "terminal": terminal,
        "error_kind": error.kind if error else None,
        "error": str(error) if error else None,
    })
    return hub.evict_and_replace(context, ref, note)


async def _turn_boundary(state: AgentState, env: RunEnv, backend: ChatBackend) -> tuple[AgentState, int, bool]:
    cfg, counter = state.config, env.counter
    ctx = state.context
    dropped_notes = set(state.dropped_notes)
    if env.hub is not None:
        teammates = tuple(n for n in env.hub.visible_notes(state.agent_id) if n.episode_ref not in dropped_notes)
        ctx = ctx.model_copy(update={"teammate_notes": teammates})

    boundary = ctx.token_size(counter)
    fired = boundary >= cfg.write_trigger
    wrote = False
    trimmed = {"active": 0, "readouts": 0, "teammate_notes": 0}

    if fired and ctx.active:
        if env.hub is not None:
            ctx = await _write_episode(state, ctx, env, backend, terminal=False, tokens=boundary)
            wrote = True
        else:
            active = list(ctx.active)
            while len(active) > 1 and ctx.model_copy(update={"active": tuple(active)}).token_size(counter) >= cfg.write_trigger:
                active.pop(0)
                trimmed["active"] += 1
            ctx = ctx.model_copy(update={"active": tuple(active)})

    # Overflow patologico: prima i readout più vecchi, poi le note dei compagni; mai le proprie
    while check_write_trigger(ctx, cfg.write_trigger, counter) and (ctx.readouts or ctx.teammate_notes):
        ctx, dropped = _drop_oldest_memory(ctx)
        if dropped is not None:
            dropped_notes.add(dropped)
            trimmed["teammate_notes"] += 1
        else:
            trimmed["readouts"] += 1

    # Finestra: l'intestazione delle pagine pesa sul prompt assemblato
    while prompt_tokens(prompt_messages(ctx, env.hub, state.agent_id), counter) > cfg.context_window:
        if ctx.readouts or ctx.teammate_notes:
            ctx, dropped = _drop_oldest_memory(ctx)
            if dropped is not None:
                dropped_notes.add(dropped)
                trimmed["teammate_notes"] += 1
            else:
                trimmed["readouts"] += 1
        elif ctx.active and env.hub is not None:
            # con l'hub gli step escono dalla finestra solo archiviati come episodio
            ctx = await _write_episode(state, ctx, env, backend, terminal=False, tokens=ctx.token_size(counter))
            wrote = True
        elif ctx.active:
            ctx = ctx.model_copy(update={"active": ctx.active[1:]})
            trimmed["active"] += 1
        else:
            logger.error(f"{state.agent_id}: preambolo e note proprie superano la finestra di contesto")
            break

    if any(trimmed.values()):
        env.log.emit(state.agent_id, "status", {
            "status": "context_trimmed",
            "round": state.rounds_used + 1,
            "dropped": trimmed,
            "tokens_before": boundary,
            "tokens_after": ctx.token_size(counter),
        })
    state = state.model_copy(update={"context": ctx, "dropped_notes": frozenset(dropped_notes)})
    return state, boundary, wrote


def _drop_oldest_memory(ctx: WorkingContext) -> tuple[WorkingContext, Optional[EpisodeRef]]:
    if ctx.readouts:
        return ctx.model_copy(update={"readouts": ctx.readouts[1:]}), None
    dropped = ctx.teammate_notes[0].episode_ref
    return ctx.model_copy(update={"teammate_notes": ctx.teammate_notes[1:]}), dropped


# ── MEMORY TOOL ─────────────────────────────────────────────


def _validate_memory_args(pages: Any, goal: Any) -> tuple[list[int], str]:
    if not isinstance(pages, list) or not all(isinstance(p, int) and not isinstance(p, bool) for p in pages):
        raise ToolArgumentError("argument 'pages' must be an array of integer page numbers")
    if not 1 <= len(pages) <= MAX_READ_REFS:
        raise ToolArgumentError(f"argument 'pages' must contain between 1 and {MAX_READ_REFS} page numbers, got {len(pages)}")
    if len(set(pages)) != len(pages):
        raise ToolArgumentError("argument 'pages' contains duplicate page numbers")
    if not isinstance(goal, str) or not goal.strip():
        raise ToolArgumentError("argument 'goal' must be a non-empty string")
    return pages, goal.strip()


async def memory_tool(requester: str, pages: Any, goal: Any, hub: HubStore, read_model: ChatBackend,
                      log: Optional[EventLog] = None, round_no: Optional[int] = None) -> str:
    """Lettura guidata da un intento: numeri di pagina → episodi grezzi → readout del read model.

    Gli argomenti vengono validati prima di qualsiasi accesso all'hub.
    """
    pages, goal = _validate_memory_args(pages, goal)
    refs = hub.resolve_pages(pages, requester)
    request = ReadRequest(requester=requester, intent=goal, refs=tuple(refs))
    payload = {"round": round_no, "pages": pages, "refs": [str(r) for r in refs], "goal": goal}
    try:
        outputs = await hub.read_pages(request, read_model)
    except HubReadError as e:
        if log is not None:
            log.emit(requester, "hub_read", {**payload, "page_outputs": e.page_outputs, "readout": None,
                                             "error_kind": e.cause.kind, "error": str(e.cause)})
        raise
    readout = outputs[-1]
    if log is not None:
        log.emit(requester, "hub_read", {**payload, "page_outputs": outputs, "readout": readout,
                                         "error_kind": None, "error": None})
    return readout


# ── STEP ────────────────────────────────────────────────────


def _parse_arguments(call: ToolCall) -> dict:
    try:
        args = json.loads(call.arguments or "{}")
    except json.JSONDecodeError as e:
        raise ToolArgumentError(f"malformed tool arguments for '{call.name}': {e.msg}") from e
    if not isinstance(args, dict):
        raise ToolArgumentError(f"tool arguments for '{call.name}' must be a JSON object")
    return args


async def _dispatch(state: AgentState, call: ToolCall, args: dict, tools: ToolEnv, env: RunEnv,
                    backend: ChatBackend, extra: Optional[ExtraTools], room: int) -> tuple[str, WorkingContext]:
    ctx = state.context
    round_no = state.rounds_used + 1
    if call.name == "memory":
        if env.hub is None:
            raise ToolUnavailable("memory")
        readout = await memory_tool(state.agent_id, args.get("pages"), args.get("goal"), env.hub,
                                    env.read_model or backend, log=env.log, round_no=round_no)
        readout, _ = fit_to_room(readout, room, env.counter)
        ctx = ctx.model_copy(update={"readouts": ctx.readouts + (readout,)})
        return (f"Memory readout for pages {args.get('pages')} added to Exploration Memory "
                f"as Readout {len(ctx.readouts)}."), ctx
    if extra is not None and call.name in {s["name"] for s in extra.schemas()}:
        return await extra.call(call.name, args), ctx
    return await tools.call(state.tool_profile, call.name, args), ctx


async def step_agent(state: AgentState, backend: ChatBackend, tools: ToolEnv, env: RunEnv,
                     extra: Optional[ExtraTools] = None) -> AgentState:
    """Esegue un turno del modello e restituisce il nuovo stato (lo stato in ingresso non cambia)."""
    if state.status != AgentStatus.RUNNING:
        raise ProtocolViolation(f"{state.agent_id}: step su un agente in stato {state.status.value}")
    if state.rounds_used >= state.config.round_budget:
        raise ProtocolViolation(f"{state.agent_id}: budget di round esaurito")

    cfg, counter, log = state.config, env.counter, env.log
    agent_id = state.agent_id
    round_no = state.rounds_used + 1

    state, boundary, wrote = await _turn_boundary(state, env, backend)
    ctx = state.context
    messages = prompt_messages(ctx, env.hub, agent_id)
    n_prompt = prompt_tokens(messages, counter)

    schemas = tool_schemas(state.tool_profile, with_memory=env.hub is not None)
    if extra is not None:
        schemas = schemas + extra.schemas()
    request = ChatRequest(
        messages=tuple(messages),
        tool_schemas=tuple(schemas),
        sampling=Sampling(temperature=cfg.sampling.temperature, seed=cfg.sampling.seed, max_tokens=env.max_tokens),
        metadata={"agent_id": agent_id, "purpose": "agent", "round": round_no},
    )
    try:
        response = await backend.chat(request)
    except BackendError as e:
        logger.error(f"{agent_id}: backend {backend.name} fallito al round {round_no}: {e}")
        log.emit(agent_id, "status", {"status": AgentStatus.FAILED.value, "round": round_no, "source": "backend",
                                      "error_kind": e.kind, "error": str(e)})
        return state.model_copy(update={"status": AgentStatus.FAILED, "error": f"{e.kind}: {e}"})

    def page_numbers(notes) -> list[int]:
        return [env.hub.page_number(n.episode_ref, agent_id) for n in notes] if env.hub else []

    log.emit(agent_id, "turn", {
        "round": round_no,
        "boundary_tokens": boundary,
        "wrote_episode": wrote,
        "context_tokens": ctx.token_size(counter),
        "prompt_tokens": n_prompt,
        "context_window": cfg.context_window,
        "write_trigger": cfg.write_trigger,
        "own_notes": page_numbers(ctx.own_notes),
        "teammate_notes": page_numbers(ctx.teammate_notes),
        "readouts": len(ctx.readouts),
        "content": response.content,
        "tool_call": response.tool_call.model_dump() if response.tool_call else None,
        "usage": response.usage.model_dump() if response.usage else None,
    })

    updates: dict[str, Any] = {"rounds_used": round_no, "last_content": response.content}
    call = response.tool_call

    if call is None:
        try:
            parsed = parse_final_answer(response.content)
        except NoCommittedAnswer:
            action = ActionRecord(tool="reply", reasoning=response.content.strip())
            state = _append_step(state, action, FORMAT_ERROR, n_prompt, counter)
        else:
            final = CandidateAnswer(agent_id=agent_id, answer=parsed.answer, confidence=parsed.confidence,
                                    tool_calls=state.tool_calls)
            log.emit(agent_id, "answer", {"round": round_no, "answer": final.answer,
                                          "confidence": final.confidence, "tool_calls": final.tool_calls})
            if env.hub is not None and ctx.active:
                ctx = await _write_episode(state, ctx, env, backend, terminal=True, tokens=ctx.token_size(counter))
            logger.info(f"{agent_id}: risposta al round {round_no} → {final.answer!r} ({final.confidence:.0%})")
            return state.model_copy(update={**updates, "context": ctx, "status": AgentStatus.ANSWERED,
                                            "final": final})
    else:
        log.emit(agent_id, "tool_call", {"round": round_no, "name": call.name, "arguments": call.arguments})
        action = ActionRecord(tool=call.name, reasoning=response.content.strip())
        ok = False
        try:
            args = _parse_arguments(call)
            action = ActionRecord(tool=call.name, arguments=args, reasoning=response.content.strip())
            room = _observation_room(n_prompt, action, cfg.context_window, counter)
            observation, ctx = await _dispatch(state, call, args, tools, env, backend, extra, room)
            ok = True
        except FugueError as e:
            observation = f"ERROR: {e}"
        except httpx.HTTPError as e:
            observation = f"ERROR: tool '{call.name}' failed: {e}"

        room = _observation_room(n_prompt, action, cfg.context_window, counter)
        observation, truncated = fit_to_room(observation, room, counter)
        log.emit(agent_id, "tool_result", {"round": round_no, "name": call.name, "ok": ok,
                                           "observation": observation, "truncated": truncated})
        state = state.model_copy(update={"context": ctx})
        state = _append_step(state, action, observation, n_prompt, counter)
        if ok:
            updates["tool_calls"] = state.tool_calls + 1

    state = state.model_copy(update=updates)
    if state.rounds_used >= cfg.round_budget:
        log.emit(agent_id, "status", {"status": AgentStatus.EXHAUSTED.value, "round": round_no,
                                      "rounds_used": state.rounds_used})
        logger.info(f"{agent_id}: budget di {cfg.round_budget} round esaurito senza risposta")
        state = state.model_copy(update={"status": AgentStatus.EXHAUSTED})
    return state


def _observation_room(n_prompt: int, action: ActionRecord, window: int, counter: Optional[TokenCounter]) -> int:
    return window - n_prompt - count_tokens(action.render(), counter) - count_tokens(OBSERVATION_PREFIX, counter)


def _append_step(state: AgentState, action: ActionRecord, observation: str, n_prompt: int,
                 counter: Optional[TokenCounter]) -> AgentState:
    room = _observation_room(n_prompt, action, state.config.context_window, counter)
    observation, _ = fit_to_room(observation, room, counter)
    step = TrajectoryStep.build(state.next_index, action, observation, counter)
    ctx = state.context.model_copy(update={"active": state.context.active + (step,)})
    return state.model_copy(update={"context": ctx, "next_index": state.next_index + 1})


async def run_agent(state: AgentState, backend: ChatBackend, tools: ToolEnv, env: RunEnv,
                    extra: Optional[ExtraTools] = None) -> AgentState:
    while state.status == AgentStatus.RUNNING:
        state = await step_agent(state, backend, tools, env, extra)
    return state


# ── TEAM ────────────────────────────────────────────────────


class TeamResult(BaseModel):
    mode: str
    task_id: str
    candidates: list[CandidateAnswer] = Field(default_factory=list)
    agent_outcomes: dict[str, str] = Field(default_factory=dict)
    rounds: dict[str, int] = Field(default_factory=dict)
    failures: dict[str, str] = Field(default_factory=dict)
    selector: Optional[str] = None
    selected: Optional[CandidateAnswer] = None
    outcome: str = "selected"  # selected | empty_team

    @property
    def total_rounds(self) -> int:
        return sum(self.rounds.values())


def result_from_states(mode: str, task: Task, states: list[AgentState], selector: str) -> TeamResult:
    candidates = [s.final for s in states if s.status == AgentStatus.ANSWERED and s.final is not None]
    selected = select(selector, candidates) if candidates else None
    return TeamResult(
        mode=mode,
        task_id=task.id,
        candidates=candidates,
        agent_outcomes={s.agent_id: s.status.value for s in states},
        rounds={s.agent_id: s.rounds_used for s in states},
        failures={s.agent_id: s.error for s in states if s.error},
        selector=selector,
        selected=selected,
        outcome="selected" if selected is not None else "empty_team",
    )


async def run_states(states: list[AgentState], backends: Mapping[str, ChatBackend], tools: ToolEnv,
                     env: RunEnv, scheduler: str = "deterministic") -> list[AgentState]:
    """deterministic: round-robin, un turno per agente a rotazione. live: agenti concorrenti."""
    for s in states:
        if s.config.backend_ref not in backends:
            raise ValueError(f"backend '{s.config.backend_ref}' non configurato per {s.agent_id}")

    if scheduler == "live":
        return list(await asyncio.gather(*(run_agent(s, backends[s.config.backend_ref], tools, env) for s in states)))
    if scheduler != "deterministic":
        raise ValueError(f"scheduler sconosciuto: {scheduler}")

    states = list(states)
    while any(s.status == AgentStatus.RUNNING for s in states):
        for i, s in enumerate(states):
            if s.status == AgentStatus.RUNNING:
                states[i] = await step_agent(s, backends[s.config.backend_ref], tools, env)
    return states


async def run_team(config: TeamConfig, backends: Mapping[str, ChatBackend], tools: ToolEnv, env: RunEnv,
                   scheduler: str = "deterministic") -> TeamResult:
    if config.hub_enabled:
        if env.hub is None:
            env = replace(env, hub=HubStore(counter=env.counter))
    else:
        env = replace(env, hub=None)

    logger.info(f"🚀 Team di {len(config.agents)} agenti sul task {config.task.id} "
                f"(hub {'attivo' if config.hub_enabled else 'disattivo'}, scheduler {scheduler})")
    env.log.emit("runtime", "status", {"status": "started", "mode": "team", "task_id": config.task.id,
                                       "agents": [a.agent_id for a in config.agents],
                                       "hub_enabled": config.hub_enabled})
    states = [initial_state(a, config.task) for a in config.agents]
    states = await run_states(states, backends, tools, env, scheduler)

    result = result_from_states("team", config.task, states, config.selector)
    env.log.emit("runtime", "status", {
        "status": "finished",
        "outcome": result.outcome,
        "selected": result.selected.model_dump() if result.selected else None,
        "agent_outcomes": result.agent_outcomes,
        "rounds": result.rounds,
    })
    if result.selected is None:
        logger.warning(f"Task {config.task.id}: nessun agente ha risposto")
    else:
        logger.info(f"✅ Task {config.task.id}: selezionata la risposta di {result.selected.agent_id}")
    return result
