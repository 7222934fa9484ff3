"""
services/baselines.py — Baseline mediati da un meta-agente

- run_naive : pianifica K sottotask, K subagenti indipendenti, sintesi del meta-agente
- run_swarm : il meta-agente crea subagenti e assegna task con due tool dedicati

Nessuno dei due usa l'hub: i subagenti comunicano solo attraverso il meta-agente.
"""
from __future__ import annotations

import logging
import re
from dataclasses import replace
from typing import Mapping, Optional

from services import prompts
from services.backends import BackendError, ChatBackend, ChatMessage, ChatRequest, Sampling
from services.core import Task
from services.errors import RunFailed, ToolArgumentError
from services.runtime import (
    AgentConfig,
    AgentState,
    AgentStatus,
    RunEnv,
    TeamResult,
    initial_state,
    result_from_states,
    run_agent,
    run_states,
)
from services.toolenv import ToolEnv

logger = logging.getLogger(__name__)

SUBAGENT_ROUNDS = 100
META_ROUNDS = 50
DEFAULT_K = 2
DEFAULT_SUBAGENT_PROMPT = "You are a research subagent working on one part of a larger question."

_SUBTASK_RE = re.compile(r"^\s*[*-]?\s*\**subtask\s*(\d+)\**\s*[:.)-]\**\s*(.+?)\s*$", re.IGNORECASE | re.MULTILINE)


def parse_subtasks(text: str, k: int) -> list[str]:
    found: dict[int, str] = {}
    for m in _SUBTASK_RE.finditer(text or ""):
        found.setdefault(int(m.group(1)), m.group(2))
    return [found[n] for n in range(1, k + 1) if n in found]


def partial_report(state: AgentState) -> str:
    """Report di un subagente: la risposta finale, oppure l'ultimo stato utile se ha esaurito il budget."""
    if state.final is not None:
        return state.last_content.strip() or f"Exact Answer: {state.final.answer}"
    lines = [f"(no final answer: status {state.status.value} after {state.rounds_used} rounds)"]
    if state.last_content.strip():
        lines.append(f"Last reasoning: {state.last_content.strip()}")
    if state.context.active:
        lines.append(f"Last observation: {state.context.active[-1].observation}")
    return "\n".join(lines)


def _phase(env: RunEnv, phase: str, **extra) -> None:
    env.log.emit("meta", "status", {"status": "phase", "phase": phase, **extra})


# ── NAIVE ───────────────────────────────────────────────────


async def run_naive(task: Task, k: int, meta_backend: ChatBackend, sub_backend: ChatBackend, tools: ToolEnv,
                    env: RunEnv, scheduler: str = "deterministic", meta_rounds: int = META_ROUNDS,
                    sub_rounds: int = SUBAGENT_ROUNDS) -> TeamResult:
    if k < 1:
        raise ValueError("K deve essere almeno 1")
    env = replace(env, hub=None)
    logger.info(f"🚀 Baseline naive sul task {task.id} con K={k}")
    env.log.emit("runtime", "status", {"status": "started", "mode": "naive", "task_id": task.id, "k": k})

    # 1. pianificazione: un turno del meta-agente
    _phase(env, "plan")
    plan_request = ChatRequest(
        messages=(ChatMessage(role="system", content=prompts.naive_plan(k=k, question=task.question)),
                  ChatMessage(role="user", content="List the subtasks.")),
        sampling=Sampling(max_tokens=env.max_tokens),
        metadata={"agent_id": "meta", "purpose": "agent", "round": 1},
    )
    try:
        plan = await meta_backend.chat(plan_request)
    except BackendError as e:
        env.log.emit("meta", "status", {"status": AgentStatus.FAILED.value, "round": 1, "source": "backend",
                                        "error_kind": e.kind, "error": str(e)})
        raise RunFailed(f"decomposizione fallita: {e}", transcript=list(env.log.events)) from e
    env.log.emit("meta", "turn", {"round": 1, "content": plan.content,
                                  "tool_call": plan.tool_call.model_dump() if plan.tool_call else None,
                                  "usage": plan.usage.model_dump() if plan.usage else None})
    subtasks = parse_subtasks(plan.content, k)
    if len(subtasks) != k:
        env.log.emit("meta", "status", {"status": AgentStatus.FAILED.value, "round": 1, "source": "plan",
                                        "error": f"attesi {k} sottotask, trovati {len(subtasks)}"})
        raise RunFailed(f"decomposizione fallita: attesi {k} sottotask, trovati {len(subtasks)}",
                        transcript=[e for e in env.log.events if e["agent_id"] == "meta"])

    # 2. ricerca parallela: subagenti indipendenti
    _phase(env, "search", subtasks=subtasks)
    subs = []
    for i, subtask in enumerate(subtasks, 1):
        cfg = AgentConfig(agent_id=f"sub-{i}", backend_ref="sub", round_budget=sub_rounds)
        subs.append(initial_state(cfg, task, preamble=prompts.subagent_task(DEFAULT_SUBAGENT_PROMPT, subtask)))
    subs = await run_states(subs, {"sub": sub_backend}, tools, env, scheduler)

    # 3. sintesi nel budget residuo del meta-agente
    reports = "\n\n".join(f"Subtask {i}: {subtask}\nReport from sub-{i}:\n{partial_report(s)}"
                          for i, (subtask, s) in enumerate(zip(subtasks, subs), 1))
    _phase(env, "synthesize")
    meta_cfg = AgentConfig(agent_id="meta", backend_ref="meta", round_budget=meta_rounds)
    meta = initial_state(meta_cfg, task, preamble=prompts.naive_synthesis(question=task.question, reports=reports))
    meta = meta.model_copy(update={"rounds_used": 1})
    if meta.rounds_used < meta_rounds:
        meta = await run_agent(meta, meta_backend, tools, env)
    else:
        meta = meta.model_copy(update={"status": AgentStatus.EXHAUSTED})

    result = result_from_states("naive", task, [meta, *subs], "bon")
    # solo il meta-agente produce il candidato del team
    candidates = [c for c in result.candidates if c.agent_id == "meta"]
    result = result.model_copy(update={"candidates": candidates,
                                       "selected": candidates[0] if candidates else None,
                                       "outcome": "selected" if candidates else "empty_team"})
    env.log.emit("runtime", "status", {"status": "finished", "outcome": result.outcome,
                                       "selected": result.selected.model_dump() if result.selected else None,
                                       "agent_outcomes": result.agent_outcomes, "rounds": result.rounds})
    return result


# ── SWARM ───────────────────────────────────────────────────

SWARM_TOOL_SCHEMAS = [
    {
        "name": "create_subagent",
        "description": "Instantiate a specialized subagent with a stable identifier and its own system prompt.",
        "parameters": {
            "type": "object",
            "properties": {
                "identifier": {"type": "string", "description": "stable identifier used to reuse the subagent"},
                "system_prompt": {"type": "string", "description": "role and instructions of the subagent"},
            },
            "required": ["identifier", "system_prompt"],
        },
    },
    {
        "name": "assign_task",
        "description": "Dispatch a concrete task to an existing subagent and return its report.",
        "parameters": {
            "type": "object",
            "properties": {
                "identifier": {"type": "string", "description": "identifier of a created subagent"},
                "task_description": {"type": "string", "description": "the task to carry out"},
            },
            "required": ["identifier", "task_description"],
        },
    },
]


class SwarmTools:
    """create_subagent / assign_task per il meta-agente; ogni assegnazione è una run ReAct nuova."""

    def __init__(self, task: Task, backend: ChatBackend, tools: ToolEnv, env: RunEnv,
                 sub_rounds: int = SUBAGENT_ROUNDS):
        self.task = task
        self.backend = backend
        self.tools = tools
        self.env = env
        self.sub_rounds = sub_rounds
        self.subagents: dict[str, str] = {}
        self.assignments: dict[str, int] = {}
        self.states: list[AgentState] = []

    def schemas(self) -> list[dict]:
        return SWARM_TOOL_SCHEMAS

    async def call(self, name: str, arguments: dict) -> str:
        identifier = arguments.get("identifier")
        if not isinstance(identifier, str) or not identifier.strip():
            raise ToolArgumentError("argument 'identifier' must be a non-empty string")
        if name == "create_subagent":
            system_prompt = arguments.get("system_prompt")
            if not isinstance(system_prompt, str):
                raise ToolArgumentError("argument 'system_prompt' must be a string")
            return self.create_subagent(identifier, system_prompt)
        description = arguments.get("task_description")
        if not isinstance(description, str) or not description.strip():
            raise ToolArgumentError("argument 'task_description' must be a non-empty string")
        return await self.assign_task(identifier, description)

    def create_subagent(self, identifier: str, system_prompt: str) -> str:
        if identifier in self.subagents:
            return f"ERROR: subagent '{identifier}' already exists; reuse it with assign_task"
        self.subagents[identifier] = system_prompt
        self.assignments[identifier] = 0
        self.env.log.emit("meta", "status", {"status": "subagent_created", "identifier": identifier})
        return f"Subagent '{identifier}' created."

    async def assign_task(self, identifier: str, description: str) -> str:
        if identifier not in self.subagents:
            return f"ERROR: unknown subagent identifier '{identifier}'; create it first with create_subagent"
        self.assignments[identifier] += 1
        n = self.assignments[identifier]
        self.env.log.emit("meta", "status", {"status": "task_assigned", "identifier": identifier,
                                             "assignment": n, "task": description})
        cfg = AgentConfig(agent_id=f"swarm:{identifier}", backend_ref="sub", round_budget=self.sub_rounds)
        state = initial_state(cfg, self.task,
                              preamble=prompts.subagent_task(self.subagents[identifier], description))
        state = await run_agent(state, self.backend, self.tools, self.env)
        self.states.append(state)
        return f"Report from subagent '{identifier}' (assignment {n}, {state.status.value}):\n{partial_report(state)}"


async def run_swarm(task: Task, meta_backend: ChatBackend, tools: ToolEnv, env: RunEnv,
                    sub_backend: Optional[ChatBackend] = None, meta_rounds: int = META_ROUNDS,
                    sub_rounds: int = SUBAGENT_ROUNDS) -> TeamResult:
    env = replace(env, hub=None)
    logger.info(f"🚀 Baseline swarm sul task {task.id}")
    env.log.emit("runtime", "status", {"status": "started", "mode": "swarm", "task_id": task.id})

    swarm = SwarmTools(task, sub_backend or meta_backend, tools, env, sub_rounds=sub_rounds)
    meta_cfg = AgentConfig(agent_id="meta", backend_ref="meta", round_budget=meta_rounds)
    meta = initial_state(meta_cfg, task, preamble=prompts.swarm_meta(task.question))
    meta = await run_agent(meta, meta_backend, tools, env, extra=swarm)

    result = result_from_states("swarm", task, [meta], "bon")
    rounds = dict(result.rounds)
    outcomes = dict(result.agent_outcomes)
    # un subagente riusato accumula i round di tutte le sue assegnazioni
    for s in swarm.states:
        rounds[s.agent_id] = rounds.get(s.agent_id, 0) + s.rounds_used
        outcomes[s.agent_id] = s.status.value
    result = result.model_copy(update={"rounds": rounds, "agent_outcomes": outcomes})
    env.log.emit("runtime", "status", {"status": "finished", "outcome": result.outcome,
                                       "selected": result.selected.model_dump() if result.selected else None,
                                       "agent_outcomes": result.agent_outcomes, "rounds": result.rounds})
    return result
