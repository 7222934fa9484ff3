"""
services/core.py — Tipi di dominio condivisi, conteggio token e parsing della risposta finale

Tutti i tipi sono value object immutabili (pydantic frozen): si possono passare
tra agenti concorrenti senza coordinamento.
"""
from __future__ import annotations

import json
import math
import re
from enum import Enum
from typing import Any, Optional, Protocol

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from services.errors import NoCommittedAnswer

# ── TOKEN ───────────────────────────────────────────────────


class TokenCounter(Protocol):
    def count(self, text: str) -> int: ...


class ByteQuarterCounter:
    """Contatore di default: ceil(byte UTF-8 / 4)."""

    def count(self, text: str) -> int:
        if not text:
            return 0
        return math.ceil(len(text.encode("utf-8")) / 4)


DEFAULT_COUNTER = ByteQuarterCounter()


def count_tokens(text: str, counter: Optional[TokenCounter] = None) -> int:
    return (counter or DEFAULT_COUNTER).count(text)


def truncate_to_tokens(text: str, max_tokens: int, counter: Optional[TokenCounter] = None) -> str:
    """Prefisso più lungo di `text` che sta in `max_tokens` (ricerca binaria sui caratteri)."""
    if max_tokens <= 0:
        return ""
    if count_tokens(text, counter) <= max_tokens:
        return text
    lo, hi = 0, len(text)
    while lo < hi:
        mid = (lo + hi + 1) // 2
        if count_tokens(text[:mid], counter) <= max_tokens:
            lo = mid
        else:
            hi = mid - 1
    return text[:lo]


# ── MODELS ──────────────────────────────────────────────────

_FROZEN = ConfigDict(frozen=True)


class ToolProfile(str, Enum):
    WEB = "web"
    WEB_PYTHON_SCHOLAR = "web+python+scholar"


class Task(BaseModel):
    model_config = _FROZEN

    id: str = Field(min_length=1)
    question: str
    gold_answer: Optional[str] = None
    tool_profile: ToolProfile = ToolProfile.WEB


class ActionRecord(BaseModel):
    model_config = _FROZEN

    tool: str
    arguments: dict[str, Any] = Field(default_factory=dict)
    reasoning: str = ""

    def render(self) -> str:
        args = json.dumps(self.arguments, ensure_ascii=False, sort_keys=True)
        head = f"Thought: {self.reasoning}\n" if self.reasoning else ""
        return f"{head}Action: {self.tool} {args}"


class TrajectoryStep(BaseModel):
    model_config = _FROZEN

    index: int = Field(ge=0)
    action: ActionRecord
    observation: str = ""
    token_cost: int = Field(ge=0)

    @classmethod
    def build(cls, index: int, action: ActionRecord, observation: str,
              counter: Optional[TokenCounter] = None) -> "TrajectoryStep":
        cost = count_tokens(action.render(), counter) + count_tokens(observation, counter)
        return cls(index=index, action=action, observation=observation, token_cost=cost)

    def render(self) -> str:
        return f"[step {self.index}]\n{self.action.render()}\nObservation: {self.observation}"


def _check_contiguous(steps: tuple[TrajectoryStep, ...]) -> None:
    for prev, cur in zip(steps, steps[1:]):
        if cur.index != prev.index + 1:
            raise ValueError(f"indici degli step non contigui: {prev.index} → {cur.index}")


class EpisodeRef(BaseModel):
    model_config = _FROZEN

    owner: str
    ordinal: int = Field(ge=1)

    def __str__(self) -> str:
        return f"({self.owner},{self.ordinal})"


class Episode(BaseModel):
    model_config = _FROZEN

    owner: str
    ordinal: int = Field(ge=1)
    steps: tuple[TrajectoryStep, ...]
    token_total: int = Field(ge=0)

    @model_validator(mode="after")
    def _validate(self) -> "Episode":
        if not self.steps:
            raise ValueError("un episodio deve contenere almeno uno step")
        _check_contiguous(self.steps)
        if self.token_total != sum(s.token_cost for s in self.steps):
            raise ValueError("token_total diverso dalla somma dei token_cost")
        return self

    @classmethod
    def close(cls, owner: str, ordinal: int, steps) -> "Episode":
        steps = tuple(steps)
        return cls(owner=owner, ordinal=ordinal, steps=steps,
                   token_total=sum(s.token_cost for s in steps))

    @property
    def ref(self) -> EpisodeRef:
        return EpisodeRef(owner=self.owner, ordinal=self.ordinal)

    def render(self) -> str:
        return "\n\n".join(s.render() for s in self.steps)


class EpisodeNote(BaseModel):
    model_config = _FROZEN

    episode_ref: EpisodeRef
    summary: str = Field(min_length=1)
    created_at: int = Field(ge=0)
    degraded: bool = False
    terminal: bool = False


class WorkingContext(BaseModel):
    model_config = _FROZEN

    own_notes: tuple[EpisodeNote, ...] = ()
    teammate_notes: tuple[EpisodeNote, ...] = ()
    readouts: tuple[str, ...] = ()
    active: tuple[TrajectoryStep, ...] = ()
    system_preamble: str = ""

    @field_validator("own_notes")
    @classmethod
    def _own_sorted(cls, notes: tuple[EpisodeNote, ...]) -> tuple[EpisodeNote, ...]:
        ordinals = [n.episode_ref.ordinal for n in notes]
        if ordinals != sorted(ordinals):
            raise ValueError("own_notes deve essere ordinato per ordinale")
        return notes

    def token_size(self, counter: Optional[TokenCounter] = None) -> int:
        return (
            count_tokens(self.system_preamble, counter)
            + self.notes_tokens(counter)
            + sum(count_tokens(r, counter) for r in self.readouts)
            + sum(s.token_cost for s in self.active)
        )

    def notes_tokens(self, counter: Optional[TokenCounter] = None) -> int:
        return sum(count_tokens(n.summary, counter) for n in self.own_notes + self.teammate_notes)


class CandidateAnswer(BaseModel):
    model_config = _FROZEN

    agent_id: str
    answer: str
    confidence: float = Field(ge=0.0, le=1.0)
    tool_calls: int = Field(default=0, ge=0)


class ParsedAnswer(BaseModel):
    model_config = _FROZEN

    answer: str
    confidence: float


# ── FINAL ANSWER ────────────────────────────────────────────

DEFAULT_CONFIDENCE = 0.5

_ANSWER_RE = re.compile(r"^[ \t*_>#-]*exact answer[ \t*_]*:[ \t*_]*(.*?)[ \t*_]*$", re.IGNORECASE | re.MULTILINE)
_CONF_RE = re.compile(r"^[ \t*_>#-]*confidence[ \t*_]*:[ \t*_]*(-?\d+(?:\.\d+)?)[ \t]*%?", re.IGNORECASE | re.MULTILINE)


def parse_final_answer(agent_output: str) -> ParsedAnswer:
    m = _ANSWER_RE.search(agent_output or "")
    if not m or not m.group(1).strip():
        raise NoCommittedAnswer("nessuna riga 'Exact Answer:' nell'output dell'agente")
    confidence = DEFAULT_CONFIDENCE
    c = _CONF_RE.search(agent_output)
    if c:
        confidence = min(1.0, max(0.0, float(c.group(1)) / 100.0))
    return ParsedAnswer(answer=m.group(1).strip(), confidence=confidence)


def format_final_answer(answer: str, confidence: float, explanation: str = "") -> str:
    lines = [f"Explanation: {explanation}"] if explanation else []
    lines.append(f"Exact Answer: {answer}")
    lines.append(f"Confidence: {round(confidence * 100)}%")
    return "\n".join(lines)
