"""
tests/conftest.py — Costruttori condivisi: corpus di prova, agenti, ambienti di run
"""
from __future__ import annotations

import json
from pathlib import Path

import pytest

from services.backends import ScriptedBackend
from services.core import Task
from services.eventlog import EventLog
from services.hub import HubStore
from services.runtime import AgentConfig, RunEnv
from services.toolenv import Corpus, Document, ToolEnv

ROOT = Path(__file__).resolve().parent.parent

# ~2000 byte: ~500 token con il contatore di default
LONG_BODY = " ".join(f"Ledger line {i}: cloth bales shipped from Ningbo to the Eastern Gate." for i in range(28))

DOCS = [
    Document(url="https://mock.web/dafeng", title="Dafeng foreign cloth store",
             body="The Dafeng store near the Eastern Gate was opened in 1853 and sold foreign cloth."),
    Document(url="https://mock.web/sincere", title="Sincere department store",
             body="Sincere opened its Shanghai branch on Nanjing Road in 1917."),
    Document(url="https://mock.web/ledger", title="Cloth trade ledger", body=LONG_BODY),
]

TASK = Task(id="t-dafeng", question="In which year was the Dafeng store founded?", gold_answer="1853")


def make_task(**overrides) -> Task:
    return TASK.model_copy(update=overrides)


def agent(agent_id: str, **overrides) -> AgentConfig:
    fields = {"agent_id": agent_id, "backend_ref": "scripted", "context_window": 8192,
              "write_trigger": 1024, "round_budget": 20}
    fields.update(overrides)
    return AgentConfig(**fields)


def tool(name: str, **arguments) -> dict:
    return {"name": name, "arguments": json.dumps(arguments, sort_keys=True)}


def answer(text: str, confidence: int) -> str:
    return f"Explanation: done.\nExact Answer: {text}\nConfidence: {confidence}%"


def scripted(rules: list[dict], name: str = "scripted") -> ScriptedBackend:
    return ScriptedBackend.from_rules(name, rules)


def hub_model_rules() -> list[dict]:
    """Write e read model deterministici: la nota e il readout identificano l'episodio."""
    return [
        {"match": {"purpose": "write"}, "content": "NOTE({owner},{ordinal})"},
        {"match": {"purpose": "read"}, "content": "EXTRACT({goal},{page})"},
    ]


@pytest.fixture
def corpus() -> Corpus:
    return Corpus(DOCS)


@pytest.fixture
def tools(corpus) -> ToolEnv:
    return ToolEnv(corpus=corpus)


@pytest.fixture
def env() -> RunEnv:
    return RunEnv(log=EventLog(), hub=HubStore())


@pytest.fixture
def env_no_hub() -> RunEnv:
    return RunEnv(log=EventLog())
