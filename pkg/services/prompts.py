"""
services/prompts.py — Caricamento dei template di prompt versionati (cartella prompts/)
"""
from functools import lru_cache
from pathlib import Path

PROMPTS_DIR = Path(__file__).resolve().parent.parent / "prompts"
PROMPT_VERSION = "v1"


@lru_cache()
def load_prompt(name: str, version: str = PROMPT_VERSION) -> str:
    path = PROMPTS_DIR / f"{name}.{version}.txt"
    return path.read_text(encoding="utf-8").strip("\n")


def normalize_whitespace(text: str) -> str:
    return " ".join(text.split())


# Prompt dell'hub
def memory_manager_system() -> str:
    return load_prompt("memory_manager_system")


def window_summary_user(window_content: str) -> str:
    return load_prompt("window_summary_user").format(window_content=window_content)


def consult_system() -> str:
    return load_prompt("consult_system")


def consult_incremental_user(goal: str, previous_summary: str, page_content: str) -> str:
    return load_prompt("consult_incremental_user").format(
        goal=goal, previous_summary=previous_summary, page_content=page_content
    )


def memory_tool_schema() -> dict:
    return {
        "name": "memory",
        "description": load_prompt("memory_tool_description"),
        "parameters": {
            "type": "object",
            "properties": {
                "pages": {
                    "type": "array",
                    "items": {"type": "integer"},
                    "maxItems": 5,
                    "description": load_prompt("memory_tool_pages"),
                },
                "goal": {"type": "string", "description": load_prompt("memory_tool_goal")},
            },
            "required": ["pages", "goal"],
        },
    }


# Prompt degli agenti e dei baseline
def agent_system(question: str) -> str:
    return load_prompt("agent_system").format(question=question)


def naive_plan(k: int, question: str) -> str:
    return load_prompt("naive_plan").format(k=k, question=question)


def naive_synthesis(question: str, reports: str) -> str:
    return load_prompt("naive_synthesis").format(question=question, reports=reports)


def swarm_meta(question: str) -> str:
    return load_prompt("swarm_meta").format(question=question)


def subagent_task(system_prompt: str, task: str) -> str:
    return load_prompt("subagent_task").format(system_prompt=system_prompt, task=task)


def judge(gold: str, answer: str) -> str:
    return load_prompt("judge").format(gold=gold, answer=answer)
