"""
services/aggregate.py — Regole di aggregazione delle risposte del team e giudici

Regole di selezione: bon, mv, wmv, fewtool. Metriche: avg, pass_at_k.
Tutte le regole sono indipendenti dall'ordine dei candidati: l'ultimo spareggio
è sempre l'agent_id più basso.
"""
from __future__ import annotations

import logging
import re
from math import comb
from typing import Callable, Hashable, Iterable, Literal, Optional, Protocol

from pydantic import BaseModel, ConfigDict, model_validator

from services import prompts
from services.backends import BackendError, ChatBackend, ChatMessage, ChatRequest
from services.core import CandidateAnswer
from services.errors import AggregationError

logger = logging.getLogger(__name__)

WMV_TOLERANCE = 1e-9

Equivalence = Callable[[str], Hashable]

_PUNCT_RE = re.compile(r"[^\w\s]", re.UNICODE)


def normalize_answer(text: str) -> str:
    """Minuscolo, senza punteggiatura, spazi compattati."""
    return " ".join(_PUNCT_RE.sub(" ", text.casefold()).split())


# ── REGOLE ──────────────────────────────────────────────────


class AggregationRule(BaseModel):
    model_config = ConfigDict(frozen=True)

    name: Literal["pass_at_k", "bon", "mv", "wmv", "fewtool", "avg"]
    k: Optional[int] = None

    @model_validator(mode="after")
    def _k(self) -> "AggregationRule":
        if self.name == "pass_at_k" and (self.k is None or self.k < 1):
            raise ValueError("pass_at_k richiede k ≥ 1")
        return self


def _require(candidates: list[CandidateAnswer]) -> None:
    if not candidates:
        raise AggregationError("insieme di candidati vuoto")


def _best(candidates: Iterable[CandidateAnswer]) -> CandidateAnswer:
    """Confidenza massima, poi agent_id più basso."""
    return min(candidates, key=lambda c: (-c.confidence, c.agent_id))


def bon(candidates: list[CandidateAnswer]) -> CandidateAnswer:
    _require(candidates)
    return _best(candidates)


def answer_classes(candidates: list[CandidateAnswer],
                   equivalence: Equivalence = normalize_answer) -> list[list[CandidateAnswer]]:
    groups: dict[Hashable, list[CandidateAnswer]] = {}
    for c in sorted(candidates, key=lambda c: c.agent_id):
        groups.setdefault(equivalence(c.answer), []).append(c)
    return list(groups.values())


def _secondary(group: list[CandidateAnswer]) -> tuple[float, str]:
    # spareggio comune a mv e wmv: confidenza massima del gruppo, poi agent_id più basso
    return (-max(c.confidence for c in group), min(c.agent_id for c in group))


def mv(candidates: list[CandidateAnswer], equivalence: Equivalence = normalize_answer) -> CandidateAnswer:
    _require(candidates)
    groups = answer_classes(candidates, equivalence)
    winner = min(groups, key=lambda g: (-len(g), *_secondary(g)))
    return _best(winner)


def wmv(candidates: list[CandidateAnswer], equivalence: Equivalence = normalize_answer) -> CandidateAnswer:
    _require(candidates)
    groups = answer_classes(candidates, equivalence)
    weights = [sum(c.confidence for c in g) for g in groups]
    top = max(weights)
    tied = [g for g, w in zip(groups, weights) if w >= top - WMV_TOLERANCE]
    # a pari peso decide la numerosità, come in mv (conta con confidenze tutte a 0)
    return _best(min(tied, key=lambda g: (-len(g), *_secondary(g))))


def fewtool(candidates: list[CandidateAnswer]) -> CandidateAnswer:
    _require(candidates)
    return min(candidates, key=lambda c: (c.tool_calls, -c.confidence, c.agent_id))


SELECTION_RULES: dict[str, Callable[[list[CandidateAnswer]], CandidateAnswer]] = {
    "bon": bon,
    "mv": mv,
    "wmv": wmv,
    "fewtool": fewtool,
}


def select(rule: str, candidates: list[CandidateAnswer]) -> CandidateAnswer:
    if rule not in SELECTION_RULES:
        raise AggregationError(f"regola di selezione sconosciuta: {rule}")
    return SELECTION_RULES[rule](candidates)


# ── GIUDICI ─────────────────────────────────────────────────


class Judge(Protocol):
    kind: str

    def __call__(self, answer: str, gold: str) -> bool: ...


class ExactMatchJudge:
    kind = "exact_match_normalized"

    def __call__(self, answer: str, gold: str) -> bool:
        return normalize_answer(answer) == normalize_answer(gold)


class ExternalJudge:
    """Verdetti precalcolati per coppia (risposta, gold); le coppie mancanti passano al fallback."""

    kind = "external"

    def __init__(self, verdicts: dict[tuple[str, str], bool], fallback: Optional[Judge] = None):
        self.verdicts = dict(verdicts)
        self.fallback = fallback or ExactMatchJudge()

    def __call__(self, answer: str, gold: str) -> bool:
        verdict = self.verdicts.get((answer, gold))
        if verdict is None:
            return self.fallback(answer, gold)
        return verdict


async def build_llm_judge(backend: ChatBackend, pairs: Iterable[tuple[str, str]]) -> ExternalJudge:
    verdicts: dict[tuple[str, str], bool] = {}
    for answer, gold in sorted(set(pairs)):
        request = ChatRequest(
            messages=(ChatMessage(role="user", content=prompts.judge(gold=gold, answer=answer)),),
            metadata={"agent_id": "judge", "purpose": "judge"},
        )
        try:
            response = await backend.chat(request)
        except BackendError as e:
            logger.warning(f"Giudice LLM non disponibile per {answer!r}: {e}; uso l'exact match")
            continue
        verdicts[(answer, gold)] = response.content.strip().lower().startswith("yes")
    return ExternalJudge(verdicts)


# ── METRICHE ────────────────────────────────────────────────


def _correct(candidates: list[CandidateAnswer], gold: Optional[str], judge: Optional[Judge]) -> int:
    if gold is None:
        raise AggregationError("gold answer mancante")
    judge = judge or ExactMatchJudge()
    return sum(1 for c in candidates if judge(c.answer, gold))


def avg(candidates: list[CandidateAnswer], gold: Optional[str], judge: Optional[Judge] = None) -> float:
    _require(candidates)
    return _correct(candidates, gold, judge) / len(candidates)


def pass_at_k_from_counts(n: int, c: int, k: int) -> float:
    """Valore atteso esatto su tutti i sottoinsiemi di k candidati su n, c corretti."""
    if not 1 <= k <= n:
        raise AggregationError(f"k={k} fuori intervallo [1, {n}]")
    if not 0 <= c <= n:
        raise AggregationError(f"c={c} fuori intervallo [0, {n}]")
    return 1.0 - comb(n - c, k) / comb(n, k)


def pass_at_k(candidates: list[CandidateAnswer], gold: Optional[str], judge: Optional[Judge] = None,
              k: int = 1) -> float:
    _require(candidates)
    return pass_at_k_from_counts(len(candidates), _correct(candidates, gold, judge), k)


def score_table(candidates: list[CandidateAnswer], gold: Optional[str],
                judge: Optional[Judge] = None) -> dict[str, float]:
    """Punteggio di ogni regola su una run: selezioni giudicate 0/1, avg, pass@k per ogni k."""
    judge = judge or ExactMatchJudge()
    if gold is None:
        raise AggregationError("gold answer mancante")
    if not candidates:
        return {name: 0.0 for name in (*SELECTION_RULES, "avg")}
    table = {name: float(judge(rule(candidates).answer, gold)) for name, rule in SELECTION_RULES.items()}
    table["avg"] = avg(candidates, gold, judge)
    for k in range(1, len(candidates) + 1):
        table[f"pass@{k}"] = pass_at_k(candidates, gold, judge, k)
    return table
