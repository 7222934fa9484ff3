"""
services/hub.py — Hub di ragionamento condiviso

- write_episode    : salva l'episodio grezzo, lo comprime in una nota con il write model
- evict_and_replace: sostituisce il segmento attivo del contesto con la nota
- read             : lettura guidata da un intento sugli episodi grezzi (read model)
- visible_notes    : note dei compagni, in ordine di scrittura

È l'unico stato mutabile condiviso del sistema. Gli episodi sono append-only.
Persistenza opzionale: <run_dir>/episodes/<owner>/<ordinal>.jsonl + <run_dir>/notes.jsonl
"""
from __future__ import annotations

import asyncio
import json
import logging
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator

from services import prompts
from services.backends import BackendError, ChatBackend, ChatMessage, ChatRequest, Sampling
from services.core import (
    Episode,
    EpisodeNote,
    EpisodeRef,
    TokenCounter,
    TrajectoryStep,
    WorkingContext,
    truncate_to_tokens,
)
from services.errors import FugueError, ProtocolViolation, UnknownEpisode, UnknownPage

logger = logging.getLogger(__name__)

MAX_READ_REFS = 5
DEGRADED_NOTE_TOKENS = 512
NO_PRIOR_SUMMARY = "(none)"

# ── MODELS ──────────────────────────────────────────────────


class ReadRequest(BaseModel):
    model_config = ConfigDict(frozen=True)

    requester: str
    intent: str = Field(min_length=1)
    refs: tuple[EpisodeRef, ...]
    prior_summary: Optional[str] = None
    # "memory": tool memory, consente il richiamo delle proprie pagine
    # "consult": consultazione dei compagni, solo pagine altrui
    path: Literal["memory", "consult"] = "memory"

    @model_validator(mode="after")
    def _validate(self) -> "ReadRequest":
        if not 1 <= len(self.refs) <= MAX_READ_REFS:
            raise ValueError(f"refs deve contenere da 1 a {MAX_READ_REFS} episodi, ricevuti {len(self.refs)}")
        if len(set(self.refs)) != len(self.refs):
            raise ValueError("refs contiene episodi duplicati")
        if self.path == "consult" and any(r.owner == self.requester for r in self.refs):
            raise ValueError("la consultazione non può includere episodi del richiedente")
        return self


class HubReadError(FugueError):
    """Il read model ha fallito a metà: conserva i risultati parziali per il log."""

    def __init__(self, cause: BackendError, page_outputs: list[str]):
        self.cause = cause
        self.page_outputs = page_outputs
        super().__init__(f"lettura dall'hub fallita: {cause}")


# ── STORE ───────────────────────────────────────────────────


class HubStore:
    def __init__(self, run_dir: Optional[str | Path] = None, counter: Optional[TokenCounter] = None,
                 sampling: Optional[Sampling] = None):
        self.run_dir = Path(run_dir) if run_dir else None
        self.counter = counter
        self.sampling = sampling or Sampling()
        self.episodes: dict[EpisodeRef, Episode] = {}
        self.notes: dict[EpisodeRef, EpisodeNote] = {}
        self.write_log: list[tuple[int, EpisodeRef]] = []
        self.write_errors: dict[EpisodeRef, BackendError] = {}
        self._clock = 0
        self._lock = asyncio.Lock()

    # ── scrittura ──────────────────────────────────────────

    def next_ordinal(self, owner: str) -> int:
        return 1 + max((r.ordinal for r in self.episodes if r.owner == owner), default=0)

    def _store_raw(self, owner: str, episode: Episode) -> EpisodeRef:
        if episode.owner != owner:
            raise ProtocolViolation(f"episodio di {episode.owner} scritto da {owner}")
        ref = episode.ref
        if ref in self.episodes:
            raise ProtocolViolation(f"ordinale duplicato: {ref}")
        expected = self.next_ordinal(owner)
        if episode.ordinal != expected:
            raise ProtocolViolation(f"ordinale {episode.ordinal} per {owner}, atteso {expected}")
        self.episodes[ref] = episode
        if self.run_dir:
            path = self.run_dir / "episodes" / owner / f"{episode.ordinal}.jsonl"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text("".join(s.model_dump_json() + "\n" for s in episode.steps), encoding="utf-8")
        return ref

    def _store_note(self, ref: EpisodeRef, summary: str, degraded: bool, terminal: bool) -> EpisodeNote:
        self._clock += 1
        note = EpisodeNote(episode_ref=ref, summary=summary, created_at=self._clock,
                           degraded=degraded, terminal=terminal)
        self.notes[ref] = note
        self.write_log.append((self._clock, ref))
        if self.run_dir:
            with (self.run_dir / "notes.jsonl").open("a", encoding="utf-8") as fh:
                fh.write(note.model_dump_json() + "\n")
        return note

    def _degraded_summary(self, episode: Episode) -> str:
        actions = "\n".join(s.action.render() for s in episode.steps)
        return truncate_to_tokens(actions, DEGRADED_NOTE_TOKENS, self.counter) or "(empty episode)"

    async def write_episode(self, owner: str, episode: Episode, write_model: ChatBackend,
                            terminal: bool = False) -> tuple[EpisodeRef, EpisodeNote]:
        async with self._lock:
            ref = self._store_raw(owner, episode)

        request = ChatRequest(
            messages=(
                ChatMessage(role="system", content=prompts.memory_manager_system()),
                ChatMessage(role="user", content=prompts.window_summary_user(episode.render())),
            ),
            sampling=self.sampling,
            metadata={"agent_id": owner, "purpose": "write", "owner": owner, "ordinal": episode.ordinal},
        )
        degraded = False
        try:
            response = await write_model.chat(request)
            summary = response.content.strip()
            if not summary:
                raise BackendError("il write model ha restituito una nota vuota")
        except BackendError as e:
            logger.warning(f"Nota degradata per {ref}: {e}")
            self.write_errors[ref] = e
            summary = self._degraded_summary(episode)
            degraded = True

        async with self._lock:
            note = self._store_note(ref, summary, degraded, terminal)
        logger.info(f"Hub: scritto episodio {ref} ({episode.token_total} token → nota {len(summary)} caratteri)")
        return ref, note

    # ── evizione ───────────────────────────────────────────

    def evict_and_replace(self, context: WorkingContext, episode_ref: EpisodeRef,
                          note: EpisodeNote) -> WorkingContext:
        if not context.active:
            raise ProtocolViolation("evizione con segmento attivo vuoto")
        episode = self.episodes.get(episode_ref)
        if episode is None:
            raise UnknownEpisode(episode_ref.owner, episode_ref.ordinal)
        if note.episode_ref != episode_ref:
            raise ProtocolViolation(f"nota di {note.episode_ref} usata per {episode_ref}")
        if tuple(context.active) != episode.steps:
            raise ProtocolViolation(f"il segmento attivo non coincide con l'episodio {episode_ref}")
        return context.model_copy(update={"active": (), "own_notes": context.own_notes + (note,)})

    # ── lettura ────────────────────────────────────────────

    def visible_notes(self, requester: str) -> list[EpisodeNote]:
        return [self.notes[ref] for _, ref in self.write_log if ref.owner != requester]

    def own_notes(self, owner: str) -> list[EpisodeNote]:
        return sorted((n for r, n in self.notes.items() if r.owner == owner),
                      key=lambda n: n.episode_ref.ordinal)

    def page_index(self, requester: str) -> list[EpisodeRef]:
        """Indice locale del richiedente: prima le proprie pagine per ordinale, poi quelle dei compagni
        in ordine di scrittura. La pagina n del proprietario è il suo episodio n."""
        own = [n.episode_ref for n in self.own_notes(requester)]
        return own + [n.episode_ref for n in self.visible_notes(requester)]

    def page_number(self, ref: EpisodeRef, requester: str) -> int:
        return self.page_index(requester).index(ref) + 1

    def resolve_pages(self, pages: list[int], requester: str) -> list[EpisodeRef]:
        index = self.page_index(requester)
        refs = []
        for page in pages:
            if not 1 <= page <= len(index):
                raise UnknownPage(page)
            refs.append(index[page - 1])
        return refs

    async def read_pages(self, request: ReadRequest, read_model: ChatBackend) -> list[str]:
        for ref in request.refs:
            if ref not in self.episodes:
                raise UnknownEpisode(ref.owner, ref.ordinal)
        # Fotografia degli episodi: le letture non mutano lo store
        pages = [self.episodes[ref] for ref in sorted(request.refs, key=lambda r: (r.owner, r.ordinal))]

        previous = request.prior_summary or NO_PRIOR_SUMMARY
        outputs: list[str] = []
        for episode in pages:
            req = ChatRequest(
                messages=(
                    ChatMessage(role="system", content=prompts.consult_system()),
                    ChatMessage(role="user", content=prompts.consult_incremental_user(
                        goal=request.intent, previous_summary=previous, page_content=episode.render())),
                ),
                sampling=self.sampling,
                metadata={"agent_id": request.requester, "purpose": "read", "goal": request.intent,
                          "page": str(episode.ref)},
            )
            try:
                response = await read_model.chat(req)
            except BackendError as e:
                raise HubReadError(e, outputs) from e
            previous = response.content.strip()
            outputs.append(previous)
        return outputs

    async def read(self, request: ReadRequest, read_model: ChatBackend) -> str:
        return (await self.read_pages(request, read_model))[-1]

    # ── persistenza ────────────────────────────────────────

    @classmethod
    def load(cls, run_dir: str | Path) -> "HubStore":
        """Ricostruisce lo store da una directory persistita (sola lettura)."""
        run_dir = Path(run_dir)
        store = cls()
        notes_path = run_dir / "notes.jsonl"
        if not notes_path.exists():
            return store
        for line in notes_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            note = EpisodeNote.model_validate(json.loads(line))
            ref = note.episode_ref
            ep_path = run_dir / "episodes" / ref.owner / f"{ref.ordinal}.jsonl"
            steps = [TrajectoryStep.model_validate_json(l)
                     for l in ep_path.read_text(encoding="utf-8").splitlines() if l.strip()]
            store.episodes[ref] = Episode.close(ref.owner, ref.ordinal, steps)
            store.notes[ref] = note
            store.write_log.append((note.created_at, ref))
            store._clock = max(store._clock, note.created_at)
        store.write_log.sort(key=lambda x: x[0])
        return store
