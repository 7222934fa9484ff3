import asyncio

import pytest
from pydantic import ValidationError

from services.backends import BackendError
from services.core import ActionRecord, Episode, EpisodeRef, TrajectoryStep, WorkingContext, count_tokens
from services.errors import ProtocolViolation, UnknownEpisode, UnknownPage
from services.hub import DEGRADED_NOTE_TOKENS, NO_PRIOR_SUMMARY, HubReadError, HubStore, ReadRequest
from tests.conftest import hub_model_rules, scripted


def _steps(start: int, n: int, tag: str = "obs") -> list[TrajectoryStep]:
    return [TrajectoryStep.build(i, ActionRecord(tool="visit", arguments={"url": f"u{i}"}), f"{tag} {i}")
            for i in range(start, start + n)]


def _write(hub: HubStore, owner: str, steps, model=None, terminal: bool = False):
    model = model or scripted(hub_model_rules())
    episode = Episode.close(owner, hub.next_ordinal(owner), steps)
    return asyncio.run(hub.write_episode(owner, episode, model, terminal=terminal))


# ── scrittura ───────────────────────────────────────────────


def test_write_episode_stores_raw_and_note():
    hub = HubStore()
    model = scripted([{"match": {"purpose": "write"}, "content": "SUMMARY(owner={owner},page={ordinal})"}])
    ref, note = _write(hub, "A", _steps(0, 3), model)
    assert ref == EpisodeRef(owner="A", ordinal=1)
    assert note.summary == "SUMMARY(owner=A,page=1)"
    assert not note.degraded
    assert len(hub.episodes[ref].steps) == 3
    # il write model riceve il contenuto grezzo dell'episodio
    user = model.calls[0].messages[-1].content
    assert "obs 0" in user and "obs 2" in user


def test_successive_writes_get_gapless_ordinals():
    hub = HubStore()
    _write(hub, "A", _steps(0, 1))
    _write(hub, "B", _steps(0, 1))
    ref, _ = _write(hub, "A", _steps(1, 1))
    assert ref.ordinal == 2
    assert len(hub.write_log) == 3
    stamps = [t for t, _ in hub.write_log]
    assert stamps == sorted(stamps)


def test_duplicate_or_skipped_ordinal_is_rejected():
    hub = HubStore()
    model = scripted(hub_model_rules())
    _write(hub, "A", _steps(0, 1))
    with pytest.raises(ProtocolViolation):
        asyncio.run(hub.write_episode("A", Episode.close("A", 1, _steps(1, 1)), model))
    with pytest.raises(ProtocolViolation):
        asyncio.run(hub.write_episode("A", Episode.close("A", 3, _steps(1, 1)), model))
    with pytest.raises(ProtocolViolation):
        asyncio.run(hub.write_episode("B", Episode.close("A", 2, _steps(1, 1)), model))


def test_write_model_failure_degrades_note():
    hub = HubStore()
    model = scripted([{"match": {"purpose": "write"}, "error": "transport"}])
    ref, note = _write(hub, "A", _steps(0, 2), model)
    assert note.degraded
    assert ref in hub.episodes
    assert "Action: visit" in note.summary
    assert hub.write_errors[ref].kind == "transport"


def test_degraded_note_is_bounded():
    hub = HubStore()
    model = scripted([{"match": {"purpose": "write"}, "error": "backend"}])
    _, note = _write(hub, "A", _steps(0, 400), model)
    assert len(note.summary.encode("utf-8")) <= 4 * DEGRADED_NOTE_TOKENS


def test_concurrent_writers_are_serialized():
    hub = HubStore()
    model = scripted(hub_model_rules())

    async def writer(owner: str):
        for i in range(3):
            ep = Episode.close(owner, i + 1, _steps(i, 1))
            await hub.write_episode(owner, ep, model)

    async def main():
        await asyncio.gather(*(writer(o) for o in ("A", "B", "C")))

    asyncio.run(main())
    assert len(hub.write_log) == 9
    for owner in "ABC":
        assert [n.episode_ref.ordinal for n in hub.own_notes(owner)] == [1, 2, 3]


# ── evizione ────────────────────────────────────────────────


def test_evict_and_replace_swaps_active_for_note():
    hub = HubStore()
    steps = _steps(0, 3)
    ref, note = _write(hub, "A", steps)
    ctx = WorkingContext(system_preamble="p", active=tuple(steps))
    new = hub.evict_and_replace(ctx, ref, note)
    assert new.active == ()
    assert new.own_notes == (note,)
    saved = sum(s.token_cost for s in steps)
    assert new.token_size() == ctx.token_size() - saved + count_tokens(note.summary)


def test_evict_rejects_empty_or_mismatched_active():
    hub = HubStore()
    steps = _steps(0, 2)
    ref, note = _write(hub, "A", steps)
    with pytest.raises(ProtocolViolation):
        hub.evict_and_replace(WorkingContext(), ref, note)
    with pytest.raises(ProtocolViolation):
        hub.evict_and_replace(WorkingContext(active=tuple(_steps(5, 1))), ref, note)
    with pytest.raises(UnknownEpisode):
        hub.evict_and_replace(WorkingContext(active=tuple(steps)), EpisodeRef(owner="Z", ordinal=1), note)


# ── lettura ─────────────────────────────────────────────────


def test_read_single_page_uses_raw_episode():
    hub = HubStore()
    _write(hub, "B", _steps(0, 1, "first"))
    _write(hub, "B", _steps(1, 1, "raw evidence"))
    model = scripted(hub_model_rules())
    req = ReadRequest(requester="A", intent="find founding year", refs=(EpisodeRef(owner="B", ordinal=2),))
    out = asyncio.run(hub.read(req, model))
    assert out == "EXTRACT(find founding year,(B,2))"
    call = model.calls_for("read")[0]
    assert "raw evidence" in call.messages[-1].content
    assert NO_PRIOR_SUMMARY in call.messages[-1].content


def test_read_threads_previous_summary_in_owner_ordinal_order():
    hub = HubStore()
    _write(hub, "B", _steps(0, 1))
    _write(hub, "A", _steps(0, 1))
    model = scripted(hub_model_rules())
    refs = (EpisodeRef(owner="B", ordinal=1), EpisodeRef(owner="A", ordinal=1))
    outputs = asyncio.run(hub.read_pages(ReadRequest(requester="A", intent="g", refs=refs), model))
    assert outputs == ["EXTRACT(g,(A,1))", "EXTRACT(g,(B,1))"]
    calls = model.calls_for("read")
    assert len(calls) == 2
    assert "EXTRACT(g,(A,1))" in calls[1].messages[-1].content


def test_read_request_bounds():
    refs = tuple(EpisodeRef(owner="B", ordinal=i) for i in range(1, 7))
    with pytest.raises(ValidationError):
        ReadRequest(requester="A", intent="g", refs=refs)
    with pytest.raises(ValidationError):
        ReadRequest(requester="A", intent="g", refs=())
    with pytest.raises(ValidationError):
        ReadRequest(requester="A", intent="g", refs=(EpisodeRef(owner="A", ordinal=1),), path="consult")


def test_read_unknown_ref_names_it():
    hub = HubStore()
    req = ReadRequest(requester="A", intent="g", refs=(EpisodeRef(owner="B", ordinal=4),))
    with pytest.raises(UnknownEpisode, match=r"\(B, 4\)"):
        asyncio.run(hub.read(req, scripted(hub_model_rules())))


def test_read_failure_keeps_partial_outputs():
    hub = HubStore()
    _write(hub, "B", _steps(0, 1))
    _write(hub, "B", _steps(1, 1))
    model = scripted([
        {"match": {"purpose": "read", "ordinal": 1}, "content": "partial"},
        {"match": {"purpose": "read"}, "error": "http_status", "content": "HTTP 503: busy"},
    ])
    refs = (EpisodeRef(owner="B", ordinal=1), EpisodeRef(owner="B", ordinal=2))
    with pytest.raises(HubReadError) as exc:
        asyncio.run(hub.read_pages(ReadRequest(requester="A", intent="g", refs=refs), model))
    assert exc.value.page_outputs == ["partial"]
    assert isinstance(exc.value.cause, BackendError)


def test_reads_do_not_mutate_store():
    hub = HubStore()
    _write(hub, "B", _steps(0, 2))
    before = (dict(hub.episodes), dict(hub.notes), list(hub.write_log))
    req = ReadRequest(requester="A", intent="g", refs=(EpisodeRef(owner="B", ordinal=1),))
    asyncio.run(hub.read(req, scripted(hub_model_rules())))
    assert (hub.episodes, hub.notes, hub.write_log) == before


# ── visibilità e pagine ─────────────────────────────────────


def test_visible_notes_exclude_requester():
    hub = HubStore()
    assert hub.visible_notes("A") == []
    _write(hub, "A", _steps(0, 1))
    _write(hub, "B", _steps(0, 1))
    _write(hub, "C", _steps(0, 1))
    assert [n.episode_ref.owner for n in hub.visible_notes("A")] == ["B", "C"]


def test_page_index_is_local_to_requester():
    hub = HubStore()
    _write(hub, "B", _steps(0, 1))
    _write(hub, "A", _steps(0, 1))
    _write(hub, "A", _steps(1, 1))
    _write(hub, "C", _steps(0, 1))
    index = hub.page_index("A")
    assert [str(r) for r in index] == ["(A,1)", "(A,2)", "(B,1)", "(C,1)"]
    # la pagina n del proprietario è il suo episodio n
    assert hub.page_number(EpisodeRef(owner="A", ordinal=2), "A") == 2
    assert hub.page_number(EpisodeRef(owner="B", ordinal=1), "B") == 1
    assert hub.resolve_pages([3, 1], "A") == [EpisodeRef(owner="B", ordinal=1), EpisodeRef(owner="A", ordinal=1)]
    with pytest.raises(UnknownPage):
        hub.resolve_pages([5], "A")


def test_persisted_hub_reloads(tmp_path):
    hub = HubStore(tmp_path)
    _write(hub, "A", _steps(0, 2))
    _write(hub, "B", _steps(0, 1))
    loaded = HubStore.load(tmp_path)
    assert loaded.episodes == hub.episodes
    assert loaded.notes == hub.notes
    assert loaded.page_index("A") == hub.page_index("A")
    assert (tmp_path / "episodes" / "A" / "1.jsonl").read_text().count("\n") == 2
