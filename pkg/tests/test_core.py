import pytest
from pydantic import ValidationError

from services.core import (
    ActionRecord,
    CandidateAnswer,
    Episode,
    EpisodeNote,
    EpisodeRef,
    TrajectoryStep,
    WorkingContext,
    count_tokens,
    format_final_answer,
    parse_final_answer,
    truncate_to_tokens,
)
from services.errors import NoCommittedAnswer


def _step(index: int, observation: str = "obs") -> TrajectoryStep:
    return TrajectoryStep.build(index, ActionRecord(tool="search", arguments={"queries": ["q"]}), observation)


# ── token ───────────────────────────────────────────────────


def test_count_tokens_defaults():
    assert count_tokens("") == 0
    assert count_tokens("a" * 400) == 100
    assert count_tokens("abc") == 1
    # UTF-8: "è" occupa due byte
    assert count_tokens("è" * 4) == 2


@pytest.mark.parametrize("a,b", [("abcd", "efgh"), ("abc", "de"), ("x" * 13, "y" * 7), ("", "zz"), ("città", "è")])
def test_count_tokens_concatenation_bound(a, b):
    joint = count_tokens(a + b)
    assert count_tokens(a) + count_tokens(b) - 1 <= joint <= count_tokens(a) + count_tokens(b)


def test_truncate_to_tokens_longest_prefix():
    text = "word " * 100
    cut = truncate_to_tokens(text, 10)
    assert text.startswith(cut)
    assert count_tokens(cut) <= 10
    assert count_tokens(text[:len(cut) + 1]) > 10
    assert truncate_to_tokens("short", 10) == "short"
    assert truncate_to_tokens("anything", 0) == ""


# ── trajectory ──────────────────────────────────────────────


def test_step_token_cost_covers_action_and_observation():
    step = _step(0, "x" * 40)
    assert step.token_cost == count_tokens(step.action.render()) + 10


def test_episode_requires_contiguous_nonempty_steps():
    with pytest.raises(ValidationError):
        Episode.close("A", 1, [])
    with pytest.raises(ValidationError):
        Episode.close("A", 1, [_step(0), _step(2)])
    with pytest.raises(ValidationError):
        Episode(owner="A", ordinal=1, steps=(_step(0),), token_total=0)
    ep = Episode.close("A", 1, [_step(3), _step(4)])
    assert ep.token_total == sum(s.token_cost for s in ep.steps)
    assert ep.ref == EpisodeRef(owner="A", ordinal=1)


def test_working_context_size_is_sum_of_parts():
    note = EpisodeNote(episode_ref=EpisodeRef(owner="A", ordinal=1), summary="n" * 20, created_at=1)
    ctx = WorkingContext(system_preamble="p" * 40, own_notes=(note,), readouts=("r" * 8,), active=(_step(0),))
    assert ctx.token_size() == 10 + 5 + 2 + ctx.active[0].token_cost


def test_own_notes_must_be_in_ordinal_order():
    n1 = EpisodeNote(episode_ref=EpisodeRef(owner="A", ordinal=1), summary="one", created_at=1)
    n2 = EpisodeNote(episode_ref=EpisodeRef(owner="A", ordinal=2), summary="two", created_at=2)
    with pytest.raises(ValidationError):
        WorkingContext(own_notes=(n2, n1))


def test_candidate_confidence_range():
    with pytest.raises(ValidationError):
        CandidateAnswer(agent_id="a0", answer="x", confidence=1.5)


# ── final answer ────────────────────────────────────────────


def test_parse_final_answer_examples():
    long_answer = "Texas Prison System Central State Farm Main Building (Central Unit), Sugar Land, Texas"
    parsed = parse_final_answer(f"Exact Answer: {long_answer}\nConfidence: 65%")
    assert parsed.answer == long_answer
    assert parsed.confidence == pytest.approx(0.65)

    parsed = parse_final_answer("Exact Answer: 1853")
    assert (parsed.answer, parsed.confidence) == ("1853", 0.5)

    parsed = parse_final_answer("Exact Answer: X\nConfidence: 100%")
    assert (parsed.answer, parsed.confidence) == ("X", 1.0)


def test_parse_final_answer_tolerates_markdown():
    parsed = parse_final_answer("Explanation: because.\n**Exact Answer:** 1853\n**Confidence:** 80%")
    assert (parsed.answer, parsed.confidence) == ("1853", pytest.approx(0.8))


def test_parse_final_answer_without_answer_line():
    with pytest.raises(NoCommittedAnswer):
        parse_final_answer("I think the answer is 1853.")
    with pytest.raises(NoCommittedAnswer):
        parse_final_answer("Exact Answer:   \nConfidence: 20%")


def test_format_final_answer_is_parseable():
    text = format_final_answer("1853", 0.85, explanation="source found")
    parsed = parse_final_answer(text)
    assert parsed.answer == "1853"
    assert parsed.confidence == pytest.approx(0.85)
