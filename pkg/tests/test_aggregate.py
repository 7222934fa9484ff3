import asyncio
import itertools
import random
from functools import lru_cache
from fractions import Fraction

import pytest

from services.aggregate import (
    AggregationRule,
    ExactMatchJudge,
    ExternalJudge,
    avg,
    bon,
    build_llm_judge,
    fewtool,
    mv,
    normalize_answer,
    pass_at_k,
    pass_at_k_from_counts,
    score_table,
    select,
    wmv,
)
from services.core import CandidateAnswer
from services.errors import AggregationError
from tests.conftest import scripted


def c(agent_id: str, answer: str, confidence: float = 0.5, tool_calls: int = 0) -> CandidateAnswer:
    return CandidateAnswer(agent_id=agent_id, answer=answer, confidence=confidence, tool_calls=tool_calls)


def _random_set(rng: random.Random, n: int, equal_conf: bool = False) -> list[CandidateAnswer]:
    conf = rng.choice([0.0, 0.1, 0.5, 0.9, 1.0])
    return [c(f"a{i}", rng.choice("XYZ"), conf if equal_conf else rng.choice([0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]),
              rng.randint(0, 3)) for i in range(n)]


# ── selezione ───────────────────────────────────────────────


def test_bon_examples():
    assert bon([c("a0", "X", 0.9), c("a1", "Y", 0.4)]).answer == "X"
    assert bon([c("a1", "Y", 0.7), c("a0", "X", 0.7)]).agent_id == "a0"
    single = c("a0", "X", 0.2)
    assert bon([single]) == single


def test_mv_examples():
    assert mv([c("a0", "X"), c("a1", "X"), c("a2", "Y")]).answer == "X"
    assert mv([c("a0", "X", 0.9), c("a1", "Y", 0.5), c("a2", "Y", 0.6)]).answer == "Y"
    assert mv([c("a0", "X", 0.9), c("a1", "Y", 0.8)]).answer == "X"


def test_mv_groups_normalized_answers():
    winner = mv([c("a0", "Sugar Land, Texas"), c("a1", "sugar land texas"), c("a2", "Austin")])
    assert normalize_answer(winner.answer) == "sugar land texas"


def test_wmv_examples():
    assert wmv([c("a0", "X", 0.9), c("a1", "Y", 0.5), c("a2", "Y", 0.5)]).answer == "Y"
    assert wmv([c("a0", "X", 0.9), c("a1", "Y", 0.5), c("a2", "Y", 0.3)]).answer == "X"


def test_fewtool_examples():
    assert fewtool([c("a0", "X", tool_calls=40), c("a1", "Y", tool_calls=12)]).answer == "Y"
    assert fewtool([c("a0", "X", 0.9, 10), c("a1", "Y", 0.5, 10)]).answer == "X"
    single = c("a3", "Z", 0.1, 99)
    assert fewtool([single]) == single


@pytest.mark.parametrize("rule", ["bon", "mv", "wmv", "fewtool"])
def test_empty_candidates_rejected(rule):
    with pytest.raises(AggregationError):
        select(rule, [])


def test_unknown_rule_rejected():
    with pytest.raises(AggregationError):
        select("oracle", [c("a0", "X")])


def test_selection_rule_k_validation():
    AggregationRule(name="pass_at_k", k=2)
    with pytest.raises(ValueError):
        AggregationRule(name="pass_at_k")


# ── proprietà ───────────────────────────────────────────────


@pytest.mark.parametrize("rule", ["bon", "mv", "wmv", "fewtool"])
def test_rules_ignore_candidate_order(rule):
    rng = random.Random(11)
    for _ in range(60):
        cands = _random_set(rng, rng.randint(1, 4))
        expected = select(rule, cands)
        for perm in itertools.permutations(cands):
            assert select(rule, list(perm)) == expected


def test_singletons_agree_across_rules():
    single = [c("a0", "X", 0.3)]
    assert bon(single) == mv(single) == wmv(single)


def test_wmv_with_equal_confidences_matches_mv():
    rng = random.Random(3)
    for _ in range(300):
        cands = _random_set(rng, rng.randint(1, 6), equal_conf=True)
        assert normalize_answer(wmv(cands).answer) == normalize_answer(mv(cands).answer)


# ── enumerazione esaustiva contro implementazioni di riferimento ──

ALPHABET = "XYZ"
GRID = tuple(i / 10 for i in range(11))
COARSE = (0.0, 0.5, 1.0)
EDGES = (0.0, 1.0)
TOOLS = range(1, 6)


@lru_cache(maxsize=None)
def _cand(i: int, answer: str, confidence: float, tool_calls: int = 1) -> CandidateAnswer:
    return c(f"a{i}", answer, confidence, tool_calls)


def _first(items, better):
    best = None
    for item in items:
        if best is None or better(item, best):
            best = item
    return best


def _more_confident(x: CandidateAnswer, y: CandidateAnswer) -> bool:
    return x.confidence > y.confidence or (x.confidence == y.confidence and x.agent_id < y.agent_id)


def _bon_oracle(cands: list[CandidateAnswer]) -> str:
    return _first(cands, _more_confident).agent_id


def _fewtool_oracle(cands: list[CandidateAnswer]) -> str:
    def better(x, y):
        if x.tool_calls != y.tool_calls:
            return x.tool_calls < y.tool_calls
        return _more_confident(x, y)
    return _first(cands, better).agent_id


def _classes(cands: list[CandidateAnswer]) -> list[list[CandidateAnswer]]:
    members: dict[str, list[CandidateAnswer]] = {}
    for cand in cands:
        members.setdefault(normalize_answer(cand.answer), []).append(cand)
    return list(members.values())


def _class_oracle(cands: list[CandidateAnswer], weight) -> str:
    def better(g, h):
        for a, b in ((weight(g), weight(h)), (len(g), len(h)),
                     (max(x.confidence for x in g), max(x.confidence for x in h))):
            if a != b:
                return a > b
        return min(x.agent_id for x in g) < min(x.agent_id for x in h)
    winner = _first(_classes(cands), better)
    return _first(winner, _more_confident).agent_id


def _mv_oracle(cands: list[CandidateAnswer]) -> str:
    return _class_oracle(cands, len)


def _wmv_oracle(cands: list[CandidateAnswer]) -> str:
    return _class_oracle(cands, lambda g: sum(Fraction(str(x.confidence)) for x in g))


def _voting_sets():
    # griglia completa fino a 3 agenti, ridotta oltre
    for n in range(1, 6):
        grid = GRID if n <= 3 else COARSE
        for picks in itertools.product(ALPHABET, repeat=n):
            for confs in itertools.product(grid, repeat=n):
                yield [_cand(i, a, p) for i, (a, p) in enumerate(zip(picks, confs))]


def _fewtool_sets():
    grids = {1: GRID, 2: GRID, 3: COARSE, 4: EDGES, 5: EDGES}
    for n, grid in grids.items():
        for tools in itertools.product(TOOLS, repeat=n):
            for confs in itertools.product(grid, repeat=n):
                yield [_cand(i, ALPHABET[i % 3], p, t) for i, (t, p) in enumerate(zip(tools, confs))]


@pytest.mark.parametrize("rule, oracle", [(bon, _bon_oracle), (mv, _mv_oracle), (wmv, _wmv_oracle)])
def test_voting_rules_match_reference_on_full_grid(rule, oracle):
    for cands in _voting_sets():
        assert rule(cands[::-1]).agent_id == oracle(cands), cands


def test_fewtool_matches_reference_on_full_grid():
    for cands in _fewtool_sets():
        assert fewtool(cands[::-1]).agent_id == _fewtool_oracle(cands), cands


def test_avg_and_pass_at_k_match_subset_enumeration():
    for n in range(1, 6):
        for picks in itertools.product(ALPHABET, repeat=n):
            cands = [_cand(i, a, 0.5) for i, a in enumerate(picks)]
            flags = [a == "X" for a in picks]
            assert avg(cands, "x") == pytest.approx(float(Fraction(sum(flags), n)), abs=1e-12)
            for k in range(1, n + 1):
                subsets = list(itertools.combinations(flags, k))
                expected = Fraction(sum(any(s) for s in subsets), len(subsets))
                assert pass_at_k(cands, "x", k=k) == pytest.approx(float(expected), abs=1e-12)


def test_wmv_with_zero_confidences_follows_the_majority():
    cands = [c("a0", "X", 0.0), c("a1", "Y", 0.0), c("a2", "Y", 0.0)]
    assert wmv(cands).answer == mv(cands).answer == "Y"


# ── metriche ────────────────────────────────────────────────


def test_avg_examples():
    assert avg([c("a0", "1853"), c("a1", "1885")], "1853") == 0.5
    assert avg([c("a0", "1853"), c("a1", "1853")], "1853") == 1.0
    assert avg([c("a0", "1885")], "1853") == 0.0


def test_pass_at_k_examples():
    two = [c("a0", "1853"), c("a1", "1885")]
    assert pass_at_k(two, "1853", k=1) == 0.5
    assert pass_at_k(two, "1853", k=2) == 1.0
    assert pass_at_k([c("a0", "no"), c("a1", "no")], "1853", k=2) == 0.0
    with pytest.raises(AggregationError):
        pass_at_k(two, "1853", k=3)
    with pytest.raises(AggregationError):
        pass_at_k(two, "1853", k=0)


def test_pass_at_k_equals_subset_enumeration():
    for n in range(1, 7):
        for correct in range(n + 1):
            flags = [True] * correct + [False] * (n - correct)
            for k in range(1, n + 1):
                subsets = list(itertools.combinations(flags, k))
                expected = Fraction(sum(any(s) for s in subsets), len(subsets))
                assert pass_at_k_from_counts(n, correct, k) == pytest.approx(float(expected), abs=1e-12)


def test_pass_at_k_is_monotone_and_hits_oracle_at_n():
    for n in range(1, 8):
        for correct in range(n + 1):
            values = [pass_at_k_from_counts(n, correct, k) for k in range(1, n + 1)]
            assert values == sorted(values)
            assert values[-1] == (1.0 if correct else 0.0)
            assert values[0] == pytest.approx(correct / n)


def test_score_table_covers_all_rules():
    cands = [c("a0", "1853", 0.85, 12), c("a1", "1885", 0.4, 3), c("a2", "1853", 0.7, 20)]
    table = score_table(cands, "1853")
    assert table["bon"] == 1.0
    assert table["mv"] == 1.0
    assert table["wmv"] == 1.0
    assert table["fewtool"] == 0.0
    assert table["avg"] == pytest.approx(2 / 3)
    assert table["pass@1"] == pytest.approx(2 / 3)
    assert table["pass@3"] == 1.0


def test_score_table_without_candidates_is_zero():
    assert set(score_table([], "1853").values()) == {0.0}
    with pytest.raises(AggregationError):
        score_table([c("a0", "x")], None)


# ── giudici ─────────────────────────────────────────────────


def test_exact_match_judge_normalizes():
    judge = ExactMatchJudge()
    assert judge("  Sugar-Land, TEXAS ", "sugar land texas")
    assert not judge("1853", "1885")


def test_external_judge_overrides_then_falls_back():
    judge = ExternalJudge({("eighteen fifty-three", "1853"): True})
    assert judge("eighteen fifty-three", "1853")
    assert judge("1853", "1853")
    assert not judge("1885", "1853")
    assert avg([c("a0", "eighteen fifty-three"), c("a1", "1885")], "1853", judge) == 0.5


def test_llm_judge_built_from_backend():
    backend = scripted([
        {"match": {"purpose": "judge", "contains": "Response: eighteen fifty-three"}, "content": "Yes"},
        {"match": {"purpose": "judge"}, "content": "no"},
    ])
    judge = asyncio.run(build_llm_judge(backend, [("eighteen fifty-three", "1853"), ("1885", "1853")]))
    assert judge.verdicts == {("eighteen fifty-three", "1853"): True, ("1885", "1853"): False}
    assert len(backend.calls_for("judge")) == 2


def test_llm_judge_failure_falls_back_to_exact_match():
    backend = scripted([{"match": {"purpose": "judge"}, "error": "transport"}])
    judge = asyncio.run(build_llm_judge(backend, [("1853", "1853")]))
    assert judge.verdicts == {}
    assert judge("1853", "1853")
