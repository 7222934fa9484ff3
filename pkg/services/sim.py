"""
services/sim.py — Simulatore dello spazio di conoscenza (nessun modello linguistico)

Ogni agente campiona un fatto per step secondo il proprio bias di scoperta;
con l'hub attivo pubblica ogni E step il delta di ciò che ha scoperto e, con
probabilità read_probability, assorbe l'unione dei frammenti pubblicati.
Un agente è risolto quando copre tutti i fatti richiesti.

Gli insiemi di fatti sono bitmask intere. Ogni agente ha flussi casuali propri
derivati da (seed, indice agente): lo stesso agente si comporta allo stesso
modo in team di dimensioni diverse.
"""
from __future__ import annotations

import logging
from typing import Literal, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import stats

from services.aggregate import pass_at_k_from_counts

logger = logging.getLogger(__name__)

DEFAULT_TEAM_SIZES = (1, 2, 3, 5, 8)
SIGNIFICANCE = 0.01

BiasKind = Literal["uniform", "heterogeneous", "complementary"]

# ── MODELS ──────────────────────────────────────────────────


class KnowledgeSpace(BaseModel):
    model_config = ConfigDict(frozen=True)

    m: int = Field(ge=1)
    required: tuple[int, ...]
    seed: int

    @model_validator(mode="after")
    def _required(self) -> "KnowledgeSpace":
        if not self.required:
            raise ValueError("l'insieme dei fatti richiesti non può essere vuoto")
        if any(not 0 <= f < self.m for f in self.required):
            raise ValueError("fatti richiesti fuori dallo spazio")
        return self

    @property
    def required_mask(self) -> int:
        return sum(1 << f for f in self.required)


class SimPolicy(BaseModel):
    model_config = ConfigDict(frozen=True)

    n_agents: int = Field(default=1, ge=1)
    hub_enabled: bool = True
    episode_length: int = Field(default=10, ge=1)
    read_probability: float = Field(default=0.05, ge=0.0, le=1.0)
    bias: BiasKind = "uniform"
    heterogeneity: float = Field(default=0.5, ge=0.0, le=1.0)  # peso della componente Dirichlet
    step_cap: Optional[int] = Field(default=None, ge=1)

    def cap(self, space: KnowledgeSpace) -> int:
        return self.step_cap or 10 * space.m


class SeedResult(BaseModel):
    seed: int
    solved: list[bool]
    steps_to_solve: list[Optional[int]]
    search_steps: list[int]
    hub_reads: int
    hub_writes: int

    @property
    def pass_at_n(self) -> float:
        n = len(self.solved)
        return pass_at_k_from_counts(n, sum(self.solved), n)

    @property
    def mean_search_steps(self) -> float:
        return float(np.mean(self.search_steps))

    @property
    def traffic(self) -> int:
        return self.hub_reads + self.hub_writes


class SimMetrics(BaseModel):
    policy: SimPolicy
    runs: list[SeedResult]

    @property
    def pass_at_n(self) -> float:
        return float(np.mean([r.pass_at_n for r in self.runs]))

    @property
    def mean_search_steps(self) -> float:
        return float(np.mean([r.mean_search_steps for r in self.runs]))

    @property
    def mean_traffic(self) -> float:
        return float(np.mean([r.traffic for r in self.runs]))


# ── SPAZIO E BIAS ───────────────────────────────────────────


def make_space(m: int, required_size: int, seed: int) -> KnowledgeSpace:
    if not 1 <= required_size <= m:
        raise ValueError(f"|S*| deve essere in [1, {m}], ricevuto {required_size}")
    rng = np.random.default_rng(seed)
    required = sorted(int(f) for f in rng.choice(m, size=required_size, replace=False))
    return KnowledgeSpace(m=m, required=tuple(required), seed=seed)


def agent_streams(seed: int, index: int) -> tuple[np.random.Generator, ...]:
    """Flussi indipendenti per bias, campioni e lanci di lettura dell'agente `index`."""
    children = np.random.SeedSequence([seed, index]).spawn(3)
    return tuple(np.random.default_rng(c) for c in children)


def discovery_bias(space: KnowledgeSpace, policy: SimPolicy, index: int,
                   rng: np.random.Generator) -> np.ndarray:
    m = space.m
    uniform = np.full(m, 1.0 / m)
    if policy.bias == "uniform":
        return uniform
    if policy.bias == "heterogeneous":
        mix = policy.heterogeneity
        return (1.0 - mix) * uniform + mix * rng.dirichlet(np.full(m, 0.5))
    # complementary: blocchi disgiunti, i fatti richiesti distribuiti a rotazione tra gli agenti
    n = policy.n_agents
    required = set(space.required)
    owner = {}
    for rank, f in enumerate(space.required):
        owner[f] = rank % n
    others = [f for f in range(m) if f not in required]
    for rank, f in enumerate(others):
        owner[f] = rank % n
    support = np.array([1.0 if owner[f] == index else 0.0 for f in range(m)])
    if support.sum() == 0:
        raise ValueError(f"bias complementare: nessun fatto per l'agente {index}")
    return support / support.sum()


# ── SIMULAZIONE ─────────────────────────────────────────────


def simulate_team(space: KnowledgeSpace, policy: SimPolicy, seed: int) -> SeedResult:
    n, cap, E = policy.n_agents, policy.cap(space), policy.episode_length
    target = space.required_mask

    samples, coins = [], []
    for i in range(n):
        bias_rng, sample_rng, coin_rng = agent_streams(seed, i)
        bias = discovery_bias(space, policy, i, bias_rng)
        samples.append(sample_rng.choice(space.m, size=cap, p=bias).tolist())
        # lanci estratti sempre, anche con hub spento, per allineare i flussi
        coins.append(coin_rng.random(cap).tolist())

    discovered = [0] * n
    published_by = [0] * n
    union = 0
    solved_at: list[Optional[int]] = [None] * n
    search_steps = [0] * n
    reads = writes = 0

    def publish(i: int) -> None:
        nonlocal union, writes
        delta = discovered[i] & ~published_by[i]
        if delta:
            published_by[i] |= delta
            union |= delta
            writes += 1

    for t in range(1, cap + 1):
        active = [i for i in range(n) if solved_at[i] is None]
        if not active:
            break
        newly_solved = []
        # 1. ricerca
        for i in active:
            discovered[i] |= 1 << samples[i][t - 1]
            search_steps[i] += 1
            if discovered[i] & target == target:
                solved_at[i] = t
                newly_solved.append(i)
        if policy.hub_enabled:
            # 2. scrittura ogni E step; chi ha appena risolto pubblica subito
            for i in active:
                if i in newly_solved or (solved_at[i] is None and t % E == 0):
                    publish(i)
            # 3. lettura
            solved_by_read = []
            for i in active:
                if solved_at[i] is None and coins[i][t - 1] < policy.read_probability:
                    reads += 1
                    discovered[i] |= union
                    if discovered[i] & target == target:
                        solved_at[i] = t
                        solved_by_read.append(i)
            # 4. chi ha risolto leggendo pubblica ciò che gli resta
            for i in solved_by_read:
                publish(i)

    return SeedResult(
        seed=seed,
        solved=[s is not None for s in solved_at],
        steps_to_solve=solved_at,
        search_steps=search_steps,
        hub_reads=reads,
        hub_writes=writes,
    )


def run_sim(space: KnowledgeSpace, policy: SimPolicy, seeds: Sequence[int]) -> SimMetrics:
    return SimMetrics(policy=policy, runs=[simulate_team(space, policy, s) for s in seeds])


def coupon_collector_mean(m: int) -> float:
    """Step attesi per coprire m fatti equiprobabili: m·H_m."""
    return m * sum(1.0 / k for k in range(1, m + 1))


# ── REPORT ──────────────────────────────────────────────────


class ScalingRow(BaseModel):
    n_agents: int
    hub_enabled: bool
    pass_at_n: float
    mean_search_steps: float
    mean_traffic: float


class ScalingReport(BaseModel):
    m: int
    required_size: int
    bias: BiasKind
    seeds: int
    rows: list[ScalingRow]
    checks: dict[str, bool]
    hub_search_p_value: Optional[float] = None

    def to_csv(self) -> str:
        lines = ["n_agents,hub_enabled,pass_at_n,mean_search_steps,mean_traffic"]
        for r in self.rows:
            lines.append(f"{r.n_agents},{str(r.hub_enabled).lower()},{r.pass_at_n:.6f},"
                         f"{r.mean_search_steps:.6f},{r.mean_traffic:.6f}")
        return "\n".join(lines) + "\n"


def scaling_report(m: int, required_size: int, seeds: Sequence[int], base: Optional[SimPolicy] = None,
                   team_sizes: Sequence[int] = DEFAULT_TEAM_SIZES, space_seed: int = 0) -> ScalingReport:
    """Tabella (N, Pass@N, step di ricerca medi, traffico) con hub acceso e spento, più i test di tendenza."""
    base = base or SimPolicy(bias="heterogeneous")
    space = make_space(m, required_size, space_seed)
    team_sizes = sorted(set(team_sizes))
    if not team_sizes:
        raise ValueError("serve almeno una dimensione di team")
    metrics: dict[tuple[int, bool], SimMetrics] = {}
    for hub in (True, False):
        for n in team_sizes:
            # model_copy non rivalida: n_agents ≥ 1 va controllato qui
            policy = SimPolicy.model_validate({**base.model_dump(), "n_agents": n, "hub_enabled": hub})
            metrics[(n, hub)] = run_sim(space, policy, seeds)

    rows = [ScalingRow(n_agents=n, hub_enabled=hub, pass_at_n=mt.pass_at_n,
                       mean_search_steps=mt.mean_search_steps, mean_traffic=mt.mean_traffic)
            for (n, hub), mt in metrics.items()]

    # Pass@N non decrescente in N per ogni seed
    monotone = True
    for hub in (True, False):
        for a, b in zip(team_sizes, team_sizes[1:]):
            for ra, rb in zip(metrics[(a, hub)].runs, metrics[(b, hub)].runs):
                monotone &= rb.pass_at_n >= ra.pass_at_n

    largest = team_sizes[-1]
    on = [r.mean_search_steps for r in metrics[(largest, True)].runs]
    off = [r.mean_search_steps for r in metrics[(largest, False)].runs]
    try:
        p_value = float(stats.wilcoxon(on, off, alternative="less").pvalue)
    except ValueError:
        # differenze tutte nulle
        p_value = 1.0

    traffic = [metrics[(n, True)].mean_traffic for n in team_sizes]
    checks = {
        "pass_monotone_in_n": bool(monotone),
        "hub_reduces_search_steps": p_value < SIGNIFICANCE and float(np.mean(on)) < float(np.mean(off)),
        "traffic_increasing_in_n": all(b > a for a, b in zip(traffic, traffic[1:])),
    }
    logger.info(f"Scaling report M={m} |S*|={required_size} seeds={len(seeds)}: {checks} (p={p_value:.3g})")
    return ScalingReport(m=m, required_size=required_size, bias=base.bias, seeds=len(seeds), rows=rows,
                         checks=checks, hub_search_p_value=p_value)
