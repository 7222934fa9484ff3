"""
services/rlmath.py — Aritmetica dell'ottimizzazione del modello dell'hub (funzioni pure)

Reward con bonus di brevità, vantaggi relativi al gruppo, termine clippato,
KL tra distribuzioni categoriche, obiettivo di gruppo. Nessun training qui.
"""
from __future__ import annotations

import logging
from typing import Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-8
DEFAULT_BREVITY = 0.1
SIMPLEX_TOLERANCE = 1e-6
TRANSLATION_TOLERANCE = 1e-9
DYADIC_GRID = 64


class RewardGroup(BaseModel):
    model_config = ConfigDict(frozen=True)

    rewards: tuple[float, ...]
    epsilon: float = Field(default=DEFAULT_EPSILON, gt=0)

    @model_validator(mode="after")
    def _size(self) -> "RewardGroup":
        if len(self.rewards) < 2:
            raise ValueError("un gruppo richiede almeno 2 reward")
        return self


class SurrogateInputs(BaseModel):
    model_config = ConfigDict(frozen=True)

    ratio: float = Field(gt=0)
    advantage: float
    clip: float = Field(gt=0, lt=1)
    kl_weight: float = Field(default=0.0, ge=0)


def shaped_reward(success: int, steps: int, step_cap: int, brevity: float = DEFAULT_BREVITY) -> float:
    """R = success + λ·max(0, 1 − steps/step_cap)."""
    if steps < 0 or step_cap <= 0 or brevity < 0:
        raise ValueError("richiesti steps ≥ 0, step_cap > 0, λ ≥ 0")
    return float(success) + brevity * max(0.0, 1.0 - steps / step_cap)


def group_advantages(group: RewardGroup) -> list[float]:
    r = np.asarray(group.rewards, dtype=np.float64)
    # deviazione standard di popolazione (ddof=0)
    return ((r - r.mean()) / (r.std() + group.epsilon)).tolist()


def clipped_term(inputs: SurrogateInputs) -> float:
    rho, adv, delta = inputs.ratio, inputs.advantage, inputs.clip
    return min(rho * adv, float(np.clip(rho, 1.0 - delta, 1.0 + delta)) * adv)


def kl_categorical(p: Sequence[float], q: Sequence[float]) -> float:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("p e q devono essere vettori della stessa lunghezza")
    for name, v in (("p", p), ("q", q)):
        if (v < 0).any() or abs(v.sum() - 1.0) > SIMPLEX_TOLERANCE:
            raise ValueError(f"{name} non è una distribuzione di probabilità")
    support = p > 0
    if (q[support] <= 0).any():
        raise ValueError("supporto violato: q nullo dove p > 0")
    return float(max(0.0, np.sum(p[support] * np.log(p[support] / q[support]))))


def grpo_objective(terms: Sequence[tuple[float, float]], clip: float, kl_weight: float, kl_value: float) -> float:
    """Media dei termini clippati sul gruppo (ρ, Â) meno β·KL."""
    if not terms:
        raise ValueError("gruppo vuoto")
    surrogate = np.mean([clipped_term(SurrogateInputs(ratio=rho, advantage=adv, clip=clip))
                         for rho, adv in terms])
    return float(surrogate - kl_weight * kl_value)


# ── PROPERTY SUITE ──────────────────────────────────────────


def run_property_checks(seed: int = 0, samples: int = 1000, clip_samples: int = 10000) -> dict[str, bool]:
    """Verifiche numeriche su campioni casuali; usata da `rlmath check`."""
    rng = np.random.default_rng(seed)
    results: dict[str, bool] = {}

    adv = group_advantages(RewardGroup(rewards=(1.0, 0.0)))
    results["advantages_binary"] = abs(adv[0] - 1.0) <= 1e-6 and abs(adv[1] + 1.0) <= 1e-6

    ok_translation, ok_sum = True, True
    for _ in range(samples):
        g = int(rng.integers(2, 9))
        # ricompense e shift sulla griglia 1/64: rewards + shift è esatto in float64,
        # quindi la soglia assoluta 1e-9 copre solo l'arrotondamento di media e std
        rewards = rng.integers(-256, 257, size=g) / DYADIC_GRID
        shift = float(rng.integers(-640, 641)) / DYADIC_GRID
        a = np.array(group_advantages(RewardGroup(rewards=tuple(rewards))))
        b = np.array(group_advantages(RewardGroup(rewards=tuple(rewards + shift))))
        ok_translation &= bool(np.max(np.abs(a - b)) <= TRANSLATION_TOLERANCE)
        ok_sum &= bool(abs(a.sum()) <= 1e-6)
    results["advantages_translation_invariant"] = ok_translation
    results["advantages_zero_sum"] = ok_sum

    ok_clip = True
    for _ in range(clip_samples):
        rho = float(rng.uniform(0.01, 3.0))
        adv_ = float(rng.normal())
        delta = float(rng.uniform(0.01, 0.99))
        value = clipped_term(SurrogateInputs(ratio=rho, advantage=adv_, clip=delta))
        clipped = min(max(rho, 1 - delta), 1 + delta)
        ok_clip &= value == min(rho * adv_, clipped * adv_)
        ok_clip &= value <= (rho * adv_ if adv_ >= 0 else clipped * adv_)
    results["clipped_term_min_definition"] = bool(ok_clip)

    ok_self, ok_gibbs = True, True
    for _ in range(samples):
        n = int(rng.integers(2, 10))
        p = rng.dirichlet(np.ones(n))
        q = rng.dirichlet(np.ones(n))
        ok_self &= kl_categorical(p, p) <= 1e-12
        ok_gibbs &= kl_categorical(p, q) >= 0.0
    results["kl_self_zero"] = bool(ok_self)
    results["kl_gibbs_nonnegative"] = bool(ok_gibbs)

    for name, ok in results.items():
        (logger.info if ok else logger.error)(f"rlmath check {name}: {'ok' if ok else 'FALLITO'}")
    return results
