"""
routers/aggregate.py — Regole di aggregazione su un insieme di candidati
"""
from typing import Optional

from fastapi import APIRouter, Header, HTTPException
from pydantic import BaseModel, ValidationError

from routers.runs import verify_api_token
from services.aggregate import AggregationRule, avg, pass_at_k, score_table, select
from services.core import CandidateAnswer
from services.errors import AggregationError

router = APIRouter()


class AggregateRequest(BaseModel):
    candidates: list[CandidateAnswer]
    rule: str = "bon"
    k: Optional[int] = None
    gold: Optional[str] = None


@router.post("")
async def aggregate(req: AggregateRequest, x_api_token: str = Header(None)):
    verify_api_token(x_api_token)
    try:
        rule = AggregationRule(name=req.rule, k=req.k)
    except ValidationError as e:
        raise HTTPException(400, f"Regola non valida: {e.errors()[0]['msg']}")

    try:
        result: dict = {"rule": rule.name}
        if rule.name == "avg":
            result["value"] = avg(req.candidates, req.gold)
        elif rule.name == "pass_at_k":
            result["value"] = pass_at_k(req.candidates, req.gold, k=rule.k)
        else:
            result["selected"] = select(rule.name, req.candidates)
        if req.gold is not None:
            result["scores"] = score_table(req.candidates, req.gold)
    except AggregationError as e:
        raise HTTPException(400, str(e))
    return result
