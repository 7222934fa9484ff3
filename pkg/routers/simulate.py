"""
routers/simulate.py — Report di scaling del simulatore dello spazio di conoscenza
"""
from fastapi import APIRouter, Header, HTTPException
from pydantic import BaseModel, Field, PositiveInt

from routers.runs import verify_api_token
from services.errors import FugueError
from services.sim import DEFAULT_TEAM_SIZES, SimPolicy, scaling_report

router = APIRouter()


class SimulateRequest(BaseModel):
    m: int = Field(default=50, ge=1)
    required_size: int = Field(default=20, ge=1)
    policy: SimPolicy = SimPolicy(bias="heterogeneous")
    team_sizes: list[PositiveInt] = Field(default_factory=lambda: list(DEFAULT_TEAM_SIZES), min_length=1)
    seeds: int = Field(default=100, ge=1, le=1000)
    seed: int = 0


@router.post("")
def simulate(req: SimulateRequest, x_api_token: str = Header(None)):
    # CPU-bound: endpoint sincrono, eseguito nel threadpool
    verify_api_token(x_api_token)
    if req.required_size > req.m:
        raise HTTPException(400, "required_size non può superare m")
    seeds = list(range(req.seed, req.seed + req.seeds))
    try:
        report = scaling_report(req.m, req.required_size, seeds, base=req.policy,
                                team_sizes=req.team_sizes, space_seed=req.seed)
    except (FugueError, ValueError) as e:
        raise HTTPException(400, str(e))
    return report.model_dump()
