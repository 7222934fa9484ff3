"""
services/runs.py — Esecuzione, replay e analisi delle run persistite

Cartella di una run:
  <out>/<run_id>/events.jsonl   event log
  <out>/<run_id>/hub/           episodi grezzi e note (solo con hub attivo)
  <out>/<run_id>/manifest.json  config, backend, seed, esiti, risposta selezionata, punteggi
"""
from __future__ import annotations

import json
import logging
import time
import uuid
from collections import Counter
from pathlib import Path
from typing import Iterable, Mapping, Optional

from pydantic import BaseModel

from services import __version__, prompts
from services.aggregate import ExactMatchJudge, Judge, score_table
from services.backends import (
    AnthropicBackend,
    ChatBackend,
    EndpointConfig,
    OpenAICompatibleBackend,
    ReplayBackend,
    ScriptedBackend,
)
from services.baselines import run_naive, run_swarm
from services.core import CandidateAnswer, EpisodeRef
from services.errors import InvalidRunDir, MixedTaskError, RunFailed
from services.eventlog import EventLog, normalize, read_events
from services.hub import NO_PRIOR_SUMMARY, HubStore
from services.runconfig import BackendSpec, RunConfig, load_script, parse_config
from services.runtime import RunEnv, TeamResult, run_team
from services.toolenv import Corpus, LiveSearchConfig, LiveWeb, ToolEnv, load_stubs

logger = logging.getLogger(__name__)

EVENTS_FILE = "events.jsonl"
MANIFEST_FILE = "manifest.json"
HUB_DIR = "hub"

# ── COSTRUZIONE ─────────────────────────────────────────────


def build_backend(name: str, spec: BackendSpec) -> ChatBackend:
    if spec.kind in ("openai", "anthropic"):
        endpoint = EndpointConfig(
            base_url=spec.base_url or "", model=spec.model, api_key_env=spec.api_key_env,
            retries=spec.retries, backoff_seconds=spec.backoff_seconds,
            timeout_seconds=spec.timeout_seconds, max_in_flight=spec.max_in_flight,
        )
        if spec.kind == "openai":
            return OpenAICompatibleBackend(name, endpoint)
        return AnthropicBackend(name, endpoint)
    if spec.kind == "scripted":
        return ScriptedBackend.from_rules(name, spec.script or load_script(spec.script_file))
    backend = ReplayBackend.from_events(read_events(spec.log))
    backend.name = name
    return backend


def build_backends(config: RunConfig) -> dict[str, ChatBackend]:
    return {name: build_backend(name, spec) for name, spec in config.backends.items()}


def build_tools(config: RunConfig) -> ToolEnv:
    spec = config.tools
    corpus = Corpus.from_jsonl(spec.corpus) if spec.corpus else None
    stubs = load_stubs(spec.stubs) if spec.stubs else None
    live = None
    if spec.live_search_url:
        live = LiveWeb(LiveSearchConfig(search_url=spec.live_search_url, api_key_env=spec.live_api_key_env))
    return ToolEnv(corpus=corpus, live=live, stubs=stubs, top_k=spec.top_k)


# ── ESECUZIONE ──────────────────────────────────────────────


class RunOutcome(BaseModel):
    run_id: str
    run_dir: str
    manifest: dict

    @property
    def failed_agents(self) -> list[str]:
        return [a for a, s in self.manifest.get("agent_outcomes", {}).items() if s == "failed"]


def new_run_id(task_id: str) -> str:
    return f"{task_id}-{time.strftime('%Y%m%d-%H%M%S')}-{uuid.uuid4().hex[:6]}"


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n", encoding="utf-8")


async def execute_run(config: RunConfig, out_dir: str | Path, run_id: Optional[str] = None,
                      backends: Optional[Mapping[str, ChatBackend]] = None,
                      judge: Optional[Judge] = None) -> RunOutcome:
    """Esegue team / naive / swarm secondo la config e persiste log, hub e manifest."""
    task = config.resolve_task()
    run_id = run_id or new_run_id(task.id)
    run_dir = Path(out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)

    backends = dict(backends) if backends is not None else build_backends(config)
    tools = build_tools(config)
    log = EventLog(run_dir / EVENTS_FILE)
    env = RunEnv(log=log, max_tokens=config.max_tokens)

    manifest: dict = {
        "run_id": run_id,
        "version": __version__,
        "mode": config.mode,
        "config": config.model_dump(mode="json"),
        "backends": {name: {"kind": s.kind, "model": s.model, "api_key_env": s.api_key_env}
                     for name, s in config.backends.items()},
        "seed": config.seed,
        "task_id": task.id,
        "gold_answer": task.gold_answer,
        "write_triggers": config.write_triggers(),
        "started_at": time.time(),
    }
    logger.info(f"▶️ Run {run_id} ({config.mode}) in {run_dir}")

    try:
        if config.mode == "team":
            if config.hub.enabled:
                env.hub = HubStore(run_dir / HUB_DIR, counter=env.counter)
                env.write_model = backends.get(config.hub.write_backend) if config.hub.write_backend else None
                env.read_model = backends.get(config.hub.read_backend) if config.hub.read_backend else None
            result = await run_team(config.team_config(), backends, tools, env, scheduler=config.scheduler)
        elif config.mode == "naive":
            result = await run_naive(task, config.naive.k, backends[config.meta_backend_ref()],
                                     backends[config.sub_backend_ref()], tools, env, scheduler=config.scheduler)
        else:
            result = await run_swarm(task, backends[config.meta_backend_ref()], tools, env,
                                     sub_backend=backends[config.sub_backend_ref()])
    except RunFailed as e:
        logger.error(f"Run {run_id} fallita: {e}")
        manifest.update({"outcome": "failed", "error": str(e), "finished_at": time.time(),
                         "agent_outcomes": {"meta": "failed"}})
        _write_json(run_dir / MANIFEST_FILE, manifest)
        raise

    manifest.update(_result_fields(result, task.gold_answer, judge))
    manifest["finished_at"] = time.time()
    _write_json(run_dir / MANIFEST_FILE, manifest)
    logger.info(f"⏹️ Run {run_id}: esito {result.outcome}, round totali {result.total_rounds}")
    return RunOutcome(run_id=run_id, run_dir=str(run_dir), manifest=manifest)


def _result_fields(result: TeamResult, gold: Optional[str], judge: Optional[Judge]) -> dict:
    fields = {
        "outcome": result.outcome,
        "selector": result.selector,
        "selected": result.selected.model_dump() if result.selected else None,
        "candidates": [c.model_dump() for c in result.candidates],
        "agent_outcomes": result.agent_outcomes,
        "n_agents": len(result.agent_outcomes),
        "rounds": result.rounds,
        "total_rounds": result.total_rounds,
        "failures": result.failures,
        "scores": None,
    }
    if gold is not None:
        judge = judge or ExactMatchJudge()
        fields["scores"] = score_table(result.candidates, gold, judge)
        fields["selected_correct"] = bool(result.selected and judge(result.selected.answer, gold))
    return fields


# ── REPLAY ──────────────────────────────────────────────────


class ReplayOutcome(BaseModel):
    original: str
    replayed: str
    identical: bool
    first_difference: Optional[int] = None


def load_manifest(run_dir: str | Path) -> dict:
    path = Path(run_dir) / MANIFEST_FILE
    if not path.exists():
        raise InvalidRunDir(f"{run_dir}: {MANIFEST_FILE} mancante")
    return json.loads(path.read_text(encoding="utf-8"))


def load_events(run_dir: str | Path) -> list[dict]:
    path = Path(run_dir) / EVENTS_FILE
    if not path.exists():
        raise InvalidRunDir(f"{run_dir}: {EVENTS_FILE} mancante")
    return read_events(path)


def compare_logs(a: list[dict], b: list[dict]) -> Optional[int]:
    """Indice della prima riga diversa dopo la normalizzazione, None se identici."""
    la, lb = normalize(a), normalize(b)
    for i, (x, y) in enumerate(zip(la, lb)):
        if x != y:
            return i
    if len(la) != len(lb):
        return min(len(la), len(lb))
    return None


async def replay_run(run_dir: str | Path, out_dir: Optional[str | Path] = None) -> ReplayOutcome:
    """Ri-esegue una run rileggendo dal suo log tutte le risposte dei modelli."""
    run_dir = Path(run_dir)
    manifest = load_manifest(run_dir)
    events = load_events(run_dir)
    config = parse_config(manifest["config"])
    replay = ReplayBackend.from_events(events)
    backends = {name: replay for name in config.backends}
    outcome = await execute_run(config, out_dir or run_dir.parent, run_id=f"{manifest['run_id']}-replay",
                                backends=backends)
    diff = compare_logs(events, load_events(outcome.run_dir))
    if diff is not None:
        logger.warning(f"Replay di {manifest['run_id']} diverge alla riga {diff}")
    return ReplayOutcome(original=str(run_dir), replayed=outcome.run_dir, identical=diff is None,
                         first_difference=diff)


# ── REPORT ──────────────────────────────────────────────────

REPORT_COLUMNS = ("selected", "bon", "mv", "wmv", "fewtool", "avg", "pass@1", "pass@N")
WORKLOAD_COLUMNS = ("search_calls/agent", "visit_calls/agent", "memory_calls/question")


def run_scores(manifest: dict, judge: Optional[Judge] = None) -> Optional[dict[str, float]]:
    gold = manifest.get("gold_answer")
    if gold is None:
        return None
    judge = judge or ExactMatchJudge()
    candidates = [CandidateAnswer.model_validate(c) for c in manifest.get("candidates", [])]
    table = score_table(candidates, gold, judge)
    selected = manifest.get("selected")
    table["selected"] = float(bool(selected) and judge(selected["answer"], gold))
    table["pass@N"] = table.get(f"pass@{len(candidates)}", 0.0)
    table.setdefault("pass@1", 0.0)
    return table


def _trigger_key(manifest: dict) -> Optional[int]:
    triggers = manifest.get("write_triggers") or []
    return triggers[0] if len(triggers) == 1 else None


def _n_agents(manifest: dict) -> int:
    return manifest.get("n_agents") or len(manifest.get("agent_outcomes") or {}) or len(manifest.get("candidates") or [])


def workload(events: list[dict]) -> dict[str, Optional[float]]:
    """Chiamate search e visit per agente e letture dell'hub della run."""
    agents = {e["agent_id"] for e in events if e["kind"] == "turn"}
    calls = Counter(e["payload"]["name"] for e in events if e["kind"] == "tool_call")
    if not agents:
        return {col: None for col in WORKLOAD_COLUMNS}
    return {
        "search_calls/agent": calls["search"] / len(agents),
        "visit_calls/agent": calls["visit"] / len(agents),
        "memory_calls/question": float(sum(e["kind"] == "hub_read" for e in events)),
    }


def _mean(values: list[Optional[float]]) -> Optional[float]:
    present = [v for v in values if v is not None]
    return sum(present) / len(present) if present else None


def report(run_dirs: Iterable[str | Path], judge: Optional[Judge] = None) -> dict:
    """Punteggi e carico di lavoro per insieme di run, raggruppate per (mode, n_agents, write_trigger)."""
    runs = []
    for d in run_dirs:
        manifest = load_manifest(d)
        runs.append((manifest, workload(load_events(d))))
    if not runs:
        raise InvalidRunDir("nessuna run da analizzare")

    groups: dict[tuple, list[tuple[dict, dict]]] = {}
    for m, w in runs:
        groups.setdefault((m["mode"], _n_agents(m), _trigger_key(m)), []).append((m, w))
    task_sets = {key: frozenset(m["task_id"] for m, _ in rs) for key, rs in groups.items()}
    if len(set(task_sets.values())) > 1:
        raise MixedTaskError("i gruppi dello sweep coprono insiemi di task diversi: "
                             + "; ".join(f"{k}: {sorted(v)}" for k, v in task_sets.items()))

    rows = []
    for key in sorted(groups, key=lambda k: (k[0], k[1], k[2] is None, k[2] or 0)):
        mode, n_agents, trigger = key
        members = groups[key]
        scored = [s for s in (run_scores(m, judge) for m, _ in members) if s is not None]
        row: dict = {"mode": mode, "n_agents": n_agents, "write_trigger": trigger, "runs": len(members),
                     "scored": len(scored), "tasks": len(task_sets[key]),
                     "total_rounds": sum(m.get("total_rounds", 0) for m, _ in members)}
        for col in REPORT_COLUMNS:
            row[col] = sum(s[col] for s in scored) / len(scored) if scored else None
        for col in WORKLOAD_COLUMNS:
            row[col] = _mean([w[col] for _, w in members])
        rows.append(row)
    return {"columns": [*REPORT_COLUMNS, *WORKLOAD_COLUMNS], "rows": rows,
            "runs": [{"run_id": m["run_id"], "task_id": m["task_id"], "mode": m["mode"],
                      "outcome": m.get("outcome"), "scores": run_scores(m, judge), **w} for m, w in runs]}


def format_report(data: dict) -> str:
    header = ["mode", "n_agents", "write_trigger", "runs", "total_rounds", *data["columns"]]
    lines = [" | ".join(f"{h:>13}" for h in header)]
    for row in data["rows"]:
        cells = []
        for h in header:
            v = row.get(h)
            if v is None:
                cells.append(f"{'-':>13}")
            elif isinstance(v, float):
                cells.append(f"{v:>13.3f}")
            else:
                cells.append(f"{v:>13}")
        lines.append(" | ".join(cells))
    return "\n".join(lines)


# ── EXPORT SFT ──────────────────────────────────────────────


def export_sft(run_dirs: Iterable[str | Path], out_dir: str | Path) -> dict[str, int]:
    """Coppie (episodio, nota) e ((intento, pagine, riassunto precedente), readout) per il training dell'hub."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_write = n_read = 0
    with (out_dir / "write_pairs.jsonl").open("w", encoding="utf-8") as wf, \
            (out_dir / "read_pairs.jsonl").open("w", encoding="utf-8") as rf:
        for d in run_dirs:
            d = Path(d)
            manifest = load_manifest(d)
            hub = HubStore.load(d / HUB_DIR)
            for ev in load_events(d):
                payload = ev["payload"]
                if ev["kind"] == "hub_write":
                    ref = EpisodeRef(owner=ev["agent_id"], ordinal=payload["ordinal"])
                    episode = hub.episodes[ref]
                    raw = (d / HUB_DIR / "episodes" / ref.owner / f"{ref.ordinal}.jsonl").read_text(encoding="utf-8")
                    wf.write(json.dumps({
                        "run_id": manifest["run_id"],
                        "owner": ref.owner,
                        "ordinal": ref.ordinal,
                        "raw": raw,
                        "messages": [
                            {"role": "system", "content": prompts.memory_manager_system()},
                            {"role": "user", "content": prompts.window_summary_user(episode.render())},
                        ],
                        "note": payload["summary"],
                        "degraded": payload.get("degraded", False),
                        "terminal": payload.get("terminal", False),
                    }, ensure_ascii=False) + "\n")
                    n_write += 1
                elif ev["kind"] == "hub_read" and payload.get("readout") is not None:
                    refs = sorted((EpisodeRef(owner=o, ordinal=int(n))
                                   for o, n in (r.strip("()").rsplit(",", 1) for r in payload["refs"])),
                                  key=lambda r: (r.owner, r.ordinal))
                    rf.write(json.dumps({
                        "run_id": manifest["run_id"],
                        "requester": ev["agent_id"],
                        "goal": payload["goal"],
                        "pages": payload["pages"],
                        "refs": [str(r) for r in refs],
                        "prior": NO_PRIOR_SUMMARY,
                        "pages_content": [hub.episodes[r].render() for r in refs],
                        "page_outputs": payload["page_outputs"],
                        "readout": payload["readout"],
                    }, ensure_ascii=False) + "\n")
                    n_read += 1
    logger.info(f"Export SFT: {n_write} coppie di scrittura, {n_read} coppie di lettura in {out_dir}")
    return {"write_pairs": n_write, "read_pairs": n_read}
