"""
cli.py — Interfaccia operatore

  run CONFIG                    esegue una run (team / naive / swarm)
  replay RUN_DIR                ri-esegue una run dal suo event log e confronta i log
  baseline {naive,swarm} CONFIG esegue un baseline sulla stessa config
  simulate                      report di scaling del simulatore
  aggregate --rule R --log LOG  selezione e tabella dei punteggi di una run
  report RUN_DIR...             punteggi per regola, raggruppati per write_trigger
  export-sft RUN_DIR...         coppie di training per il modello dell'hub
  rlmath check                  suite di proprietà numeriche

Uscita: 0 ok, 1 run fallita o controllo non superato, 2 configurazione non valida.
"""
from __future__ import annotations

import argparse
import asyncio
import json
import logging
import sys
from pathlib import Path
from typing import Optional

from config import get_settings
from services import rlmath
from services.aggregate import AggregationRule, avg, pass_at_k, score_table, select
from services.core import CandidateAnswer
from services.errors import ConfigError, FugueError, RunFailed
from services.eventlog import read_events
from services.runconfig import load_config, parse_config
from services.runs import execute_run, export_sft, format_report, replay_run, report
from services.sim import SimPolicy, scaling_report

logger = logging.getLogger("cli")


def _common() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="cartella di output")
    common.add_argument("--seed", type=int, help="seed globale (sovrascrive quello della config)")
    common.add_argument("--tolerate-failures", action="store_true",
                        help="uscita 0 anche con agenti in stato failed")
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="fugue", description="Runtime di ragionamento collettivo tra agenti pari")
    parser.add_argument("--log-level", default=None)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="esegue una run da file di configurazione")
    p.add_argument("config")

    p = sub.add_parser("replay", parents=[common], help="ri-esegue una run dal suo event log")
    p.add_argument("run_dir")

    p = sub.add_parser("baseline", parents=[common], help="esegue un baseline naive o swarm")
    p.add_argument("mode", choices=["naive", "swarm"])
    p.add_argument("config")
    p.add_argument("--k", type=int, help="numero di sottotask (naive)")

    p = sub.add_parser("simulate", parents=[common], help="report di scaling del simulatore")
    p.add_argument("--space", default="M=50,S=20", help="es. M=50,S=20")
    p.add_argument("--policy", default="", help="es. E=10,p=0.05,bias=heterogeneous")
    p.add_argument("--teams", default="1,2,3,5,8")
    p.add_argument("--seeds", type=int, default=200)
    p.add_argument("--csv", help="tabella CSV per i grafici")

    p = sub.add_parser("aggregate", parents=[common], help="applica una regola ai candidati di un event log")
    p.add_argument("--rule", required=True, choices=["bon", "mv", "wmv", "fewtool", "avg", "pass_at_k"])
    p.add_argument("--k", type=int)
    p.add_argument("--log", required=True)
    p.add_argument("--gold")

    p = sub.add_parser("report", parents=[common], help="tabella dei punteggi su un insieme di run")
    p.add_argument("run_dirs", nargs="+")

    p = sub.add_parser("export-sft", parents=[common], help="esporta le coppie di training dell'hub")
    p.add_argument("run_dirs", nargs="+")

    p = sub.add_parser("rlmath", parents=[common], help="aritmetica dell'ottimizzazione")
    p.add_argument("action", choices=["check"])
    return parser


def _parse_pairs(text: str) -> dict[str, str]:
    pairs = {}
    for item in filter(None, (s.strip() for s in text.split(","))):
        if "=" not in item:
            raise ValueError(f"atteso chiave=valore, ricevuto '{item}'")
        k, v = item.split("=", 1)
        pairs[k.strip()] = v.strip()
    return pairs


def _print_json(data) -> None:
    print(json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True))


# ── COMANDI ─────────────────────────────────────────────────


def cmd_run(args, mode: Optional[str] = None) -> int:
    config = load_config(args.config)
    updates = {}
    if mode:
        updates["mode"] = mode
    if args.seed is not None:
        updates["seed"] = args.seed
    if getattr(args, "k", None):
        updates["naive"] = {**config.naive.model_dump(), "k": args.k}
    if updates:
        config = parse_config({**config.model_dump(mode="json"), **updates})
    out = args.out or config.output_dir or get_settings().runs_dir
    try:
        outcome = asyncio.run(execute_run(config, out))
    except RunFailed as e:
        print(f"run fallita: {e}", file=sys.stderr)
        return 1
    print(outcome.run_dir)
    _print_json({k: outcome.manifest.get(k) for k in ("outcome", "selected", "agent_outcomes", "scores")})
    if outcome.failed_agents and not args.tolerate_failures:
        print(f"agenti falliti: {', '.join(outcome.failed_agents)}", file=sys.stderr)
        return 1
    return 0


def cmd_replay(args) -> int:
    result = asyncio.run(replay_run(args.run_dir, args.out))
    _print_json(result.model_dump())
    return 0 if result.identical else 1


def cmd_simulate(args) -> int:
    space = _parse_pairs(args.space)
    policy = _parse_pairs(args.policy)
    fields = {}
    aliases = {"E": "episode_length", "p": "read_probability", "cap": "step_cap"}
    for key, value in policy.items():
        fields[aliases.get(key, key)] = value
    base = SimPolicy.model_validate(fields or {"bias": "heterogeneous"})
    seed0 = args.seed or 0
    seeds = list(range(seed0, seed0 + args.seeds))
    teams = [int(n) for n in args.teams.split(",")]
    if any(n < 1 for n in teams):
        raise ValueError(f"le dimensioni di team devono essere ≥ 1: {args.teams}")
    result = scaling_report(int(space["M"]), int(space["S"]), seeds, base=base, team_sizes=teams,
                            space_seed=seed0)
    data = result.model_dump()
    if args.out:
        Path(args.out).write_text(json.dumps(data, indent=2) + "\n", encoding="utf-8")
    if args.csv:
        Path(args.csv).write_text(result.to_csv(), encoding="utf-8")
    print(result.to_csv(), end="")
    _print_json({"checks": result.checks, "hub_search_p_value": result.hub_search_p_value})
    return 0


def cmd_aggregate(args) -> int:
    candidates = [
        CandidateAnswer(agent_id=e["agent_id"], answer=e["payload"]["answer"],
                        confidence=e["payload"]["confidence"], tool_calls=e["payload"]["tool_calls"])
        for e in read_events(args.log) if e["kind"] == "answer"
    ]
    rule = AggregationRule(name=args.rule, k=args.k)
    out: dict = {"rule": rule.name, "candidates": len(candidates)}
    if rule.name in ("avg", "pass_at_k"):
        if args.gold is None:
            raise FugueError(f"--gold è obbligatorio per {rule.name}")
        out["value"] = (avg(candidates, args.gold) if rule.name == "avg"
                        else pass_at_k(candidates, args.gold, k=rule.k))
    else:
        out["selected"] = select(rule.name, candidates).model_dump() if candidates else None
    if args.gold is not None:
        out["scores"] = score_table(candidates, args.gold)
    _print_json(out)
    return 0


def cmd_report(args) -> int:
    data = report(args.run_dirs)
    print(format_report(data))
    if args.out:
        Path(args.out).write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_export_sft(args) -> int:
    counts = export_sft(args.run_dirs, args.out or "sft")
    _print_json(counts)
    return 0


def cmd_rlmath(args) -> int:
    results = rlmath.run_property_checks(seed=args.seed or 0)
    _print_json(results)
    return 0 if all(results.values()) else 1


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=(args.log_level or get_settings().log_level).upper())

    handlers = {
        "run": cmd_run,
        "replay": cmd_replay,
        "baseline": lambda a: cmd_run(a, mode=a.mode),
        "simulate": cmd_simulate,
        "aggregate": cmd_aggregate,
        "report": cmd_report,
        "export-sft": cmd_export_sft,
        "rlmath": cmd_rlmath,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as e:
        print(str(e), file=sys.stderr)
        return 2
    except (FugueError, ValueError, FileNotFoundError) as e:
        print(f"errore: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
