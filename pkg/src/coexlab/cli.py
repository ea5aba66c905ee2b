"""Command-line entrypoints.

Subcommands: run, oracle, demos, offline, eval, trace. Outcomes print as
JSON on stdout; failures print a machine-readable error on stderr and map
to exit codes 2 (configuration), 3 (backend) and 4 (unsupported
population). The API credential is the one setting read from the
environment (COEXLAB_API_KEY); everything else is a flag.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields as dataclass_fields
from dataclasses import replace
from typing import Dict, List, Optional

from .agent.config import AgentConfig
from .errors import (
    BackendUnavailableError,
    CoexlabError,
    MalformedResponseError,
    MaterializationExhaustedError,
    UnsupportedPopulationError,
)
from .mac import ScenarioSpec
from .runner import (
    BACKEND_SCRIPTED,
    BACKENDS,
    RunConfig,
    cmd_demos,
    cmd_eval,
    cmd_offline,
    cmd_oracle,
    cmd_run,
    cmd_trace,
    load_scenario,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_UNSUPPORTED = 4

_AGENT_FLAG_FIELDS = {
    "query_period": "query_period_slots",
    "epsilon": "explore_epsilon",
    "sigma": "explore_sigma",
    "n_max": "n_max",
    "alpha": "alpha",
    "demo_k": "demo_k",
    "window": "window_frames",
    "warmup": "warmup_frames",
}


def _agent_config(args: argparse.Namespace) -> AgentConfig:
    overrides: Dict[str, object] = {}
    if getattr(args, "agent_json", None):
        with open(args.agent_json, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        if not isinstance(doc, dict):
            raise ValueError("agent overrides must be a JSON object")
        known = {f.name for f in dataclass_fields(AgentConfig)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ValueError(f"unknown agent settings: {', '.join(unknown)}")
        overrides.update(doc)
    for flag, field_name in _AGENT_FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            overrides[field_name] = value
    return AgentConfig(**overrides)


def _run_config(args: argparse.Namespace) -> RunConfig:
    return RunConfig(
        scenario_path=args.scenario,
        out_dir=args.out,
        backend=args.backend,
        seed=args.seed,
        agent=_agent_config(args),
        trace=not args.no_trace,
        strategy_path=getattr(args, "strategy", None),
        demo_seed=args.demo_seed,
        endpoint=args.endpoint,
        model=args.model,
    )


def _emit(doc: Dict[str, object]) -> None:
    print(json.dumps(doc, sort_keys=True))


def _handle_run(args: argparse.Namespace) -> None:
    config = _run_config(args)
    if args.replicas > 1:
        config.validate()
        spec = load_scenario(config.scenario_path)
        base_seed = config.seed if config.seed is not None else spec.seed
        configs = [
            replace(config, seed=base_seed + i,
                    out_dir=f"{config.out_dir}/replica_{i}")
            for i in range(args.replicas)
        ]
        with ThreadPoolExecutor(max_workers=args.replicas) as pool:
            results = list(pool.map(cmd_run, configs))
        _emit({"replicas": [
            {"out_dir": r.out_dir, "seed": c.seed,
             "jain": r.metrics.get("jain"), "rmse": r.metrics.get("rmse")}
            for r, c in zip(results, configs)
        ]})
        return
    result = cmd_run(config)
    _emit({"out_dir": result.out_dir, "family": result.family,
           "jain": result.metrics.get("jain"),
           "rmse": result.metrics.get("rmse"),
           "alpha_fair": result.metrics.get("alpha_fair")})


def _handle_offline(args: argparse.Namespace) -> None:
    result = cmd_offline(_run_config(args))
    _emit({"out_dir": args.out, "strategy_id": result.strategy.id,
           "j": round(result.j, 6), "j_target": round(result.j_target, 6),
           "target_met": result.target_met, "rounds": result.rounds})


def _handle_oracle(args: argparse.Namespace) -> None:
    report = cmd_oracle(args.scenario, args.out, alpha=args.alpha)
    _emit({"out_dir": args.out, "segments": len(report["segments"]),
           "objectives": [s["objective"] for s in report["segments"]]})


def _handle_demos(args: argparse.Namespace) -> None:
    path = cmd_demos(args.family, args.k, args.seed, args.out)
    _emit({"path": path, "family": args.family, "k": args.k,
           "seed": args.seed})


def _handle_eval(args: argparse.Namespace) -> None:
    summary = cmd_eval(args.run, reference_path=args.reference)
    _emit(summary)


def _handle_trace(args: argparse.Namespace) -> None:
    paths = cmd_trace(args.run)
    _emit(paths)


def _add_agent_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--agent-json", default=None,
                   help="JSON file of agent setting overrides")
    p.add_argument("--query-period", dest="query_period", type=int,
                   default=None, help="slots per action update")
    p.add_argument("--epsilon", type=float, default=None,
                   help="exploration probability")
    p.add_argument("--sigma", type=float, default=None,
                   help="exploration noise scale")
    p.add_argument("--n-max", dest="n_max", type=int, default=None,
                   help="reflection round budget")
    p.add_argument("--alpha", type=float, default=None,
                   help="fairness exponent")
    p.add_argument("--demo-k", dest="demo_k", type=int, default=None,
                   help="demonstration tuples per protocol label")
    p.add_argument("--window", type=int, default=None,
                   help="throughput window in frames")
    p.add_argument("--warmup", type=int, default=None,
                   help="frames excluded from the RMSE comparison")


def _add_backend_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--backend", choices=BACKENDS, default=BACKEND_SCRIPTED)
    p.add_argument("--endpoint", default="",
                   help="chat-completions endpoint for the http backend")
    p.add_argument("--model", default="",
                   help="model name for the http backend")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="coexlab",
        description="Run coexistence experiments and inspect their artifacts.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="offline + online stages, full artifacts")
    run.add_argument("--scenario", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int, default=None,
                     help="override the scenario seed")
    run.add_argument("--no-trace", action="store_true")
    run.add_argument("--strategy", default=None,
                     help="cached strategy file; skips the offline stage")
    run.add_argument("--demo-seed", dest="demo_seed", type=int, default=None)
    run.add_argument("--replicas", type=int, default=1,
                     help="run N seed replicas in parallel threads")
    _add_backend_flags(run)
    _add_agent_flags(run)
    run.set_defaults(handler=_handle_run)

    offline = sub.add_parser("offline", help="offline stage only")
    offline.add_argument("--scenario", required=True)
    offline.add_argument("--out", required=True)
    offline.add_argument("--seed", type=int, default=None)
    offline.add_argument("--no-trace", action="store_true")
    offline.add_argument("--demo-seed", dest="demo_seed", type=int,
                         default=None)
    _add_backend_flags(offline)
    _add_agent_flags(offline)
    offline.set_defaults(handler=_handle_offline)

    oracle = sub.add_parser("oracle", help="analytic reference policies")
    oracle.add_argument("--scenario", required=True)
    oracle.add_argument("--out", required=True)
    oracle.add_argument("--alpha", type=float, default=1.0)
    oracle.set_defaults(handler=_handle_oracle)

    demos = sub.add_parser("demos", help="export demonstration tuples")
    demos.add_argument("--family", choices=("mac", "tcp"), required=True)
    demos.add_argument("--k", type=int, required=True)
    demos.add_argument("--seed", type=int, required=True)
    demos.add_argument("--out", required=True)
    demos.set_defaults(handler=_handle_demos)

    ev = sub.add_parser("eval", help="recompute metrics from run artifacts")
    ev.add_argument("--run", required=True)
    ev.add_argument("--reference", default=None,
                    help="reference trajectory CSV override")
    ev.set_defaults(handler=_handle_eval)

    tr = sub.add_parser("trace", help="render a run's decision tree")
    tr.add_argument("--run", required=True)
    tr.set_defaults(handler=_handle_trace)
    return parser


def _error_exit(exc: Exception) -> int:
    if isinstance(exc, UnsupportedPopulationError):
        code = EXIT_UNSUPPORTED
    elif isinstance(exc, (BackendUnavailableError, MalformedResponseError,
                          MaterializationExhaustedError)):
        code = EXIT_BACKEND
    else:
        code = EXIT_CONFIG
    print(json.dumps({"error": type(exc).__name__, "message": str(exc)},
                     sort_keys=True), file=sys.stderr)
    return code


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.handler(args)
    except (CoexlabError, ValueError, OSError, json.JSONDecodeError) as exc:
        return _error_exit(exc)
    return EXIT_OK
