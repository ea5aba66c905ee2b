"""Experiment runner: one command, one self-describing run directory.

Every command writes deterministic artifacts: JSON reports carry sorted
keys and no timestamps, CSV files follow RFC 4180, and transcripts are
sequence-numbered. Re-running a command with the same configuration and
the scripted backend reproduces every artifact byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

from . import __version__
from .backends import (
    Backend,
    HttpBackend,
    RecordingBackend,
    TranscriptRecorder,
)
from .errors import (
    InvalidScenarioError,
    MetricDomainError,
    TracingDisabledError,
    UnsupportedPopulationError,
)
from .mac import (
    CONTROLLED_KINDS,
    KIND_AGENT,
    KIND_AWARE,
    BernoulliSlotPolicy,
    MacEnvironment,
    ScenarioSpec,
    TrajectoryLog,
    run_frames,
    scenario_from_json,
    scenario_to_json,
)
from .metrics import (
    ThroughputSeries,
    jain_index,
    node_mean_throughputs,
    rmse_vs_reference,
    windowed_throughput,
)
from .oracle import (
    aware_trajectory,
    fair_objective,
    population_from_scenario,
    scenario_segments,
    solve_aware,
)
from .scripted import ScriptedBackend
from .strategy import Strategy, parse_strategy, strategy_doc
from .tcp import (
    CONTROLLER_AGENT,
    TcpEnvironment,
    TcpRoundRecord,
    TcpScenarioSpec,
    mean_flow_throughputs,
    mean_social_reward,
    run_rounds,
    tcp_scenario_from_json,
    tcp_scenario_to_json,
)
from .agent.config import AgentConfig
from .agent.demos import demo_bundle, demos_to_json
from .agent.offline import OfflineResult, run_offline
from .agent.online import MacPeriodEngine, TcpPeriodEngine
from .agent.trace import DecisionTrace, trace_from_doc

BACKEND_SCRIPTED = "scripted"
BACKEND_HTTP = "http"
BACKEND_NONE = "none"
BACKENDS = (BACKEND_SCRIPTED, BACKEND_HTTP, BACKEND_NONE)

ARTIFACT_CONFIG = "config.json"
ARTIFACT_DEMOS = "demos.json"
ARTIFACT_STRATEGIES = "strategies.json"
ARTIFACT_STRATEGY = "strategy.json"
ARTIFACT_EPISODES = "episodes.json"
ARTIFACT_OFFLINE = "offline_report.json"
ARTIFACT_TRANSCRIPT = "transcript.jsonl"
ARTIFACT_TRAJECTORY = "trajectory.csv"
ARTIFACT_THROUGHPUT = "throughput.csv"
ARTIFACT_REFERENCE = "reference.csv"
ARTIFACT_METRICS = "metrics_report.json"
ARTIFACT_TRACE = "trace.json"
ARTIFACT_DOT = "trace.dot"
ARTIFACT_TREE = "trace.txt"
ARTIFACT_EVAL = "eval_summary.json"
ARTIFACT_ORACLE = "oracle_report.json"

AnyScenario = Union[ScenarioSpec, TcpScenarioSpec]


@dataclass
class RunConfig:
    """Everything one run needs; the on-disk snapshot embeds the scenario
    so a run directory stays reproducible if the input file moves."""

    scenario_path: str
    out_dir: str
    backend: str = BACKEND_SCRIPTED
    seed: Optional[int] = None
    agent: AgentConfig = field(default_factory=AgentConfig)
    trace: bool = True
    strategy_path: Optional[str] = None
    demo_seed: Optional[int] = None
    endpoint: str = ""
    model: str = ""

    def validate(self) -> None:
        if not os.path.isfile(self.scenario_path):
            raise InvalidScenarioError(
                "scenario", f"no such file: {self.scenario_path}")
        if self.strategy_path is not None \
                and not os.path.isfile(self.strategy_path):
            raise InvalidScenarioError(
                "strategy", f"no such file: {self.strategy_path}")
        if self.backend not in BACKENDS:
            raise InvalidScenarioError(
                "backend",
                f"unknown backend {self.backend!r}; choose from {BACKENDS}")
        if self.backend == BACKEND_HTTP and not (self.endpoint and self.model):
            raise InvalidScenarioError(
                "backend", "http backend needs --endpoint and --model")


def load_scenario(path: str) -> AnyScenario:
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidScenarioError("$", f"invalid JSON in {path}: {exc}")
    version = doc.get("version") if isinstance(doc, dict) else None
    if version == "mac-v1":
        return scenario_from_json(text)
    if version == "tcp-v1":
        return tcp_scenario_from_json(text)
    raise InvalidScenarioError(
        "version", f"{path}: expected mac-v1 or tcp-v1, got {version!r}")


def load_cached_strategy(path: str) -> Strategy:
    """Load a strategy for reuse: either a single strategy document or a
    strategy-set snapshot, in which case the newest entry wins (later
    additions embody all earlier reflections)."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    doc = json.loads(text)
    if isinstance(doc, dict) and doc.get("version") == "strategies-v1":
        entries = doc.get("strategies", [])
        if not entries:
            raise InvalidScenarioError("strategy", f"{path} holds no strategies")
        doc = entries[-1]
    # the embedded id is recomputed from content on parse
    if isinstance(doc, dict):
        doc = {k: v for k, v in doc.items() if k != "id"}
    return parse_strategy(json.dumps(doc))


def make_backend(config: RunConfig) -> Optional[Backend]:
    if config.backend == BACKEND_SCRIPTED:
        return ScriptedBackend()
    if config.backend == BACKEND_NONE:
        return None
    return HttpBackend(endpoint=config.endpoint, model=config.model)


# -- artifact writing -------------------------------------------------------


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _write_json(path: str, doc: Dict[str, object]) -> None:
    _write_text(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _csv_text(header: Sequence[str], rows: Sequence[Sequence[object]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def _cell(value: object) -> object:
    if isinstance(value, float):
        return round(value, 6)
    return value


def _mac_trajectory_csv(series: ThroughputSeries) -> str:
    node_ids = sorted(series.values)
    header = ["frame"] + [f"node_{nid}" for nid in node_ids]
    rows = []
    for idx, frame in enumerate(series.frames):
        rows.append([frame] + [_cell(series.values[nid][idx])
                               for nid in node_ids])
    return _csv_text(header, rows)


def _reference_csv(reference: Dict[int, List[float]]) -> str:
    node_ids = sorted(reference)
    header = ["frame"] + [f"node_{nid}" for nid in node_ids]
    total = len(reference[node_ids[0]]) if node_ids else 0
    rows = []
    for f in range(total):
        rows.append([f + 1] + [_cell(reference[nid][f]) for nid in node_ids])
    return _csv_text(header, rows)


def _tcp_trajectory_csv(records: Sequence[TcpRoundRecord],
                        n_flows: int) -> str:
    header = ["round"]
    for fid in range(n_flows):
        header += [f"flow_{fid}_cwnd", f"flow_{fid}_acks", f"flow_{fid}_rtt"]
    rows = []
    for rec in records:
        row: List[object] = [rec.round_index]
        for fid in range(n_flows):
            fr = rec.per_flow.get(fid)
            if fr is None:
                row += ["", "", ""]
            else:
                row += [_cell(fr.cwnd), _cell(fr.acks), _cell(fr.rtt)]
        rows.append(row)
    return _csv_text(header, rows)


def _throughput_csv(means: Dict[int, float], id_label: str) -> str:
    return _csv_text([id_label, "mean_throughput"],
                     [[nid, _cell(means[nid])] for nid in sorted(means)])


# -- metric reports ---------------------------------------------------------


def mac_metrics_report(series: ThroughputSeries, means: Dict[int, float],
                       reference: Optional[Dict[int, List[float]]],
                       config: AgentConfig) -> Dict[str, object]:
    report: Dict[str, object] = {
        "artifact": "metrics-v1",
        "family": "mac",
        "params": {
            "alpha": config.alpha,
            "window_frames": series.window_frames,
            "warmup_frames": config.warmup_frames,
        },
        "mean_throughputs": {str(n): _cell(v) for n, v in sorted(means.items())},
        "jain": _cell(jain_index(list(means.values()))),
        "alpha_fair": _cell(fair_objective(means.values(), config.alpha)),
        "rmse": None,
    }
    if reference is not None:
        try:
            report["rmse"] = _cell(rmse_vs_reference(
                series, reference, warmup_frames=config.warmup_frames))
        except MetricDomainError:
            pass
    return report


def tcp_metrics_report(records: Sequence[TcpRoundRecord],
                       config: AgentConfig) -> Dict[str, object]:
    total = records[-1].round_index + 1 if records else 0
    first = total // 2
    means = mean_flow_throughputs(list(records), first_round=first)
    return {
        "artifact": "metrics-v1",
        "family": "tcp",
        "params": {"alpha": config.alpha, "first_round": first},
        "mean_throughputs": {str(f): _cell(v) for f, v in sorted(means.items())},
        "jain": _cell(jain_index(list(means.values()))),
        "alpha_fair": _cell(fair_objective(means.values(), config.alpha)),
        "social_reward": _cell(mean_social_reward(list(records),
                                                  first_round=first)),
        "rmse": None,
    }


def _config_snapshot(config: RunConfig, spec: AnyScenario,
                     family: str) -> Dict[str, object]:
    scenario_text = scenario_to_json(spec) if family == "mac" \
        else tcp_scenario_to_json(spec)
    return {
        "artifact": "run-config-v1",
        "package_version": __version__,
        "family": family,
        "backend": config.backend,
        "seed": spec.seed,
        "demo_seed": config.demo_seed if config.demo_seed is not None
        else spec.seed,
        "trace": config.trace,
        "cached_strategy": config.strategy_path is not None,
        "agent": asdict(config.agent),
        "scenario": json.loads(scenario_text),
    }


# -- reference actuation ----------------------------------------------------


def run_aware_reference(spec: ScenarioSpec,
                        alpha: float = 1.0) -> TrajectoryLog:
    """Drive every controlled node with the per-segment analytic optimum.

    This is the reference actuation path: no agent loop, no backend, the
    policy vector switches exactly at population events.
    """
    env = MacEnvironment(spec)
    policy = BernoulliSlotPolicy(spec.seed, {})
    for start, end, live in scenario_segments(spec):
        controlled = [nid for nid in live
                      if spec.nodes[nid].kind in CONTROLLED_KINDS]
        if controlled:
            pop = population_from_scenario(spec, live)
            solution = solve_aware(pop, alpha=alpha)
            for nid, vec in zip(controlled, solution.policies):
                policy.set_vector(nid, vec)
        run_frames(env, policy, end - start)
    return env.log


# -- commands ---------------------------------------------------------------


@dataclass
class RunResult:
    out_dir: str
    family: str
    metrics: Dict[str, object]
    offline: Optional[OfflineResult] = None


def _mac_reference(spec: ScenarioSpec,
                   alpha: float) -> Optional[Dict[int, List[float]]]:
    try:
        reference, _ = aware_trajectory(spec, alpha=alpha)
    except (UnsupportedPopulationError, ValueError):
        return None
    return reference


def _offline_artifacts(out: str, family: str, demo_k: int, demo_seed: int,
                       demos, result: OfflineResult) -> None:
    _write_text(os.path.join(out, ARTIFACT_DEMOS),
                demos_to_json(family, demo_k, demo_seed, demos.sets))
    _write_text(os.path.join(out, ARTIFACT_STRATEGIES),
                result.strategies.to_json())
    _write_text(os.path.join(out, ARTIFACT_EPISODES),
                result.episodes.to_json())
    _write_json(os.path.join(out, ARTIFACT_STRATEGY),
                {"id": result.strategy.id, **strategy_doc(result.strategy)})
    _write_json(os.path.join(out, ARTIFACT_OFFLINE), {
        "artifact": "offline-v1",
        "strategy_id": result.strategy.id,
        "j": _cell(result.j),
        "j_target": _cell(result.j_target),
        "target_met": result.target_met,
        "rounds": result.rounds,
        "retries": result.retries,
    })


def cmd_run(config: RunConfig) -> RunResult:
    """Offline stage (unless a cached strategy is supplied), online stage,
    then the full artifact set."""
    config.validate()
    spec = load_scenario(config.scenario_path)
    if config.seed is not None:
        spec = replace(spec, seed=config.seed)
    family = "mac" if isinstance(spec, ScenarioSpec) else "tcp"
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    agent_cfg = config.agent
    demo_seed = config.demo_seed if config.demo_seed is not None else spec.seed

    recorder = TranscriptRecorder()
    backend = make_backend(config)
    wrapped = RecordingBackend(backend, recorder) \
        if backend is not None else None
    trace = DecisionTrace(f"run {os.path.basename(config.scenario_path)}") \
        if config.trace else None

    offline_result: Optional[OfflineResult] = None
    demos = None
    if family == "mac":
        has_aware = any(n.kind == KIND_AWARE for n in spec.nodes)
        has_agent = any(n.kind == KIND_AGENT for n in spec.nodes)
        if has_aware:
            log = run_aware_reference(spec, alpha=agent_cfg.alpha)
            trace = None
        elif not has_agent:
            env = MacEnvironment(spec)
            run_frames(env, None, spec.total_frames)
            log = env.log
            trace = None
        else:
            strategy, offline_result, demos = _obtain_strategy(
                config, wrapped, spec, "mac", demo_seed)
            engine = MacPeriodEngine(spec, strategy, agent_cfg,
                                     backend=wrapped, trace=trace)
            log = engine.run(spec.total_frames)
        series = windowed_throughput(log, agent_cfg.window_frames)
        means = node_mean_throughputs(log)
        reference = _mac_reference(spec, agent_cfg.alpha)
        metrics = mac_metrics_report(series, means, reference, agent_cfg)
        _write_text(os.path.join(out, ARTIFACT_TRAJECTORY),
                    _mac_trajectory_csv(series))
        _write_text(os.path.join(out, ARTIFACT_THROUGHPUT),
                    _throughput_csv(means, "node"))
        if reference is not None:
            _write_text(os.path.join(out, ARTIFACT_REFERENCE),
                        _reference_csv(reference))
    else:
        has_agent = any(f.controller == CONTROLLER_AGENT for f in spec.flows)
        if has_agent:
            strategy, offline_result, demos = _obtain_strategy(
                config, wrapped, spec, "tcp", demo_seed)
            engine = TcpPeriodEngine(spec, strategy, agent_cfg,
                                     backend=wrapped, trace=trace)
            records = engine.run(spec.total_rounds)
        else:
            env = TcpEnvironment(spec)
            run_rounds(env, None, spec.total_rounds)
            records = env.records
            trace = None
        metrics = tcp_metrics_report(records, agent_cfg)
        _write_text(os.path.join(out, ARTIFACT_TRAJECTORY),
                    _tcp_trajectory_csv(records, len(spec.flows)))
        first = metrics["params"]["first_round"]
        means = mean_flow_throughputs(list(records), first_round=first)
        _write_text(os.path.join(out, ARTIFACT_THROUGHPUT),
                    _throughput_csv(means, "flow"))

    _write_json(os.path.join(out, ARTIFACT_CONFIG),
                _config_snapshot(config, spec, family))
    _write_json(os.path.join(out, ARTIFACT_METRICS), metrics)
    if offline_result is not None and demos is not None:
        _offline_artifacts(out, family, agent_cfg.demo_k, demo_seed,
                           demos, offline_result)
    if wrapped is not None:
        recorder.write(os.path.join(out, ARTIFACT_TRANSCRIPT))
    if trace is not None:
        _write_text(os.path.join(out, ARTIFACT_TRACE), trace.to_json())
        _write_text(os.path.join(out, ARTIFACT_DOT), trace.to_dot())
    return RunResult(out_dir=out, family=family, metrics=metrics,
                     offline=offline_result)


def _obtain_strategy(config: RunConfig, backend: Optional[Backend],
                     spec: AnyScenario, family: str, demo_seed: int):
    if config.strategy_path is not None:
        return load_cached_strategy(config.strategy_path), None, None
    if backend is None:
        raise InvalidScenarioError(
            "backend", "agent scenarios need a backend or a cached strategy")
    demos = demo_bundle(family, config.agent.demo_k, demo_seed,
                        config=config.agent)
    result = run_offline(backend, spec, demos, config.agent)
    return result.strategy, result, demos


def cmd_offline(config: RunConfig) -> OfflineResult:
    """Offline stage only; artifacts cover demos, memory and the outcome."""
    config.validate()
    spec = load_scenario(config.scenario_path)
    if config.seed is not None:
        spec = replace(spec, seed=config.seed)
    family = "mac" if isinstance(spec, ScenarioSpec) else "tcp"
    out = config.out_dir
    os.makedirs(out, exist_ok=True)
    demo_seed = config.demo_seed if config.demo_seed is not None else spec.seed

    backend = make_backend(config)
    if backend is None:
        raise InvalidScenarioError("backend",
                                   "offline learning needs a backend")
    recorder = TranscriptRecorder()
    wrapped = RecordingBackend(backend, recorder)
    demos = demo_bundle(family, config.agent.demo_k, demo_seed,
                        config=config.agent)
    result = run_offline(wrapped, spec, demos, config.agent)

    _write_json(os.path.join(out, ARTIFACT_CONFIG),
                _config_snapshot(config, spec, family))
    _offline_artifacts(out, family, config.agent.demo_k, demo_seed,
                       demos, result)
    recorder.write(os.path.join(out, ARTIFACT_TRANSCRIPT))
    return result


def cmd_oracle(scenario_path: str, out_dir: str,
               alpha: float = 1.0) -> Dict[str, object]:
    """Analytic reference for a slot scenario: per-segment policies and
    the per-frame reference trajectory."""
    if not os.path.isfile(scenario_path):
        raise InvalidScenarioError("scenario",
                                   f"no such file: {scenario_path}")
    spec = load_scenario(scenario_path)
    if not isinstance(spec, ScenarioSpec):
        raise UnsupportedPopulationError(
            "flow scenarios have no slot-level analytic reference")
    reference, segments = aware_trajectory(spec, alpha=alpha)
    report: Dict[str, object] = {
        "artifact": "oracle-v1",
        "alpha": alpha,
        "frame_len": spec.frame_len,
        "total_frames": spec.total_frames,
        "segments": [],
    }
    for seg in segments:
        controlled = [nid for nid in seg.live_ids
                      if spec.nodes[nid].kind in CONTROLLED_KINDS]
        report["segments"].append({
            "start_frame": seg.start_frame,
            "end_frame": seg.end_frame,
            "live_ids": list(seg.live_ids),
            "objective": _cell(seg.solution.objective),
            "caveat": seg.solution.caveat,
            "policies": {str(nid): [_cell(p) for p in vec]
                         for nid, vec in zip(controlled,
                                             seg.solution.policies)},
            "throughputs": {str(nid): _cell(val)
                            for nid, val in sorted(seg.node_values.items())},
        })
    os.makedirs(out_dir, exist_ok=True)
    _write_json(os.path.join(out_dir, ARTIFACT_ORACLE), report)
    _write_text(os.path.join(out_dir, ARTIFACT_REFERENCE),
                _reference_csv(reference))
    return report


def cmd_demos(family: str, k: int, seed: int, out_dir: str,
              config: Optional[AgentConfig] = None) -> str:
    bundle = demo_bundle(family, k, seed, config=config)
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, ARTIFACT_DEMOS)
    _write_text(path, demos_to_json(family, k, seed, bundle.sets))
    return path


def _read_artifact(run_dir: str, name: str) -> str:
    path = os.path.join(run_dir, name)
    if not os.path.isfile(path):
        raise InvalidScenarioError("run_dir",
                                   f"missing artifact: {path}")
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return fh.read()


def _read_wide_csv(text: str, index_col: str,
                   prefix: str) -> Tuple[List[int], Dict[int, List[float]]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if not header or header[0] != index_col:
        raise InvalidScenarioError("trajectory",
                                   f"first column must be {index_col}")
    ids = [int(col[len(prefix):]) for col in header[1:]]
    index: List[int] = []
    values: Dict[int, List[float]] = {i: [] for i in ids}
    for row in reader:
        index.append(int(row[0]))
        for i, cell in zip(ids, row[1:]):
            values[i].append(float(cell))
    return index, values


def cmd_eval(run_dir: str,
             reference_path: Optional[str] = None) -> Dict[str, object]:
    """Recompute the metrics summary from a run directory's artifacts."""
    cfg_doc = json.loads(_read_artifact(run_dir, ARTIFACT_CONFIG))
    agent_cfg = AgentConfig(**cfg_doc["agent"])
    family = cfg_doc["family"]
    trajectory = _read_artifact(run_dir, ARTIFACT_TRAJECTORY)

    if family == "mac":
        frames, values = _read_wide_csv(trajectory, "frame", "node_")
        series = ThroughputSeries(frames=frames, values=values,
                                  window_frames=agent_cfg.window_frames)
        reference = None
        ref_file = reference_path or os.path.join(run_dir, ARTIFACT_REFERENCE)
        if os.path.isfile(ref_file):
            with open(ref_file, "r", encoding="utf-8", newline="") as fh:
                _, reference = _read_wide_csv(fh.read(), "frame", "node_")
        text = _read_artifact(run_dir, ARTIFACT_THROUGHPUT)
        reader = csv.reader(io.StringIO(text))
        next(reader)
        means = {int(row[0]): float(row[1]) for row in reader}
        summary = mac_metrics_report(series, means, reference, agent_cfg)
    else:
        text = _read_artifact(run_dir, ARTIFACT_THROUGHPUT)
        reader = csv.reader(io.StringIO(text))
        next(reader)
        means = {int(row[0]): float(row[1]) for row in reader}
        metrics_doc = json.loads(_read_artifact(run_dir, ARTIFACT_METRICS))
        summary = {
            "artifact": "metrics-v1",
            "family": "tcp",
            "params": metrics_doc["params"],
            "mean_throughputs": {str(f): _cell(v)
                                 for f, v in sorted(means.items())},
            "jain": _cell(jain_index(list(means.values()))),
            "alpha_fair": _cell(fair_objective(means.values(),
                                               agent_cfg.alpha)),
            "social_reward": metrics_doc.get("social_reward"),
            "rmse": None,
        }
    summary["artifact"] = "eval-v1"
    _write_json(os.path.join(run_dir, ARTIFACT_EVAL), summary)
    return summary


def cmd_trace(run_dir: str) -> Dict[str, str]:
    """Render the decision tree of a traced run as text and DOT files."""
    path = os.path.join(run_dir, ARTIFACT_TRACE)
    if not os.path.isfile(path):
        raise TracingDisabledError(
            f"{run_dir} holds no decision trace; rerun with tracing enabled")
    with open(path, "r", encoding="utf-8") as fh:
        trace = trace_from_doc(json.load(fh))
    tree_path = os.path.join(run_dir, ARTIFACT_TREE)
    dot_path = os.path.join(run_dir, ARTIFACT_DOT)
    _write_text(tree_path, trace.render())
    _write_text(dot_path, trace.to_dot())
    return {"tree": tree_path, "dot": dot_path}
