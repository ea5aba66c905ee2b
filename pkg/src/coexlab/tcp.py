"""Fluid model of TCP flows sharing one bottleneck link.

One simulation step is one RTT-long round. The link drains
``capacity * base_rtt`` packets per round; anything offered beyond that
queues up to the buffer and the rest is dropped, allocated across flows
in proportion to their share of the offered load. Feedback (acks, rtt,
loss) then drives each flow's controller.

Defaults mirror a 1 Mbps link with 1000-byte packets and a 100 ms base
RTT: 12.5 packets in flight fill the pipe, and the buffer holds one
bandwidth-delay product more.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

from .errors import InvalidScenarioError, MetricDomainError

DEFAULT_CAPACITY_PPS = 125.0      # 1 Mbps / (1000 bytes * 8 bits)
DEFAULT_BASE_RTT_S = 0.1
DEFAULT_BUFFER_PKTS = 12.5        # one bandwidth-delay product
DEFAULT_CWND_MAX = 64
DEFAULT_REWARD_BETA = 0.5
REWARD_FLOOR_PENALTY = 5.0

VEGAS_ALPHA = 1.0   # packets
VEGAS_BETA = 3.0    # packets

CONTROLLER_RENO = "reno"
CONTROLLER_VEGAS = "vegas"
CONTROLLER_AGENT = "agent"
CONTROLLERS = (CONTROLLER_RENO, CONTROLLER_VEGAS, CONTROLLER_AGENT)

MODE_SLOW_START = "slow_start"
MODE_CONGESTION_AVOIDANCE = "congestion_avoidance"


@dataclass
class TcpFlowConfig:
    controller: str
    join_round: int = 0
    leave_round: Optional[int] = None


@dataclass
class TcpScenarioSpec:
    flows: List[TcpFlowConfig]
    total_rounds: int
    seed: int
    link_capacity_pps: float = DEFAULT_CAPACITY_PPS
    base_rtt_s: float = DEFAULT_BASE_RTT_S
    buffer_pkts: float = DEFAULT_BUFFER_PKTS
    cwnd_max: int = DEFAULT_CWND_MAX


@dataclass
class FlowState:
    cwnd: float
    ssthresh: float
    mode: str
    base_rtt_est: Optional[float] = None


@dataclass
class RoundFeedback:
    acks: float
    rtt: float
    loss: bool
    drops: float


@dataclass
class FlowRoundRecord:
    cwnd: float
    acks: float
    rtt: float
    loss: bool
    drops: float


@dataclass
class TcpRoundRecord:
    round_index: int
    live_ids: tuple
    queue: float
    per_flow: Dict[int, FlowRoundRecord] = field(default_factory=dict)


def validate_tcp_scenario(spec: TcpScenarioSpec) -> None:
    if spec.total_rounds < 1:
        raise InvalidScenarioError("total_rounds", "must be >= 1")
    if spec.link_capacity_pps <= 0:
        raise InvalidScenarioError("link_capacity_pps", "must be positive")
    if spec.base_rtt_s <= 0:
        raise InvalidScenarioError("base_rtt_s", "must be positive")
    if spec.buffer_pkts < 0:
        raise InvalidScenarioError("buffer_pkts", "must be >= 0")
    if spec.cwnd_max < 1:
        raise InvalidScenarioError("cwnd_max", "must be >= 1")
    if not spec.flows:
        raise InvalidScenarioError("flows", "at least one flow required")
    for i, flow in enumerate(spec.flows):
        if flow.controller not in CONTROLLERS:
            raise InvalidScenarioError(
                f"flows[{i}].controller", f"unknown controller {flow.controller!r}"
            )
        if flow.join_round < 0:
            raise InvalidScenarioError(f"flows[{i}].join_round", "must be >= 0")
        if flow.leave_round is not None and flow.leave_round <= flow.join_round:
            raise InvalidScenarioError(
                f"flows[{i}].leave_round", "must be greater than join_round"
            )


def initial_state(controller: str, cwnd_max: int) -> FlowState:
    if controller == CONTROLLER_RENO:
        return FlowState(cwnd=2.0, ssthresh=cwnd_max / 2.0,
                         mode=MODE_SLOW_START)
    # Vegas probes linearly from the start; agent flows are overridden
    # each round anyway.
    return FlowState(cwnd=2.0, ssthresh=cwnd_max / 2.0,
                     mode=MODE_CONGESTION_AVOIDANCE)


def reno_update(state: FlowState, fb: RoundFeedback, cwnd_max: int) -> FlowState:
    """Slow-start doubling, +1 per round in congestion avoidance, and a
    multiplicative halving to ssthresh on loss."""
    if fb.loss:
        ssthresh = max(state.cwnd / 2.0, 2.0)
        return replace(state, cwnd=ssthresh, ssthresh=ssthresh,
                       mode=MODE_CONGESTION_AVOIDANCE)
    if state.mode == MODE_SLOW_START and state.cwnd < state.ssthresh:
        cwnd = min(state.cwnd * 2.0, state.ssthresh)
        mode = (MODE_CONGESTION_AVOIDANCE if cwnd >= state.ssthresh
                else MODE_SLOW_START)
        return replace(state, cwnd=min(cwnd, float(cwnd_max)), mode=mode)
    return replace(state, cwnd=min(state.cwnd + 1.0, float(cwnd_max)),
                   mode=MODE_CONGESTION_AVOIDANCE)


def vegas_update(state: FlowState, fb: RoundFeedback, cwnd_max: int) -> FlowState:
    """Keep the estimated packets queued at the bottleneck between
    VEGAS_ALPHA and VEGAS_BETA.

    diff = (cwnd/base_rtt - cwnd/rtt) * base_rtt, the surplus the flow
    itself parks in the queue, measured in packets. On loss the flow
    falls back to a Reno-style halving.
    """
    base = state.base_rtt_est
    if base is None or fb.rtt < base:
        base = fb.rtt
    if fb.loss:
        ssthresh = max(state.cwnd / 2.0, 2.0)
        return replace(state, cwnd=ssthresh, ssthresh=ssthresh,
                       mode=MODE_CONGESTION_AVOIDANCE, base_rtt_est=base)
    diff = (state.cwnd / base - state.cwnd / fb.rtt) * base
    if diff < VEGAS_ALPHA:
        cwnd = min(state.cwnd + 1.0, float(cwnd_max))
    elif diff > VEGAS_BETA:
        cwnd = max(state.cwnd - 1.0, 1.0)
    else:
        cwnd = state.cwnd
    return replace(state, cwnd=cwnd, base_rtt_est=base,
                   mode=MODE_CONGESTION_AVOIDANCE)


def tcp_reward(acks: float, rtt: float,
               beta: float = DEFAULT_REWARD_BETA) -> float:
    """log of delivered packets minus a delay penalty. A starved round
    (no acks) earns the floor: the zero-ack log value minus a fixed
    penalty, so it always ranks below any delivering round."""
    if acks <= 0.0:
        return math.log(1.0) - beta * rtt - REWARD_FLOOR_PENALTY
    return math.log(acks) - beta * rtt


class TcpEnvironment:
    """Round-driven state for all flows plus the per-round log."""

    def __init__(self, spec: TcpScenarioSpec):
        validate_tcp_scenario(spec)
        self.spec = spec
        self.round_index = 0
        self.states: Dict[int, FlowState] = {}
        self.live: List[int] = []
        self.records: List[TcpRoundRecord] = []
        self._refresh_live()

    def _refresh_live(self) -> bool:
        new_live = []
        for fid, cfg in enumerate(self.spec.flows):
            live = cfg.join_round <= self.round_index and (
                cfg.leave_round is None or self.round_index < cfg.leave_round
            )
            if live:
                new_live.append(fid)
                if fid not in self.states:
                    self.states[fid] = initial_state(
                        cfg.controller, self.spec.cwnd_max
                    )
            elif fid in self.states and cfg.leave_round is not None \
                    and self.round_index >= cfg.leave_round:
                self.states.pop(fid, None)
        changed = new_live != self.live
        self.live = new_live
        return changed

    def agent_ids(self) -> List[int]:
        return [fid for fid in self.live
                if self.spec.flows[fid].controller == CONTROLLER_AGENT]

    def step_round(self, agent_cwnds: Optional[Dict[int, int]] = None) -> TcpRoundRecord:
        """Advance one round. ``agent_cwnds`` overrides the window of every
        live agent flow before the round is played out."""
        self._refresh_live()
        agent_cwnds = agent_cwnds or {}
        for fid, cwnd in agent_cwnds.items():
            if fid in self.states:
                bounded = min(max(int(cwnd), 1), self.spec.cwnd_max)
                self.states[fid] = replace(self.states[fid], cwnd=float(bounded))

        spec = self.spec
        pipe = spec.link_capacity_pps * spec.base_rtt_s
        offered = sum(self.states[fid].cwnd for fid in self.live)
        backlog = max(0.0, offered - pipe)
        queue = min(backlog, spec.buffer_pkts)
        overflow = max(0.0, backlog - spec.buffer_pkts)
        rtt = spec.base_rtt_s + queue / spec.link_capacity_pps

        record = TcpRoundRecord(round_index=self.round_index,
                                live_ids=tuple(self.live), queue=queue)
        for fid in self.live:
            state = self.states[fid]
            drops = overflow * state.cwnd / offered if offered > 0 else 0.0
            acks = state.cwnd - drops
            fb = RoundFeedback(acks=acks, rtt=rtt, loss=drops > 0.0,
                               drops=drops)
            record.per_flow[fid] = FlowRoundRecord(
                cwnd=state.cwnd, acks=acks, rtt=rtt, loss=fb.loss, drops=drops
            )
            controller = spec.flows[fid].controller
            if controller == CONTROLLER_RENO:
                self.states[fid] = reno_update(state, fb, spec.cwnd_max)
            elif controller == CONTROLLER_VEGAS:
                self.states[fid] = vegas_update(state, fb, spec.cwnd_max)
            else:
                # agent flows keep their override until the next one, but
                # still track the base rtt estimate
                base = state.base_rtt_est
                if base is None or fb.rtt < base:
                    self.states[fid] = replace(state, base_rtt_est=fb.rtt)

        self.records.append(record)
        self.round_index += 1
        return record


def run_rounds(env: TcpEnvironment, controller=None,
               n_rounds: Optional[int] = None) -> List[TcpRoundRecord]:
    """Run rounds until the scenario's horizon (or ``n_rounds``).

    ``controller`` is called once per round with the environment and must
    return the agent cwnd overrides for that round.
    """
    target = env.spec.total_rounds if n_rounds is None else n_rounds
    while env.round_index < target:
        overrides = controller(env) if controller is not None else None
        env.step_round(overrides)
    return env.records


def mean_social_reward(records: List[TcpRoundRecord], first_round: int = 0,
                       beta: float = DEFAULT_REWARD_BETA) -> float:
    """Mean over rounds of the average per-flow reward among live flows."""
    values = []
    for rec in records:
        if rec.round_index < first_round or not rec.per_flow:
            continue
        per_flow = [tcp_reward(fr.acks, fr.rtt, beta)
                    for fr in rec.per_flow.values()]
        values.append(sum(per_flow) / len(per_flow))
    if not values:
        raise MetricDomainError("no rounds to score")
    return sum(values) / len(values)


def mean_flow_throughputs(records: List[TcpRoundRecord],
                          first_round: int = 0) -> Dict[int, float]:
    """Average delivery rate (packets per second) per flow over the tail
    of the log starting at ``first_round``."""
    sums: Dict[int, float] = {}
    counts: Dict[int, int] = {}
    for rec in records:
        if rec.round_index < first_round:
            continue
        for fid, fr in rec.per_flow.items():
            sums[fid] = sums.get(fid, 0.0) + fr.acks / fr.rtt
            counts[fid] = counts.get(fid, 0) + 1
    return {fid: sums[fid] / counts[fid] for fid in sums}


def tcp_scenario_to_json(spec: TcpScenarioSpec) -> str:
    flows = []
    for cfg in spec.flows:
        entry: Dict[str, object] = {"controller": cfg.controller}
        if cfg.join_round:
            entry["join_round"] = cfg.join_round
        if cfg.leave_round is not None:
            entry["leave_round"] = cfg.leave_round
        flows.append(entry)
    doc = {
        "version": "tcp-v1",
        "link_capacity_pps": spec.link_capacity_pps,
        "base_rtt_s": spec.base_rtt_s,
        "buffer_pkts": spec.buffer_pkts,
        "cwnd_max": spec.cwnd_max,
        "total_rounds": spec.total_rounds,
        "seed": spec.seed,
        "flows": flows,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def tcp_scenario_from_json(text: str) -> TcpScenarioSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidScenarioError("$", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidScenarioError("$", "scenario must be a JSON object")
    if doc.get("version") != "tcp-v1":
        raise InvalidScenarioError("version", f"expected tcp-v1, got {doc.get('version')!r}")
    raw_flows = doc.get("flows")
    if not isinstance(raw_flows, list):
        raise InvalidScenarioError("flows", "must be a list")
    flows = []
    for i, raw in enumerate(raw_flows):
        if not isinstance(raw, dict):
            raise InvalidScenarioError(f"flows[{i}]", "must be an object")
        for key in raw:
            if key not in {"controller", "join_round", "leave_round"}:
                raise InvalidScenarioError(f"flows[{i}].{key}", "unknown field")
        flows.append(TcpFlowConfig(
            controller=raw.get("controller", ""),
            join_round=raw.get("join_round", 0),
            leave_round=raw.get("leave_round"),
        ))
    for key in ("total_rounds", "seed"):
        if not isinstance(doc.get(key), int):
            raise InvalidScenarioError(key, "must be an integer")
    spec = TcpScenarioSpec(
        flows=flows,
        total_rounds=doc["total_rounds"],
        seed=doc["seed"],
        link_capacity_pps=doc.get("link_capacity_pps", DEFAULT_CAPACITY_PPS),
        base_rtt_s=doc.get("base_rtt_s", DEFAULT_BASE_RTT_S),
        buffer_pkts=doc.get("buffer_pkts", DEFAULT_BUFFER_PKTS),
        cwnd_max=doc.get("cwnd_max", DEFAULT_CWND_MAX),
    )
    validate_tcp_scenario(spec)
    return spec
