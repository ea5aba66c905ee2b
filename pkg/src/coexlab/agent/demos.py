"""Protocol demonstrations sampled from simulation runs.

Each demonstration set pairs one labeled coexistence scenario with K
uniformly sampled actions. A probe run with the controlled node held
passive supplies the starting state; each sampled action then plays out
in a fresh copy of the scenario, giving the realized reward and the
end-state summary. Every tuple is produced by simulation, never written
by hand, and the whole set is a pure function of the seed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from ..mac import (
    DEFAULT_FRAME_LEN,
    KIND_AGENT,
    KIND_ALOHA,
    KIND_CSMA,
    KIND_TDMA,
    BernoulliSlotPolicy,
    MacEnvironment,
    NodeConfig,
    ScenarioSpec,
    SlotOutcome,
    TrajectoryLog,
    purpose_rng,
    run_frames,
)
from ..metrics import node_mean_throughputs, slot_utilization
from ..oracle import fair_objective
from ..tcp import (
    DEFAULT_CWND_MAX,
    CONTROLLER_AGENT,
    CONTROLLER_RENO,
    CONTROLLER_VEGAS,
    TcpEnvironment,
    TcpFlowConfig,
    TcpRoundRecord,
    TcpScenarioSpec,
    mean_social_reward,
    run_rounds,
)
from .config import AgentConfig

FAMILY_MAC = "mac"
FAMILY_TCP = "tcp"

MAC_LABELS = ("CSMA", "TDMA", "ALOHA", "DYNAMIC")
TCP_LABELS = ("RENO", "VEGAS", "TCP-DYNAMIC")

# The controlled node/flow always has id 0 in demonstration scenarios.
DEMO_AGENT_ID = 0

# Spawn-key namespace for demonstration environment seeds; disjoint from
# node streams (< 10000) and purpose streams (1-element keys >= 10000).
_DEMO_SEED_SPACE = 20000
_DEMO_ACTION_STREAM = 2


@dataclass(frozen=True)
class DemoTuple:
    """One (state, action, reward, next state) sample."""

    s: Dict[str, object]
    a: object
    r: float
    sn: Dict[str, object]


@dataclass
class DemoSet:
    label: str
    k: int
    tuples: List[DemoTuple]

    def doc(self) -> Dict[str, object]:
        return {
            "label": self.label,
            "K": self.k,
            "tuples": [
                {"s": t.s, "a": t.a, "r": t.r, "sn": t.sn}
                for t in self.tuples
            ],
        }

    def prompt_block(self) -> str:
        body = json.dumps(self.doc(), sort_keys=True, separators=(",", ":"))
        return f"```json\n{body}\n```"


def _derive_seed(seed: int, label_idx: int, run_idx: int) -> int:
    ss = np.random.SeedSequence(
        seed, spawn_key=(_DEMO_SEED_SPACE, label_idx, run_idx)
    )
    return int(ss.generate_state(1)[0])


def _mac_demo_spec(label: str, seed: int, frames: int) -> ScenarioSpec:
    switch = frames // 2
    agent = NodeConfig(kind=KIND_AGENT)
    if label == "CSMA":
        others = [NodeConfig(kind=KIND_CSMA, window=2, max_stage=4)]
    elif label == "TDMA":
        others = [NodeConfig(kind=KIND_TDMA, slots=(3, 5))]
    elif label == "ALOHA":
        others = [NodeConfig(kind=KIND_ALOHA, q=0.2)]
    elif label == "DYNAMIC":
        others = [
            NodeConfig(kind=KIND_ALOHA, q=0.2, leave_frame=switch),
            NodeConfig(kind=KIND_TDMA, slots=(3, 5), join_frame=switch),
        ]
    else:
        raise ValueError(f"unknown mac demo label {label!r}")
    return ScenarioSpec(nodes=[agent] + others, total_frames=frames,
                        seed=seed)


def _tcp_demo_spec(label: str, seed: int, rounds: int) -> TcpScenarioSpec:
    switch = rounds // 2
    agent = TcpFlowConfig(controller=CONTROLLER_AGENT)
    if label == "RENO":
        others = [TcpFlowConfig(controller=CONTROLLER_RENO)]
    elif label == "VEGAS":
        others = [TcpFlowConfig(controller=CONTROLLER_VEGAS)]
    elif label == "TCP-DYNAMIC":
        others = [
            TcpFlowConfig(controller=CONTROLLER_RENO, leave_round=switch),
            TcpFlowConfig(controller=CONTROLLER_VEGAS, join_round=switch),
        ]
    else:
        raise ValueError(f"unknown tcp demo label {label!r}")
    return TcpScenarioSpec(flows=[agent] + others, total_rounds=rounds,
                           seed=seed)


def _run_mac_demo(spec: ScenarioSpec, action: List[float]) -> TrajectoryLog:
    env = MacEnvironment(spec)
    policy = BernoulliSlotPolicy(spec.seed, {DEMO_AGENT_ID: action})
    run_frames(env, policy, spec.total_frames)
    return env.log


def _mac_summary(log: TrajectoryLog) -> Dict[str, object]:
    frames = log.records[-1].frame_index + 1
    util = slot_utilization(log, last_frames=frames)
    outcome_counts = {o: 0 for o in SlotOutcome}
    for rec in log.records:
        outcome_counts[rec.outcome] += 1
    total = len(log.records)
    return {
        "live_n": len(log.records[-1].live_ids),
        "slot_utilization": [round(u, 6) for u in util],
        "success_rate": round(outcome_counts[SlotOutcome.SUCCESS] / total, 6),
        "collision_rate": round(outcome_counts[SlotOutcome.COLLIDED] / total, 6),
        "idle_rate": round(outcome_counts[SlotOutcome.IDLE] / total, 6),
    }


def _mac_reward(log: TrajectoryLog, alpha: float) -> float:
    values = list(node_mean_throughputs(log).values())
    return round(fair_objective(values, alpha), 6)


def _mac_demo_set(label: str, label_idx: int, k: int, seed: int,
                  config: AgentConfig) -> DemoSet:
    frames = config.demo_frames
    action_rng = purpose_rng(seed, _DEMO_ACTION_STREAM, label_idx)
    probe_spec = _mac_demo_spec(label, _derive_seed(seed, label_idx, 0),
                                frames)
    probe_log = _run_mac_demo(probe_spec, [0.0] * DEFAULT_FRAME_LEN)
    state = _mac_summary(probe_log)
    tuples = []
    for i in range(k):
        action = [round(float(x), 6)
                  for x in action_rng.random(DEFAULT_FRAME_LEN)]
        spec = _mac_demo_spec(label, _derive_seed(seed, label_idx, i + 1),
                              frames)
        log = _run_mac_demo(spec, action)
        tuples.append(DemoTuple(
            s=state, a=action, r=_mac_reward(log, config.alpha),
            sn=_mac_summary(log),
        ))
    return DemoSet(label=label, k=k, tuples=tuples)


def _run_tcp_demo(spec: TcpScenarioSpec, cwnd: int) -> List[TcpRoundRecord]:
    env = TcpEnvironment(spec)

    def controller(e: TcpEnvironment) -> Dict[int, int]:
        return {fid: cwnd for fid in e.agent_ids()}

    run_rounds(env, controller)
    return env.records


def _tcp_summary(records: List[TcpRoundRecord],
                 flow_id: int) -> Dict[str, object]:
    acks = []
    rtts = []
    tputs = []
    flow_rounds = 0
    flow_loss_rounds = 0
    for rec in records:
        if not rec.per_flow:
            continue
        total_acks = sum(fr.acks for fr in rec.per_flow.values())
        rtt = next(iter(rec.per_flow.values())).rtt
        acks.append(total_acks)
        rtts.append(rtt)
        tputs.append(total_acks / rtt)
        own = rec.per_flow.get(flow_id)
        if own is not None:
            flow_rounds += 1
            if own.loss:
                flow_loss_rounds += 1
    return {
        "mean_acks": round(sum(acks) / len(acks), 6),
        "mean_rtt": round(sum(rtts) / len(rtts), 6),
        "min_rtt": round(min(rtts), 6),
        "max_rtt": round(max(rtts), 6),
        "mean_tput": round(sum(tputs) / len(tputs), 6),
        "loss_rate": round(flow_loss_rounds / max(1, flow_rounds), 6),
        "live_n": len(records[-1].live_ids),
    }


def _tcp_demo_set(label: str, label_idx: int, k: int, seed: int,
                  config: AgentConfig) -> DemoSet:
    rounds = config.demo_rounds
    action_rng = purpose_rng(seed, _DEMO_ACTION_STREAM,
                             len(MAC_LABELS) + label_idx)
    probe_spec = _tcp_demo_spec(label, _derive_seed(seed, label_idx, 0),
                                rounds)
    probe = _run_tcp_demo(probe_spec, 1)
    state = _tcp_summary(probe, DEMO_AGENT_ID)
    tuples = []
    for i in range(k):
        action = int(action_rng.integers(1, DEFAULT_CWND_MAX + 1))
        spec = _tcp_demo_spec(label, _derive_seed(seed, label_idx, i + 1),
                              rounds)
        records = _run_tcp_demo(spec, action)
        reward = mean_social_reward(records, first_round=rounds // 2)
        tuples.append(DemoTuple(
            s=state, a=action, r=round(reward, 6),
            sn=_tcp_summary(records, DEMO_AGENT_ID),
        ))
    return DemoSet(label=label, k=k, tuples=tuples)


def generate_demos(family: str, k: int, seed: int,
                   config: AgentConfig | None = None) -> List[DemoSet]:
    """Build every labeled demonstration set for one family."""
    if k < 1:
        raise ValueError("k must be >= 1")
    config = config or AgentConfig()
    if family == FAMILY_MAC:
        return [_mac_demo_set(label, i, k, seed, config)
                for i, label in enumerate(MAC_LABELS)]
    if family == FAMILY_TCP:
        return [_tcp_demo_set(label, i, k, seed, config)
                for i, label in enumerate(TCP_LABELS)]
    raise ValueError(f"unknown demo family {family!r}")


def demos_to_json(family: str, k: int, seed: int,
                  sets: List[DemoSet]) -> str:
    doc = {
        "version": "demos-v1",
        "family": family,
        "K": k,
        "seed": seed,
        "sets": [ds.doc() for ds in sets],
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


@dataclass
class DemoBundle:
    family: str
    k: int
    seed: int
    sets: List[DemoSet]


def demo_bundle(family: str, k: int, seed: int,
                config: AgentConfig | None = None) -> DemoBundle:
    return DemoBundle(family=family, k=k, seed=seed,
                      sets=generate_demos(family, k, seed, config))


def demos_from_json(text: str) -> DemoBundle:
    doc = json.loads(text)
    if not isinstance(doc, dict) or doc.get("version") != "demos-v1":
        raise ValueError("not a demos-v1 document")
    sets = []
    for raw in doc["sets"]:
        tuples = [DemoTuple(s=t["s"], a=t["a"], r=t["r"], sn=t["sn"])
                  for t in raw["tuples"]]
        sets.append(DemoSet(label=raw["label"], k=raw["K"], tuples=tuples))
    return DemoBundle(family=doc["family"], k=doc["K"], seed=doc["seed"],
                      sets=sets)
