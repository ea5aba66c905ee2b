"""Slotted-time simulator for heterogeneous multiple-access networks.

Time is divided into frames of ``frame_len`` slots (default 10 slots of
1 ms). All nodes share one channel. In each slot every live node either
transmits or stays silent; exactly one transmitter is a success, two or
more collide, none is an idle slot.

Protocol nodes run fixed state machines:

* ``aloha``     transmits each slot with probability q.
* ``tdma``      transmits in its owned frame positions, every frame.
* ``csma``      counts down a backoff w only in slots it senses idle,
                transmits when w reaches zero, and rescales its window
                exponentially with the collision stage.
* ``fw_aloha``  waits a uniformly drawn w in [0, W-1] between transmissions.
* ``eb_aloha``  like fw_aloha but the window doubles per collision stage.

``agent`` and ``aware`` nodes have no internal policy; the caller supplies
their transmit decisions slot by slot.

Determinism: every node draws from its own PRNG stream derived from the
scenario seed and the node id, so adding or removing one node never
perturbs the randomness of the others.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidScenarioError, MissingDecisionError

DEFAULT_FRAME_LEN = 10
DEFAULT_SLOT_MS = 1.0

KIND_ALOHA = "aloha"
KIND_TDMA = "tdma"
KIND_CSMA = "csma"
KIND_FW_ALOHA = "fw_aloha"
KIND_EB_ALOHA = "eb_aloha"
KIND_AGENT = "agent"
KIND_AWARE = "aware"

PROTOCOL_KINDS = (KIND_ALOHA, KIND_TDMA, KIND_CSMA, KIND_FW_ALOHA, KIND_EB_ALOHA)
CONTROLLED_KINDS = (KIND_AGENT, KIND_AWARE)
ALL_KINDS = PROTOCOL_KINDS + CONTROLLED_KINDS


class SlotOutcome(enum.Enum):
    SUCCESS = "S"
    COLLIDED = "C"
    IDLE = "I"


@dataclass
class NodeConfig:
    """Static description of one node.

    Only the fields relevant to ``kind`` may be set; the rest stay None.
    ``join_frame``/``leave_frame`` bound the frames in which the node is
    live (join inclusive, leave exclusive).
    """

    kind: str
    q: Optional[float] = None
    slots: Optional[Tuple[int, ...]] = None
    window: Optional[int] = None
    max_stage: Optional[int] = None
    join_frame: int = 0
    leave_frame: Optional[int] = None


@dataclass
class ScenarioSpec:
    nodes: List[NodeConfig]
    total_frames: int
    seed: int
    frame_len: int = DEFAULT_FRAME_LEN
    slot_duration_ms: float = DEFAULT_SLOT_MS


@dataclass
class AgentDecision:
    transmit: bool
    prob: float = 0.0


@dataclass
class SlotRecord:
    """What happened in one slot, as stored in the trajectory log."""

    slot_index: int
    frame_index: int
    frame_position: int
    outcome: SlotOutcome
    transmitters: Tuple[int, ...]
    live_ids: Tuple[int, ...]
    reward_vector: Tuple[int, ...]
    agent_probs: Dict[int, float] = field(default_factory=dict)


@dataclass
class TrajectoryLog:
    frame_len: int
    records: List[SlotRecord] = field(default_factory=list)
    # (start_frame, live node ids) for every population segment, in order.
    segments: List[Tuple[int, Tuple[int, ...]]] = field(default_factory=list)

    def live_ids_at(self, frame: int) -> Tuple[int, ...]:
        current: Tuple[int, ...] = ()
        for start, ids in self.segments:
            if start > frame:
                break
            current = ids
        return current


def _validate_prob(value, path: str) -> float:
    if not isinstance(value, (int, float)) or isinstance(value, bool):
        raise InvalidScenarioError(path, "must be a number")
    if not 0.0 <= float(value) <= 1.0:
        raise InvalidScenarioError(path, f"must be in [0, 1], got {value}")
    return float(value)


def validate_node(cfg: NodeConfig, index: int, frame_len: int) -> None:
    path = f"nodes[{index}]"
    if cfg.kind not in ALL_KINDS:
        raise InvalidScenarioError(f"{path}.kind", f"unknown kind {cfg.kind!r}")
    if cfg.kind == KIND_ALOHA:
        if cfg.q is None:
            raise InvalidScenarioError(f"{path}.q", "aloha requires q")
        _validate_prob(cfg.q, f"{path}.q")
    if cfg.kind == KIND_TDMA:
        if not cfg.slots:
            raise InvalidScenarioError(f"{path}.slots", "tdma requires owned slots")
        for s in cfg.slots:
            if not isinstance(s, int) or not 0 <= s < frame_len:
                raise InvalidScenarioError(
                    f"{path}.slots", f"slot {s} outside [0, {frame_len})"
                )
        if len(set(cfg.slots)) != len(cfg.slots):
            raise InvalidScenarioError(f"{path}.slots", "duplicate slot entries")
    if cfg.kind in (KIND_CSMA, KIND_FW_ALOHA, KIND_EB_ALOHA):
        if cfg.window is None or cfg.window < 1:
            raise InvalidScenarioError(
                f"{path}.window", "backoff kinds require window >= 1"
            )
    if cfg.kind in (KIND_CSMA, KIND_EB_ALOHA):
        if cfg.max_stage is None or cfg.max_stage < 0:
            raise InvalidScenarioError(
                f"{path}.max_stage", "requires max_stage >= 0"
            )
    if cfg.join_frame < 0:
        raise InvalidScenarioError(f"{path}.join_frame", "must be >= 0")
    if cfg.leave_frame is not None and cfg.leave_frame <= cfg.join_frame:
        raise InvalidScenarioError(
            f"{path}.leave_frame", "must be greater than join_frame"
        )


def validate_scenario(spec: ScenarioSpec) -> None:
    if spec.frame_len < 1:
        raise InvalidScenarioError("frame_len", "must be >= 1")
    if spec.total_frames < 1:
        raise InvalidScenarioError("total_frames", "must be >= 1")
    if not spec.nodes:
        raise InvalidScenarioError("nodes", "at least one node required")
    for i, cfg in enumerate(spec.nodes):
        validate_node(cfg, i, spec.frame_len)


def node_rng(seed: int, node_id: int) -> np.random.Generator:
    """Dedicated stream for one node, stable under population changes."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(node_id,)))


def purpose_rng(seed: int, *key: int) -> np.random.Generator:
    """Stream for non-node purposes (agent exploration, demos, ...).

    Spawn keys >= 10000 so they can never collide with node streams.
    """
    return np.random.default_rng(
        np.random.SeedSequence(seed, spawn_key=tuple(10000 + k for k in key))
    )


class _NodeMachine:
    """Base state machine. Subclasses implement decide/on_outcome."""

    needs_carrier = False

    def __init__(self, cfg: NodeConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.rng = rng

    def decide(self, frame_position: int, carrier_busy: bool) -> bool:
        raise NotImplementedError

    def on_outcome(self, transmitted: bool, outcome: SlotOutcome) -> None:
        pass


class AlohaMachine(_NodeMachine):
    def decide(self, frame_position: int, carrier_busy: bool) -> bool:
        return float(self.rng.random()) < self.cfg.q


class TdmaMachine(_NodeMachine):
    def __init__(self, cfg: NodeConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        self.owned = frozenset(cfg.slots or ())

    def decide(self, frame_position: int, carrier_busy: bool) -> bool:
        return frame_position in self.owned


class FwAlohaMachine(_NodeMachine):
    """Waits a uniform w in [0, W-1] slots between transmissions."""

    def __init__(self, cfg: NodeConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        self.w = int(self.rng.integers(0, cfg.window))

    def decide(self, frame_position: int, carrier_busy: bool) -> bool:
        if self.w == 0:
            return True
        self.w -= 1
        return False

    def on_outcome(self, transmitted: bool, outcome: SlotOutcome) -> None:
        if transmitted:
            self.w = int(self.rng.integers(0, self.cfg.window))


class EbAlohaMachine(_NodeMachine):
    """Fixed-window ALOHA with binary exponential backoff on collisions."""

    def __init__(self, cfg: NodeConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        self.stage = 0
        self.w = int(self.rng.integers(0, self.current_window()))

    def current_window(self) -> int:
        capped = min(self.stage, self.cfg.max_stage)
        return self.cfg.window * (2 ** capped)

    def decide(self, frame_position: int, carrier_busy: bool) -> bool:
        if self.w == 0:
            return True
        self.w -= 1
        return False

    def on_outcome(self, transmitted: bool, outcome: SlotOutcome) -> None:
        if not transmitted:
            return
        if outcome is SlotOutcome.COLLIDED:
            self.stage = min(self.stage + 1, self.cfg.max_stage)
        elif outcome is SlotOutcome.SUCCESS:
            self.stage = 0
        self.w = int(self.rng.integers(0, self.current_window()))


class CsmaMachine(_NodeMachine):
    """Carrier-sensing backoff.

    The counter only moves in slots sensed idle; it is frozen while some
    other node has already committed to transmit. The node sends in the
    idle slot where the counter reaches zero.
    """

    needs_carrier = True

    def __init__(self, cfg: NodeConfig, rng: np.random.Generator):
        super().__init__(cfg, rng)
        self.stage = 0
        self.w = int(self.rng.integers(0, self.current_window()))

    def current_window(self) -> int:
        capped = min(self.stage, self.cfg.max_stage)
        return self.cfg.window * (2 ** capped)

    def decide(self, frame_position: int, carrier_busy: bool) -> bool:
        if carrier_busy:
            return False
        if self.w > 0:
            self.w -= 1
        return self.w == 0

    def on_outcome(self, transmitted: bool, outcome: SlotOutcome) -> None:
        if not transmitted:
            return
        if outcome is SlotOutcome.COLLIDED:
            self.stage = min(self.stage + 1, self.cfg.max_stage)
        elif outcome is SlotOutcome.SUCCESS:
            self.stage = 0
        self.w = int(self.rng.integers(0, self.current_window()))


_MACHINES = {
    KIND_ALOHA: AlohaMachine,
    KIND_TDMA: TdmaMachine,
    KIND_CSMA: CsmaMachine,
    KIND_FW_ALOHA: FwAlohaMachine,
    KIND_EB_ALOHA: EbAlohaMachine,
}


class MacEnvironment:
    """Live simulation state plus the accumulated trajectory log."""

    def __init__(self, spec: ScenarioSpec):
        validate_scenario(spec)
        self.spec = spec
        self.frame_len = spec.frame_len
        self.slot_index = 0
        self.machines: Dict[int, _NodeMachine] = {}
        self.live: List[int] = []
        self.log = TrajectoryLog(frame_len=spec.frame_len)
        self._rngs = {
            nid: node_rng(spec.seed, nid) for nid in range(len(spec.nodes))
        }
        self.apply_population_event(0)

    @property
    def frame_index(self) -> int:
        return self.slot_index // self.frame_len

    @property
    def frame_position(self) -> int:
        return self.slot_index % self.frame_len

    def controlled_ids(self) -> List[int]:
        return [
            nid for nid in self.live
            if self.spec.nodes[nid].kind in CONTROLLED_KINDS
        ]

    def agent_ids(self) -> List[int]:
        return [
            nid for nid in self.live if self.spec.nodes[nid].kind == KIND_AGENT
        ]

    def apply_population_event(self, frame_index: int) -> bool:
        """Recompute the live set at a frame boundary.

        Returns True when membership changed. A fresh state machine is
        built for every newly joined node; each machine keeps drawing from
        its own node stream, so the rest of the population is unaffected.
        """
        new_live = []
        for nid, cfg in enumerate(self.spec.nodes):
            live = cfg.join_frame <= frame_index and (
                cfg.leave_frame is None or frame_index < cfg.leave_frame
            )
            if live:
                new_live.append(nid)
                if nid not in self.machines and cfg.kind in _MACHINES:
                    self.machines[nid] = _MACHINES[cfg.kind](cfg, self._rngs[nid])
            elif nid in self.machines and cfg.leave_frame is not None \
                    and frame_index >= cfg.leave_frame:
                self.machines.pop(nid, None)
        changed = new_live != self.live
        if changed or not self.log.segments:
            self.live = new_live
            self.log.segments.append((frame_index, tuple(new_live)))
        return changed

    def step_slot(self, decisions: Dict[int, AgentDecision]) -> SlotRecord:
        """Advance one slot.

        ``decisions`` must cover every live agent/aware node. Protocol
        nodes are evaluated in node-id order with CSMA nodes last so that
        carrier sensing sees every commitment already made for this slot.
        """
        position = self.frame_position
        transmitters: List[int] = []
        agent_probs: Dict[int, float] = {}

        for nid in self.live:
            if self.spec.nodes[nid].kind in CONTROLLED_KINDS:
                if nid not in decisions:
                    raise MissingDecisionError(
                        f"no decision for controlled node {nid} "
                        f"at slot {self.slot_index}"
                    )
                if decisions[nid].transmit:
                    transmitters.append(nid)
                agent_probs[nid] = decisions[nid].prob

        deferred_csma: List[int] = []
        for nid in self.live:
            kind = self.spec.nodes[nid].kind
            if kind in CONTROLLED_KINDS:
                continue
            if kind == KIND_CSMA:
                deferred_csma.append(nid)
                continue
            if self.machines[nid].decide(position, False):
                transmitters.append(nid)

        for nid in deferred_csma:
            busy = bool(transmitters)
            if self.machines[nid].decide(position, busy):
                transmitters.append(nid)

        if len(transmitters) == 1:
            outcome = SlotOutcome.SUCCESS
        elif transmitters:
            outcome = SlotOutcome.COLLIDED
        else:
            outcome = SlotOutcome.IDLE

        for nid in transmitters:
            if nid in self.machines:
                self.machines[nid].on_outcome(True, outcome)

        reward = tuple(
            1 if (outcome is SlotOutcome.SUCCESS and nid in transmitters) else 0
            for nid in self.live
        )
        record = SlotRecord(
            slot_index=self.slot_index,
            frame_index=self.frame_index,
            frame_position=position,
            outcome=outcome,
            transmitters=tuple(sorted(transmitters)),
            live_ids=tuple(self.live),
            reward_vector=reward,
            agent_probs=agent_probs,
        )
        self.log.records.append(record)
        self.slot_index += 1
        return record


PolicyFn = Callable[["MacEnvironment"], Dict[int, AgentDecision]]


def build_scenario(spec: ScenarioSpec) -> MacEnvironment:
    return MacEnvironment(spec)


def run_frames(env: MacEnvironment, policy: Optional[PolicyFn],
               n_frames: int) -> TrajectoryLog:
    """Run ``n_frames`` full frames, applying population events at each
    frame boundary. ``policy`` is called once per slot and must return
    decisions for all live controlled nodes (may be None when there are
    none)."""
    for _ in range(n_frames):
        env.apply_population_event(env.frame_index)
        for _ in range(env.frame_len):
            decisions = policy(env) if policy is not None else {}
            env.step_slot(decisions)
    return env.log


class BernoulliSlotPolicy:
    """Transmit with the per-slot probability of a policy vector.

    One vector per controlled node id; draws come from a purpose stream
    so they never interfere with node streams. Used both for externally
    fixed reference policies and as the actuation layer of the agent.
    """

    def __init__(self, seed: int, vectors: Dict[int, Sequence[float]],
                 stream_key: int = 1):
        self.seed = seed
        self.stream_key = stream_key
        self.vectors: Dict[int, List[float]] = {}
        self._rngs: Dict[int, np.random.Generator] = {}
        for nid, v in vectors.items():
            self.set_vector(nid, v)

    def set_vector(self, nid: int, vector: Sequence[float]) -> None:
        self.vectors[nid] = list(vector)
        if nid not in self._rngs:
            self._rngs[nid] = purpose_rng(self.seed, self.stream_key, nid)

    def __call__(self, env: MacEnvironment) -> Dict[int, AgentDecision]:
        position = env.frame_position
        out = {}
        for nid in env.controlled_ids():
            p = float(self.vectors[nid][position])
            u = float(self._rngs[nid].random())
            out[nid] = AgentDecision(transmit=u < p, prob=p)
        return out


def scenario_to_json(spec: ScenarioSpec) -> str:
    nodes = []
    for cfg in spec.nodes:
        entry: Dict[str, object] = {"kind": cfg.kind}
        if cfg.q is not None:
            entry["q"] = cfg.q
        if cfg.slots is not None:
            entry["slots"] = list(cfg.slots)
        if cfg.window is not None:
            entry["window"] = cfg.window
        if cfg.max_stage is not None:
            entry["max_stage"] = cfg.max_stage
        if cfg.join_frame:
            entry["join_frame"] = cfg.join_frame
        if cfg.leave_frame is not None:
            entry["leave_frame"] = cfg.leave_frame
        nodes.append(entry)
    doc = {
        "version": "mac-v1",
        "frame_len": spec.frame_len,
        "total_frames": spec.total_frames,
        "slot_duration_ms": spec.slot_duration_ms,
        "seed": spec.seed,
        "nodes": nodes,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def scenario_from_json(text: str) -> ScenarioSpec:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidScenarioError("$", f"invalid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidScenarioError("$", "scenario must be a JSON object")
    if doc.get("version") != "mac-v1":
        raise InvalidScenarioError("version", f"expected mac-v1, got {doc.get('version')!r}")
    raw_nodes = doc.get("nodes")
    if not isinstance(raw_nodes, list):
        raise InvalidScenarioError("nodes", "must be a list")
    nodes = []
    for i, raw in enumerate(raw_nodes):
        if not isinstance(raw, dict):
            raise InvalidScenarioError(f"nodes[{i}]", "must be an object")
        known = {"kind", "q", "slots", "window", "max_stage", "join_frame",
                 "leave_frame"}
        for key in raw:
            if key not in known:
                raise InvalidScenarioError(f"nodes[{i}].{key}", "unknown field")
        nodes.append(NodeConfig(
            kind=raw.get("kind", ""),
            q=raw.get("q"),
            slots=tuple(raw["slots"]) if "slots" in raw else None,
            window=raw.get("window"),
            max_stage=raw.get("max_stage"),
            join_frame=raw.get("join_frame", 0),
            leave_frame=raw.get("leave_frame"),
        ))
    for key in ("total_frames", "seed"):
        if not isinstance(doc.get(key), int):
            raise InvalidScenarioError(key, "must be an integer")
    spec = ScenarioSpec(
        nodes=nodes,
        total_frames=doc["total_frames"],
        seed=doc["seed"],
        frame_len=doc.get("frame_len", DEFAULT_FRAME_LEN),
        slot_duration_ms=doc.get("slot_duration_ms", DEFAULT_SLOT_MS),
    )
    validate_scenario(spec)
    return spec
