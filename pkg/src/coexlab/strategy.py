"""Structured strategy language for agent nodes and flows.

A strategy is a JSON document (version ``strategy-v1``) holding a base
action, an ordered list of trigger/effect rules, and an exploration
schedule. Strategies are the only executable thing a completion backend
may produce: instead of running generated code, the runtime parses,
validates and interprets this restricted language.

Interpretation order is fixed: base action, then rules in order (later
rules overwrite earlier ones slot-wise), then the optional epsilon
uniform resample, then Gaussian perturbation, then clipping to the valid
range. Canonical serialization is byte-stable and is what the strategy
id hashes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import StrategyParseError

STRATEGY_VERSION = "strategy-v1"

DOMAIN_MAC = "mac"
DOMAIN_TCP = "tcp"
DOMAINS = (DOMAIN_MAC, DOMAIN_TCP)

PROVENANCES = ("generated", "refined", "escape")

SIGNAL_UTILIZATION_GE = "slot_utilization_ge"
SIGNAL_UTILIZATION_ZERO = "slot_utilization_zero"
SIGNAL_ENV_CHANGE = "env_change"
SIGNAL_COLLISION_RATE_GE = "collision_rate_ge"
SIGNAL_RTT_INFLATION_GE = "rtt_inflation_ge"

# signal name -> (required params, optional params)
_SIGNALS: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    SIGNAL_UTILIZATION_GE: (("theta",), ("slots",)),
    SIGNAL_UTILIZATION_ZERO: ((), ("slots",)),
    SIGNAL_ENV_CHANGE: ((), ()),
    SIGNAL_COLLISION_RATE_GE: (("threshold",), ()),
    SIGNAL_RTT_INFLATION_GE: (("threshold",), ()),
}

EFFECT_SET_SLOT_PROB = "set_slot_prob"
EFFECT_SCALE_ALL = "scale_all"
EFFECT_AVOID_SLOTS = "avoid_slots"
EFFECT_ADJUST_CWND = "adjust_cwnd"
EFFECT_RESET_EXPLORATION = "reset_exploration"

_EFFECTS: Dict[str, Tuple[str, ...]] = {
    EFFECT_SET_SLOT_PROB: ("slot", "prob"),
    EFFECT_SCALE_ALL: ("factor",),
    EFFECT_AVOID_SLOTS: ("slots",),
    EFFECT_ADJUST_CWND: ("delta",),
    EFFECT_RESET_EXPLORATION: (),
}

_MAC_ONLY_EFFECTS = (EFFECT_SET_SLOT_PROB, EFFECT_AVOID_SLOTS)
_TCP_ONLY_EFFECTS = (EFFECT_ADJUST_CWND,)
_MAC_ONLY_SIGNALS = (SIGNAL_UTILIZATION_GE, SIGNAL_UTILIZATION_ZERO)


@dataclass(frozen=True)
class Diagnostic:
    path: str
    message: str

    def __str__(self) -> str:
        return f"{self.path}: {self.message}"


@dataclass(frozen=True)
class Trigger:
    signal: str
    theta: Optional[float] = None
    threshold: Optional[float] = None
    slots: Optional[Tuple[int, ...]] = None


@dataclass(frozen=True)
class Effect:
    kind: str
    slot: Optional[int] = None
    prob: Optional[float] = None
    factor: Optional[float] = None
    slots: Optional[Tuple[int, ...]] = None
    delta: Optional[float] = None


@dataclass(frozen=True)
class Rule:
    trigger: Trigger
    effect: Effect


@dataclass(frozen=True)
class ExploreSpec:
    epsilon: float = 0.0
    sigma: float = 0.0


MacAction = Tuple[float, ...]
BaseAction = Union[MacAction, int]


@dataclass(frozen=True)
class Strategy:
    domain: str
    base_action: BaseAction
    rules: Tuple[Rule, ...] = ()
    explore: ExploreSpec = ExploreSpec()
    provenance: str = "generated"

    @property
    def id(self) -> str:
        return strategy_id(self)


def _trigger_doc(t: Trigger) -> Dict[str, object]:
    doc: Dict[str, object] = {"signal": t.signal}
    if t.theta is not None:
        doc["theta"] = t.theta
    if t.threshold is not None:
        doc["threshold"] = t.threshold
    if t.slots is not None:
        doc["slots"] = list(t.slots)
    return doc


def _effect_doc(e: Effect) -> Dict[str, object]:
    doc: Dict[str, object] = {"kind": e.kind}
    if e.slot is not None:
        doc["slot"] = e.slot
    if e.prob is not None:
        doc["prob"] = e.prob
    if e.factor is not None:
        doc["factor"] = e.factor
    if e.slots is not None:
        doc["slots"] = list(e.slots)
    if e.delta is not None:
        doc["delta"] = e.delta
    return doc


def strategy_doc(s: Strategy) -> Dict[str, object]:
    base = list(s.base_action) if s.domain == DOMAIN_MAC else s.base_action
    return {
        "version": STRATEGY_VERSION,
        "domain": s.domain,
        "base_action": base,
        "rules": [
            {"trigger": _trigger_doc(r.trigger), "effect": _effect_doc(r.effect)}
            for r in s.rules
        ],
        "explore": {"epsilon": s.explore.epsilon, "sigma": s.explore.sigma},
        "provenance": s.provenance,
    }


def serialize_strategy(s: Strategy) -> str:
    """Canonical text: compact JSON with sorted keys. Rule order is
    preserved (it is semantically significant), so two strategies that
    differ only in rule order serialize differently."""
    return json.dumps(strategy_doc(s), sort_keys=True, separators=(",", ":"))


def strategy_id(s: Strategy) -> str:
    digest = hashlib.sha256(serialize_strategy(s).encode("utf-8"))
    return digest.hexdigest()[:16]


def _number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _parse_trigger(raw, path: str, diags: List[Diagnostic]) -> Optional[Trigger]:
    if not isinstance(raw, dict):
        diags.append(Diagnostic(path, "trigger must be an object"))
        return None
    signal = raw.get("signal")
    if signal not in _SIGNALS:
        diags.append(Diagnostic(
            f"{path}.signal", f"unknown trigger signal {signal!r}"
        ))
        return None
    required, optional = _SIGNALS[signal]
    allowed = {"signal", *required, *optional}
    for key in raw:
        if key not in allowed:
            diags.append(Diagnostic(
                f"{path}.{key}", f"unknown field for signal {signal!r}"
            ))
    for key in required:
        if key not in raw:
            diags.append(Diagnostic(
                f"{path}.{key}", f"signal {signal!r} requires {key!r}"
            ))
            return None
    slots = None
    if "slots" in raw:
        if not isinstance(raw["slots"], list) or \
                not all(isinstance(x, int) and not isinstance(x, bool)
                        for x in raw["slots"]):
            diags.append(Diagnostic(f"{path}.slots", "must be a list of ints"))
            return None
        slots = tuple(raw["slots"])
    for key in ("theta", "threshold"):
        if key in raw and not _number(raw[key]):
            diags.append(Diagnostic(f"{path}.{key}", "must be a number"))
            return None
    return Trigger(signal=signal, theta=raw.get("theta"),
                   threshold=raw.get("threshold"), slots=slots)


def _parse_effect(raw, path: str, diags: List[Diagnostic]) -> Optional[Effect]:
    if not isinstance(raw, dict):
        diags.append(Diagnostic(path, "effect must be an object"))
        return None
    kind = raw.get("kind")
    if kind not in _EFFECTS:
        diags.append(Diagnostic(f"{path}.kind", f"unknown effect kind {kind!r}"))
        return None
    allowed = {"kind", *_EFFECTS[kind]}
    for key in raw:
        if key not in allowed:
            diags.append(Diagnostic(
                f"{path}.{key}", f"unknown field for effect {kind!r}"
            ))
    for key in _EFFECTS[kind]:
        if key not in raw:
            diags.append(Diagnostic(
                f"{path}.{key}", f"effect {kind!r} requires {key!r}"
            ))
            return None
    slots = None
    if "slots" in raw:
        if not isinstance(raw["slots"], list) or \
                not all(isinstance(x, int) and not isinstance(x, bool)
                        for x in raw["slots"]):
            diags.append(Diagnostic(f"{path}.slots", "must be a list of ints"))
            return None
        slots = tuple(raw["slots"])
    if "slot" in raw and (not isinstance(raw["slot"], int)
                          or isinstance(raw["slot"], bool)):
        diags.append(Diagnostic(f"{path}.slot", "must be an int"))
        return None
    for key in ("prob", "factor", "delta"):
        if key in raw and not _number(raw[key]):
            diags.append(Diagnostic(f"{path}.{key}", "must be a number"))
            return None
    return Effect(kind=kind, slot=raw.get("slot"), prob=raw.get("prob"),
                  factor=raw.get("factor"), slots=slots,
                  delta=raw.get("delta"))


def parse_strategy(text: str) -> Strategy:
    """Parse strategy text. Raises StrategyParseError carrying every
    diagnostic found (JSON syntax location, unknown names, missing or
    ill-typed fields)."""
    diags: List[Diagnostic] = []
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise StrategyParseError([Diagnostic(
            "$", f"line {exc.lineno} column {exc.colno}: {exc.msg}"
        )]) from exc
    if not isinstance(doc, dict):
        raise StrategyParseError([Diagnostic("$", "strategy must be a JSON object")])

    known = {"version", "domain", "base_action", "rules", "explore",
             "provenance"}
    for key in doc:
        if key not in known:
            diags.append(Diagnostic(key, "unknown field"))
    if doc.get("version") != STRATEGY_VERSION:
        diags.append(Diagnostic(
            "version", f"expected {STRATEGY_VERSION!r}, got {doc.get('version')!r}"
        ))
    domain = doc.get("domain")
    if domain not in DOMAINS:
        diags.append(Diagnostic("domain", f"unknown domain {domain!r}"))
        raise StrategyParseError(diags)

    base_raw = doc.get("base_action")
    base: Optional[BaseAction] = None
    if domain == DOMAIN_MAC:
        if not isinstance(base_raw, list) or not all(_number(x) for x in base_raw):
            diags.append(Diagnostic("base_action",
                                    "mac base_action must be a list of numbers"))
        else:
            base = tuple(float(x) for x in base_raw)
    else:
        if not isinstance(base_raw, int) or isinstance(base_raw, bool):
            diags.append(Diagnostic("base_action",
                                    "tcp base_action must be an integer cwnd"))
        else:
            base = base_raw

    rules: List[Rule] = []
    raw_rules = doc.get("rules", [])
    if not isinstance(raw_rules, list):
        diags.append(Diagnostic("rules", "must be a list"))
    else:
        for i, raw_rule in enumerate(raw_rules):
            path = f"rules[{i}]"
            if not isinstance(raw_rule, dict):
                diags.append(Diagnostic(path, "rule must be an object"))
                continue
            for key in raw_rule:
                if key not in ("trigger", "effect"):
                    diags.append(Diagnostic(f"{path}.{key}", "unknown field"))
            trigger = _parse_trigger(raw_rule.get("trigger"),
                                     f"{path}.trigger", diags)
            effect = _parse_effect(raw_rule.get("effect"),
                                   f"{path}.effect", diags)
            if trigger is not None and effect is not None:
                rules.append(Rule(trigger=trigger, effect=effect))

    explore = ExploreSpec()
    raw_explore = doc.get("explore", {})
    if not isinstance(raw_explore, dict):
        diags.append(Diagnostic("explore", "must be an object"))
    else:
        for key in raw_explore:
            if key not in ("epsilon", "sigma"):
                diags.append(Diagnostic(f"explore.{key}", "unknown field"))
        eps = raw_explore.get("epsilon", 0.0)
        sig = raw_explore.get("sigma", 0.0)
        if not _number(eps) or not _number(sig):
            diags.append(Diagnostic("explore", "epsilon and sigma must be numbers"))
        else:
            explore = ExploreSpec(epsilon=float(eps), sigma=float(sig))

    provenance = doc.get("provenance", "generated")
    if provenance not in PROVENANCES:
        diags.append(Diagnostic(
            "provenance", f"must be one of {PROVENANCES}, got {provenance!r}"
        ))

    if diags or base is None:
        raise StrategyParseError(diags or
                                 [Diagnostic("base_action", "missing")])
    return Strategy(domain=domain, base_action=base, rules=tuple(rules),
                    explore=explore, provenance=provenance)


def validate_strategy(s: Strategy, frame_len: Optional[int] = None,
                      cwnd_max: Optional[int] = None) -> List[Diagnostic]:
    """Range and cross-reference checks. Returns diagnostics, empty when
    the strategy is sound; never raises."""
    diags: List[Diagnostic] = []
    if s.domain == DOMAIN_MAC:
        probs = s.base_action
        if frame_len is not None and len(probs) != frame_len:
            diags.append(Diagnostic(
                "base_action",
                f"length {len(probs)} does not match frame_len {frame_len}"
            ))
        limit = len(probs) if frame_len is None else frame_len
        for k, p in enumerate(probs):
            if not 0.0 <= p <= 1.0 or math.isnan(p):
                diags.append(Diagnostic(
                    f"base_action[{k}]", f"probability {p} outside [0, 1]"
                ))
    else:
        limit = frame_len or 0
        cwnd = s.base_action
        if cwnd < 1:
            diags.append(Diagnostic("base_action", f"cwnd {cwnd} must be >= 1"))
        if cwnd_max is not None and cwnd > cwnd_max:
            diags.append(Diagnostic(
                "base_action", f"cwnd {cwnd} above maximum {cwnd_max}"
            ))

    def check_slots(slots: Sequence[int], path: str) -> None:
        for slot in slots:
            if slot < 0 or (limit and slot >= limit):
                diags.append(Diagnostic(
                    path, f"slot {slot} outside [0, {limit})"
                ))

    for i, rule in enumerate(s.rules):
        tpath = f"rules[{i}].trigger"
        epath = f"rules[{i}].effect"
        trig, eff = rule.trigger, rule.effect
        if s.domain == DOMAIN_TCP and trig.signal in _MAC_ONLY_SIGNALS:
            diags.append(Diagnostic(
                tpath, f"signal {trig.signal!r} not valid for tcp strategies"
            ))
        if trig.theta is not None and not 0.0 <= trig.theta <= 1.0:
            diags.append(Diagnostic(f"{tpath}.theta",
                                    f"{trig.theta} outside [0, 1]"))
        if trig.threshold is not None and trig.threshold < 0.0:
            diags.append(Diagnostic(f"{tpath}.threshold",
                                    f"{trig.threshold} must be >= 0"))
        if trig.slots is not None:
            check_slots(trig.slots, f"{tpath}.slots")

        if s.domain == DOMAIN_MAC and eff.kind in _TCP_ONLY_EFFECTS:
            diags.append(Diagnostic(
                epath, f"effect {eff.kind!r} not valid for mac strategies"
            ))
        if s.domain == DOMAIN_TCP and eff.kind in _MAC_ONLY_EFFECTS:
            diags.append(Diagnostic(
                epath, f"effect {eff.kind!r} not valid for tcp strategies"
            ))
        if eff.slot is not None:
            check_slots([eff.slot], f"{epath}.slot")
        if eff.slots is not None:
            check_slots(eff.slots, f"{epath}.slots")
        if eff.prob is not None and not 0.0 <= eff.prob <= 1.0:
            diags.append(Diagnostic(f"{epath}.prob",
                                    f"{eff.prob} outside [0, 1]"))
        if eff.factor is not None and eff.factor < 0.0:
            diags.append(Diagnostic(f"{epath}.factor",
                                    f"{eff.factor} must be >= 0"))

    if not 0.0 <= s.explore.epsilon <= 1.0:
        diags.append(Diagnostic("explore.epsilon",
                                f"{s.explore.epsilon} outside [0, 1]"))
    if s.explore.sigma < 0.0:
        diags.append(Diagnostic("explore.sigma",
                                f"{s.explore.sigma} must be >= 0"))
    return diags


@dataclass
class ActionContext:
    """Observed signals plus randomness for one interpretation."""

    rng: np.random.Generator
    slot_utilization: Optional[Sequence[float]] = None
    env_changed: bool = False
    collision_rate: float = 0.0
    rtt_inflation: float = 0.0
    frame_len: int = 10
    cwnd_max: int = 64
    # when set, replaces the strategy's base action for this decision
    base_override: Optional[BaseAction] = None
    # when set, exploration noise uses at least this sigma (escape mode)
    escape_sigma: Optional[float] = None


@dataclass(frozen=True)
class InterpretedAction:
    action: BaseAction
    fired_rules: Tuple[int, ...] = ()
    epsilon_resampled: bool = False
    sigma_used: float = 0.0
    exploration_reset: bool = False


def _trigger_fires(trig: Trigger, ctx: ActionContext) -> bool:
    if trig.signal == SIGNAL_ENV_CHANGE:
        return ctx.env_changed
    if trig.signal == SIGNAL_COLLISION_RATE_GE:
        return ctx.collision_rate >= trig.threshold
    if trig.signal == SIGNAL_RTT_INFLATION_GE:
        return ctx.rtt_inflation >= trig.threshold
    util = ctx.slot_utilization
    if util is None:
        return False
    slots = trig.slots if trig.slots is not None else range(len(util))
    values = [util[k] for k in slots if 0 <= k < len(util)]
    if not values:
        return False
    if trig.signal == SIGNAL_UTILIZATION_GE:
        return any(v >= trig.theta for v in values)
    return any(v == 0.0 for v in values)


def interpret_action(s: Strategy, ctx: ActionContext) -> InterpretedAction:
    """Resolve the concrete action for one decision point.

    Randomness is consumed in a fixed order (one uniform draw when
    epsilon > 0, then the Gaussian perturbation when sigma > 0), so the
    result is a pure function of strategy, context and rng state.
    """
    base = ctx.base_override if ctx.base_override is not None else s.base_action
    fired: List[int] = []
    exploration_reset = False

    if s.domain == DOMAIN_MAC:
        vec = [float(p) for p in base]
    else:
        cwnd = float(base)

    for i, rule in enumerate(s.rules):
        if not _trigger_fires(rule.trigger, ctx):
            continue
        fired.append(i)
        eff = rule.effect
        if eff.kind == EFFECT_RESET_EXPLORATION:
            exploration_reset = True
        elif s.domain == DOMAIN_MAC:
            if eff.kind == EFFECT_SET_SLOT_PROB:
                if 0 <= eff.slot < len(vec):
                    vec[eff.slot] = eff.prob
            elif eff.kind == EFFECT_SCALE_ALL:
                vec = [p * eff.factor for p in vec]
            elif eff.kind == EFFECT_AVOID_SLOTS:
                for k in eff.slots:
                    if 0 <= k < len(vec):
                        vec[k] = 0.0
        else:
            if eff.kind == EFFECT_ADJUST_CWND:
                cwnd += eff.delta
            elif eff.kind == EFFECT_SCALE_ALL:
                cwnd *= eff.factor

    epsilon = s.explore.epsilon
    sigma = s.explore.sigma
    if ctx.escape_sigma is not None:
        sigma = max(sigma, ctx.escape_sigma)
    if exploration_reset:
        epsilon = 0.0
        sigma = 0.0

    epsilon_resampled = False
    action: BaseAction
    if s.domain == DOMAIN_MAC:
        if epsilon > 0.0 and float(ctx.rng.random()) < epsilon:
            vec = [float(u) for u in ctx.rng.random(len(vec))]
            epsilon_resampled = True
        if sigma > 0.0:
            noise = ctx.rng.normal(0.0, sigma, size=len(vec))
            vec = [p + float(n) for p, n in zip(vec, noise)]
        action = tuple(min(1.0, max(0.0, p)) for p in vec)
    else:
        if epsilon > 0.0 and float(ctx.rng.random()) < epsilon:
            cwnd = float(ctx.rng.integers(1, ctx.cwnd_max + 1))
            epsilon_resampled = True
        if sigma > 0.0:
            cwnd += float(ctx.rng.normal(0.0, sigma))
        action = int(min(ctx.cwnd_max, max(1, round(cwnd))))
    return InterpretedAction(
        action=action,
        fired_rules=tuple(fired),
        epsilon_resampled=epsilon_resampled,
        sigma_used=sigma,
        exploration_reset=exploration_reset,
    )


def strategy_from_doc(doc: Dict[str, object]) -> Strategy:
    """Build a strategy from an already-decoded JSON object."""
    return parse_strategy(json.dumps(doc))


def pretty_strategy(s: Strategy) -> str:
    return json.dumps(strategy_doc(s), indent=2, sort_keys=True) + "\n"
