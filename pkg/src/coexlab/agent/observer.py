"""Window analysis of recent trajectory: convergence, change detection
and notable slot usage.

The analysis feeds the per-period decision prompt. Slot utilization is
computed over transmissions from nodes *outside* the controlled team, so
a team member occupying a slot at probability one is never mistaken for
an external owner of that slot.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

from ..errors import WindowTooShortError
from ..mac import SlotOutcome, TrajectoryLog
from ..tcp import TcpRoundRecord

NOTABLE_OVERUSED = "overused"
NOTABLE_UNUSED = "unused"


@dataclass(frozen=True)
class NotableSlot:
    slot: int
    kind: str
    utilization: float


@dataclass(frozen=True)
class MacWindowSignals:
    window: Tuple[int, int]
    live_n: int
    # per frame position, fraction of window frames with a transmission
    # from outside the excluded team
    slot_utilization: Tuple[float, ...]
    collision_rate: float
    membership_changed: bool
    # largest change in any outcome rate between window halves
    rate_shift: float


@dataclass(frozen=True)
class TcpWindowSignals:
    window: Tuple[int, int]
    live_n: int
    loss_rate: float
    mean_rtt: float
    min_rtt: float
    rtt_inflation: float
    membership_changed: bool
    rate_shift: float


@dataclass(frozen=True)
class ObserverReport:
    converged: bool
    env_changed: bool
    notable: Tuple[NotableSlot, ...]
    window: Tuple[int, int]
    signals: object


def _linf(a, b) -> float:
    a_seq = isinstance(a, (list, tuple))
    b_seq = isinstance(b, (list, tuple))
    if a_seq != b_seq:
        return math.inf
    if not a_seq:
        return abs(float(a) - float(b))
    if len(a) != len(b):
        return math.inf
    return max((abs(float(x) - float(y)) for x, y in zip(a, b)),
               default=0.0)


def actions_converged(actions: Sequence[object], epsilon: float,
                      periods: int) -> bool:
    """True when the last ``periods`` consecutive action changes all stay
    below ``epsilon`` in L-infinity. Needs periods + 1 actions."""
    if len(actions) < periods + 1:
        return False
    recent = list(actions)[-(periods + 1):]
    return all(_linf(prev, cur) < epsilon
               for prev, cur in zip(recent, recent[1:]))


def mac_window_signals(log: TrajectoryLog, window_frames: int,
                       exclude_ids: Iterable[int] = ()) -> MacWindowSignals:
    if window_frames < 1:
        raise WindowTooShortError("window_frames must be >= 1")
    if not log.records:
        raise WindowTooShortError("empty trajectory log")
    last_frame = log.records[-1].frame_index
    first_frame = last_frame - window_frames + 1
    if first_frame < 0:
        raise WindowTooShortError(
            f"need {window_frames} frames, have {last_frame + 1}"
        )
    excluded = frozenset(exclude_ids)
    mid_frame = first_frame + window_frames // 2

    util_counts = [0] * log.frame_len
    half_counts = [
        {o: 0 for o in SlotOutcome},
        {o: 0 for o in SlotOutcome},
    ]
    half_totals = [0, 0]
    collided = 0
    memberships = set()
    for rec in reversed(log.records):
        if rec.frame_index < first_frame:
            break
        half = 0 if rec.frame_index < mid_frame else 1
        half_counts[half][rec.outcome] += 1
        half_totals[half] += 1
        if rec.outcome is SlotOutcome.COLLIDED:
            collided += 1
        memberships.add(rec.live_ids)
        if any(nid not in excluded for nid in rec.transmitters):
            util_counts[rec.frame_position] += 1

    total = half_totals[0] + half_totals[1]
    rate_shift = 0.0
    if half_totals[0] and half_totals[1]:
        for outcome in SlotOutcome:
            older = half_counts[0][outcome] / half_totals[0]
            recent = half_counts[1][outcome] / half_totals[1]
            rate_shift = max(rate_shift, abs(recent - older))
    return MacWindowSignals(
        window=(first_frame, last_frame),
        live_n=len(log.records[-1].live_ids),
        slot_utilization=tuple(c / window_frames for c in util_counts),
        collision_rate=collided / total,
        membership_changed=len(memberships) > 1,
        rate_shift=rate_shift,
    )


def observer_analyze(log: TrajectoryLog, *, window_frames: int,
                     exclude_ids: Iterable[int] = (),
                     overuse_threshold: float = 0.9,
                     rate_shift_delta: float = 0.1,
                     actions: Sequence[object] = (),
                     convergence_epsilon: float = 0.02,
                     convergence_periods: int = 3) -> ObserverReport:
    """Summarize the last ``window_frames`` frames of a trajectory."""
    signals = mac_window_signals(log, window_frames, exclude_ids)
    notable: List[NotableSlot] = []
    for slot, util in enumerate(signals.slot_utilization):
        if util >= overuse_threshold:
            notable.append(NotableSlot(slot, NOTABLE_OVERUSED, round(util, 6)))
        elif util == 0.0:
            notable.append(NotableSlot(slot, NOTABLE_UNUSED, 0.0))
    return ObserverReport(
        converged=actions_converged(actions, convergence_epsilon,
                                    convergence_periods),
        env_changed=signals.membership_changed
        or signals.rate_shift > rate_shift_delta,
        notable=tuple(notable),
        window=signals.window,
        signals=signals,
    )


def tcp_window_signals(records: Sequence[TcpRoundRecord],
                       window_rounds: int,
                       flow_id: int) -> TcpWindowSignals:
    if window_rounds < 1:
        raise WindowTooShortError("window_rounds must be >= 1")
    if len(records) < window_rounds:
        raise WindowTooShortError(
            f"need {window_rounds} rounds, have {len(records)}"
        )
    window = records[-window_rounds:]
    # the base rtt reference comes from the flow's whole history, so an
    # always-congested window still measures inflation against the true
    # uncongested round-trip time
    min_rtt = math.inf
    for rec in records:
        own = rec.per_flow.get(flow_id)
        if own is not None:
            min_rtt = min(min_rtt, own.rtt)
    if not math.isfinite(min_rtt):
        raise WindowTooShortError(f"flow {flow_id} absent from the log")

    rtts: List[float] = []
    half_loss = [[0, 0], [0, 0]]        # [losses, rounds] per half
    half_rtt = [[0.0, 0], [0.0, 0]]     # [rtt sum, rounds] per half
    losses = 0
    flow_rounds = 0
    memberships = set()
    mid = window_rounds // 2
    for i, rec in enumerate(window):
        memberships.add(rec.live_ids)
        own = rec.per_flow.get(flow_id)
        if own is None:
            continue
        half = 0 if i < mid else 1
        flow_rounds += 1
        rtts.append(own.rtt)
        half_rtt[half][0] += own.rtt
        half_rtt[half][1] += 1
        if own.loss:
            losses += 1
            half_loss[half][0] += 1
        half_loss[half][1] += 1
    if not flow_rounds:
        raise WindowTooShortError(f"flow {flow_id} absent from the window")

    mean_rtt = sum(rtts) / len(rtts)
    rate_shift = 0.0
    if half_loss[0][1] and half_loss[1][1]:
        loss_shift = abs(half_loss[1][0] / half_loss[1][1]
                         - half_loss[0][0] / half_loss[0][1])
        rtt_shift = abs(half_rtt[1][0] / half_rtt[1][1]
                        - half_rtt[0][0] / half_rtt[0][1]) / min_rtt
        rate_shift = max(loss_shift, rtt_shift)
    return TcpWindowSignals(
        window=(window[0].round_index, window[-1].round_index),
        live_n=len(records[-1].live_ids),
        loss_rate=losses / flow_rounds,
        mean_rtt=mean_rtt,
        min_rtt=min_rtt,
        rtt_inflation=(mean_rtt - min_rtt) / min_rtt,
        membership_changed=len(memberships) > 1,
        rate_shift=rate_shift,
    )


def tcp_observer_analyze(records: Sequence[TcpRoundRecord], *,
                         window_rounds: int, flow_id: int,
                         rate_shift_delta: float = 0.1,
                         actions: Sequence[object] = (),
                         convergence_epsilon: float = 0.02,
                         convergence_periods: int = 3) -> ObserverReport:
    signals = tcp_window_signals(records, window_rounds, flow_id)
    return ObserverReport(
        converged=actions_converged(actions, convergence_epsilon,
                                    convergence_periods),
        env_changed=signals.membership_changed
        or signals.rate_shift > rate_shift_delta,
        notable=(),
        window=signals.window,
        signals=signals,
    )
