"""Throughput, fairness and error metrics over trajectory logs.

Throughput is measured in successes per slot. Fairness utilities scale
throughputs by 100 before applying the utility function, so a node that
succeeds in 20% of slots contributes g(20).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Dict, List, Mapping, Sequence

from .errors import MetricDomainError
from .mac import SlotOutcome, TrajectoryLog

THROUGHPUT_SCALE = 100.0
DEFAULT_WINDOW_FRAMES = 100
DEFAULT_WARMUP_FRAMES = 500


@dataclass
class ThroughputSeries:
    """Windowed throughput per node, one value per frame index."""

    frames: List[int]
    values: Dict[int, List[float]]
    window_frames: int


def windowed_throughput(log: TrajectoryLog,
                        window_frames: int = DEFAULT_WINDOW_FRAMES) -> ThroughputSeries:
    """Per-node successes over the trailing window, divided by the number
    of slots in the window. Defined for frames >= window_frames; a node
    contributes zero for slots where it is not live."""
    if window_frames < 1:
        raise MetricDomainError("window_frames must be >= 1")
    if not log.records:
        raise MetricDomainError("empty trajectory log")
    node_ids = sorted({nid for _, ids in log.segments for nid in ids})
    total_frames = log.records[-1].frame_index + 1
    per_frame: Dict[int, List[int]] = {
        nid: [0] * total_frames for nid in node_ids
    }
    for rec in log.records:
        if rec.outcome is not SlotOutcome.SUCCESS:
            continue
        winner = rec.transmitters[0]
        per_frame[winner][rec.frame_index] += 1

    frames = list(range(window_frames, total_frames + 1))
    slots_per_window = window_frames * log.frame_len
    values: Dict[int, List[float]] = {nid: [] for nid in node_ids}
    for nid in node_ids:
        counts = per_frame[nid]
        running = sum(counts[:window_frames])
        values[nid].append(running / slots_per_window)
        for f in range(window_frames, total_frames):
            running += counts[f] - counts[f - window_frames]
            values[nid].append(running / slots_per_window)
    # Frame label f means "window ending at frame f", i.e. frames
    # (f - window, f] counted with 1-based frame numbering.
    return ThroughputSeries(frames=frames, values=values,
                            window_frames=window_frames)


def node_mean_throughputs(log: TrajectoryLog) -> Dict[int, float]:
    """Per-node success rate averaged over the slots the node was live."""
    if not log.records:
        raise MetricDomainError("empty trajectory log")
    totals: Dict[int, int] = {}
    counts: Dict[int, int] = {}
    for rec in log.records:
        for nid, reward in zip(rec.live_ids, rec.reward_vector):
            totals[nid] = totals.get(nid, 0) + reward
            counts[nid] = counts.get(nid, 0) + 1
    return {nid: totals[nid] / counts[nid] for nid in sorted(totals)}


def alpha_fair_value(throughputs: Sequence[float], alpha: float = 1.0) -> float:
    """Sum of the alpha-fair utility of 100x each throughput.

    alpha=1 uses the log form and requires strictly positive inputs;
    callers are expected to clamp to a small floor first.
    """
    total = 0.0
    for i, x in enumerate(throughputs):
        scaled = THROUGHPUT_SCALE * x
        if alpha == 1.0:
            if scaled <= 0.0:
                raise MetricDomainError(
                    f"throughputs[{i}] = {x} not positive; log utility undefined"
                )
            total += math.log(scaled)
        else:
            if scaled < 0.0:
                raise MetricDomainError(f"throughputs[{i}] = {x} negative")
            total += scaled ** (1.0 - alpha) / (1.0 - alpha)
    return total


def jain_index(throughputs: Sequence[float]) -> float:
    """(sum x)^2 / (N * sum x^2); 1 means perfectly even allocation."""
    xs = list(throughputs)
    if not xs:
        raise MetricDomainError("jain index needs at least one value")
    if any(x < 0 for x in xs):
        raise MetricDomainError("jain index defined for nonnegative values")
    square_sum = sum(x * x for x in xs)
    if square_sum == 0.0:
        raise MetricDomainError("jain index undefined for all-zero input")
    total = sum(xs)
    return (total * total) / (len(xs) * square_sum)


def rmse_vs_reference(series: ThroughputSeries,
                      reference: Mapping[int, Sequence[float]],
                      warmup_frames: int = DEFAULT_WARMUP_FRAMES) -> float:
    """Root mean squared error between a measured series and a per-frame
    reference, over every (node, frame) pair with frame > warmup.

    ``reference`` maps node id to one value per frame (index = frame).
    Nodes present on only one side count as zero on the other.
    """
    node_ids = sorted(set(series.values) | set(reference))
    count = 0
    acc = 0.0
    for idx, frame in enumerate(series.frames):
        if frame <= warmup_frames:
            continue
        for nid in node_ids:
            measured = series.values.get(nid)
            m = measured[idx] if measured is not None else 0.0
            ref_series = reference.get(nid)
            if ref_series is None:
                r = 0.0
            else:
                if frame - 1 >= len(ref_series):
                    raise MetricDomainError(
                        f"reference for node {nid} shorter than series "
                        f"(frame {frame})"
                    )
                r = float(ref_series[frame - 1])
            acc += (m - r) ** 2
            count += 1
    if count == 0:
        raise MetricDomainError("no frames after warmup to compare")
    return math.sqrt(acc / count)


def slot_utilization(log: TrajectoryLog, last_frames: int = 100) -> List[float]:
    """Fraction of the last ``last_frames`` frames in which each frame
    position carried at least one transmission."""
    if not log.records:
        raise MetricDomainError("empty trajectory log")
    last_frame = log.records[-1].frame_index
    first_frame = max(0, last_frame - last_frames + 1)
    counts = [0] * log.frame_len
    frames_seen = set()
    for rec in reversed(log.records):
        if rec.frame_index < first_frame:
            break
        frames_seen.add(rec.frame_index)
        if rec.outcome is not SlotOutcome.IDLE:
            counts[rec.frame_position] += 1
    n = len(frames_seen)
    if n == 0:
        raise MetricDomainError("no frames in utilization window")
    return [c / n for c in counts]
