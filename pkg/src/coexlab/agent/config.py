"""Agent configuration knobs, all defaults surfaced in one place."""

from __future__ import annotations

from dataclasses import asdict, dataclass


@dataclass(frozen=True)
class AgentConfig:
    """Every tunable of the learning pipeline.

    The query period must be a whole number of frames; the online loop
    re-decides actions only at period boundaries.
    """

    # online decision cadence and convergence detection
    query_period_slots: int = 100          # T
    convergence_epsilon: float = 0.02      # per-entry action drift bound
    convergence_periods: int = 3           # consecutive stable periods
    # observer thresholds
    observer_window_frames: int = 100      # M
    rate_shift_delta: float = 0.1          # outcome-rate change trigger
    overuse_threshold: float = 0.9         # slot utilization flagged as owned
    # exploration written into generated strategies
    explore_epsilon: float = 0.0
    explore_sigma: float = 0.05
    tcp_explore_sigma: float = 0.0
    # escape from a converged-but-underperforming action
    escape_sigma: float = 0.1
    escape_ratio: float = 0.9
    # offline loop
    j_opt_fraction: float = 0.95
    mac_j_target: float = 6.0              # fallback when no oracle applies
    tcp_j_target: float = 1.5
    n_max: int = 5                         # refinement rounds
    asi_retries: int = 3                   # R, total materialization attempts
    demo_k: int = 8                        # sampled actions per demo scenario
    demo_frames: int = 100                 # action window per mac sample
    demo_rounds: int = 200                 # action window per tcp sample
    eval_frames: int = 1500                # evaluation episode length, mac
    eval_rounds: int = 1000                # evaluation episode length, tcp
    eval_episodes: int = 1
    # metrics parameters
    alpha: float = 1.0
    window_frames: int = 100               # throughput smoothing window
    warmup_frames: int = 500               # excluded from error metrics
    # ranker placement
    ranker_offline: bool = True
    ranker_online: bool = False
    # tcp online cadence
    tcp_query_period_rounds: int = 100
    tcp_observer_window_rounds: int = 100

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self, frame_len: int = 10) -> None:
        if self.query_period_slots % frame_len:
            raise ValueError("query period must cover whole frames")
        if self.n_max < 0 or self.asi_retries < 1 or self.demo_k < 1:
            raise ValueError("loop bounds out of range")
