"""coexlab: a deterministic laboratory for agent-designed channel access
and congestion control coexisting with fixed-protocol peers."""

__version__ = "0.1.0"
