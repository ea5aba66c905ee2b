"""Multi-agent orchestration: demos, offline learning, online control."""
