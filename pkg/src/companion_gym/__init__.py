"""Tool-interactive shopping-agent environment with memory retrieval, rewards and benchmark synthesis."""

__version__ = "0.1.0"
