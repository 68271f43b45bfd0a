"""Agentic tabletop manipulation: perception, reasoning and control agents
driven by language/vision model backends, with a deterministic simulator
and a data-collection harness."""

__version__ = "0.1.0"
