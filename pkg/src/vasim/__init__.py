"""Executable framework for visibility allocation systems.

Tool problems (filter, sort, search, moderation), data-flow diagrams with
feedback-loop analysis, and an agent-based school-choice simulation.
"""
__version__ = "0.1.0"
