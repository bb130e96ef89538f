"""Prompt optimization for secure code generation via code-graph repair."""

__version__ = "0.1.0"
