"""Decoupled multi-turn text-to-SQL workbench: rewrite, parse, dual-learn."""

__version__ = "0.1.0"
