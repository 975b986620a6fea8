"""Synthetic benchmark generation, experiment orchestration, CLI, reports."""
