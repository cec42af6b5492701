"""Ensures the tests directory (planlib, oracles, scenarios) is importable."""
