"""Numerical and orchestration services."""
