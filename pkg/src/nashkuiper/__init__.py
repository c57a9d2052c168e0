"""Discrete convex integration of 2-d metrics into R^4."""
