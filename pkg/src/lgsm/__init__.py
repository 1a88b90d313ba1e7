"""Linearized Graph Sequence Models."""
