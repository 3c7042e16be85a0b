"""Reuse frozen CNN filters for new tasks via GAP linear probes, and prune per task."""

__version__ = "0.1.0"
