"""Knowledge-graph retrieval-augmented generation engine for telecom networks."""
from __future__ import annotations

__version__ = "0.1.0"
