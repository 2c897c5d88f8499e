"""Saccade-conditioned next-token prediction lab: scenes, a GRU predictor,
a symbolic dictionary oracle, linear probes and causal interventions."""

__version__ = "0.1.0"
