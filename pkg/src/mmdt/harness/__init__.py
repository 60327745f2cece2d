"""Synthetic data, prompt stub, persistence, drivers and the invariant suite."""
