"""Simulator, cost model and privacy tooling for split and federated training across client, edge and central tiers."""

__version__ = "0.1.0"
