"""Simulator and benchmark harness for decentralized stochastic gradient methods."""

__version__ = "0.1.0"
