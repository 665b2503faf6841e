"""Decentralized momentum natural policy gradient for collaborative multi-agent RL."""

from .optimizer import RunConfig, run
from .topology import build_topology, mix, spectral_rho

__all__ = ["RunConfig", "run", "build_topology", "mix", "spectral_rho"]
__version__ = "0.1.0"
