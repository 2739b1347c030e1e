"""Decentralized optimization simulator: gradient tracking over gossip networks
with statistical preconditioning and Nesterov-type outer acceleration."""

__version__ = "0.1.0"
